import numpy as np
import pytest

from gridloc.poi_data import Dataset, PointFeature, TypeVocabulary


def make_dataset(locs, types, names=None):
    """Dataset with ids 0..n-1; ``types`` holds one tuple of type ids per point."""
    locs = np.asarray(locs, dtype=np.float64)
    V = 1 + max(max(t) for t in types)
    vocab = TypeVocabulary(names or [f"t{i}" for i in range(V)])
    pts = tuple(PointFeature(i, (float(x), float(y)), tuple(t))
                for i, ((x, y), t) in enumerate(zip(locs, types)))
    lo, hi = locs.min(axis=0), locs.max(axis=0)
    return Dataset(pts, vocab, (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])))


@pytest.fixture
def small_ds():
    rng = np.random.default_rng(7)
    locs = rng.uniform(0, 1000, (60, 2))
    types = [(int(i % 3),) if i % 5 else (0, 2) for i in range(60)]
    return make_dataset(locs, types)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request, capsys):
    """Record one PASS/FAIL line per criterion; echoed live and in the summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
