"""Command-line entry points: generate, train, eval, analyze, viz.

Every command reads a JSON run config, applies ``--seed`` and ``--out``
overrides, writes ``config.resolved.json`` into the output directory and
then its own artifacts. All randomness is derived from the root seed by
purpose key, so outputs are byte-identical across re-runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import OPEN_CHOICE_DEFAULTS, RunConfig, load_config, resolved_encoder_params
from .encoder_assembly import EncoderConfig, sample_disc_anchors, sample_point_anchors
from .errors import ConfigError, DataError, GridlocError, TrainingDivergence
from .evaluation import evaluate_model, evaluate_random
from .models import ModelSpec, PointTable, build_model, load_model, save_model
from .neural_core import derive_rng, derive_seed
from .poi_data import (Dataset, generate_synthetic, load_poi_csv, process_from_dict,
                       process_to_dict, split_dataset, write_poi_csv)
from .training import TrainConfig, train

log = logging.getLogger("gridloc")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.model_dump(mode="json")
    resolved["encoder"] = resolved_encoder_params(cfg.task, cfg.encoder)
    _dump_json(resolved, out / "config.resolved.json")
    return out


# --------------------------------------------------------------------------
# Pipeline pieces


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.dataset
    if d.path is not None and d.synthetic is not None:
        raise ConfigError("dataset: set either 'path' or 'synthetic', not both")
    if d.path is not None:
        if not Path(d.path).is_file():
            raise DataError(f"dataset file not found: {d.path}")
        return load_poi_csv(d.path)
    if d.synthetic is not None:
        return _synthesize(cfg)
    raise ConfigError("config has no dataset; set dataset.path or dataset.synthetic")


def _synthesize(cfg: RunConfig) -> Dataset:
    syn = cfg.dataset.synthetic
    specs = [process_from_dict(c) for c in syn.components]
    return generate_synthetic(specs, syn.bbox, seed=derive_seed(cfg.seed, "synthetic"))


def _split(ds: Dataset, ratios, seed: int):
    return split_dataset(ds, ratios, seed)


def max_context_displacement(data: PointTable, n: int) -> float:
    nbr = data.neighbors(n)
    disp = data.locs[:, None, :] - data.locs[nbr]
    r = float(np.sqrt((disp ** 2).sum(axis=-1)).max())
    return r if r > 0 else 1.0


def build_encoder_config(cfg: RunConfig, data: PointTable, train_rows: np.ndarray,
                         view_radius: float | None) -> EncoderConfig | None:
    """Resolve the encoder section against the data (box, anchors, polar radius)."""
    params = resolved_encoder_params(cfg.task, cfg.encoder)
    kind = params.pop("kind")
    if kind == "none":
        if cfg.task != "cont":
            raise ConfigError("encoder kind 'none' is only valid for the cont task")
        return None
    num_anchors = params.pop("num_anchors")
    if cfg.task == "loc":
        box = data.ds.bbox
    else:
        box = (-view_radius, -view_radius, view_radius, view_radius)
    params["box"] = box
    if kind in ("rbf", "scaled_rbf"):
        if not num_anchors or num_anchors < 1:
            raise ConfigError(f"encoder {kind!r} requires num_anchors >= 1")
        rng = derive_rng(cfg.seed, "anchors")
        if cfg.task == "loc":
            params["anchors"] = sample_point_anchors(data.locs[train_rows], num_anchors, rng)
        else:
            params["anchors"] = sample_disc_anchors(num_anchors, view_radius, rng)
    if kind == "polar_tile" and params.get("r_max") is None:
        params["r_max"] = view_radius if cfg.task == "cont" else float(
            np.hypot(box[2] - box[0], box[3] - box[1]))
    return EncoderConfig(kind=kind, **params)


def model_name(cfg: RunConfig) -> str:
    return f"{cfg.encoder.kind}_{cfg.task}"


# --------------------------------------------------------------------------
# Commands


def cmd_generate(cfg: RunConfig) -> Path:
    if cfg.dataset.synthetic is None:
        raise ConfigError("generate needs dataset.synthetic in the config")
    out = _prepare_out(cfg)
    ds = _synthesize(cfg)
    write_poi_csv(ds, out / "dataset.csv")
    syn = cfg.dataset.synthetic
    counts = {ds.vocab.name(t): int(len(ds.points_of_type(t))) for t in range(len(ds.vocab))}
    _dump_json({
        "root_seed": cfg.seed,
        "generator_seed": derive_seed(cfg.seed, "synthetic"),
        "bbox": list(ds.bbox),
        "components": [process_to_dict(process_from_dict(c)) for c in syn.components],
        "num_points": len(ds),
        "counts": counts,
    }, out / "dataset.meta.json")
    return out / "dataset.csv"


def cmd_train(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg)
    out = _prepare_out(cfg)
    split_seed = derive_seed(cfg.seed, "split")
    split = _split(ds, cfg.split.ratios, split_seed)
    data = PointTable(ds)
    train_rows = ds.indices(split.train)
    if cfg.task == "cont":
        radius = max_context_displacement(data, cfg.model.context_size)
        view = (-radius, -radius, radius, radius)
    else:
        radius, view = None, ds.bbox
    enc = build_encoder_config(cfg, data, train_rows, radius)
    spec = ModelSpec(task=cfg.task, vocab_size=len(ds.vocab), feat_dim=cfg.model.feat_dim,
                     encoder=enc, context_size=cfg.model.context_size, heads=cfg.model.heads,
                     activation=cfg.model.activation, seed=derive_seed(cfg.seed, "model"))
    model = build_model(spec)
    tcfg = TrainConfig(epochs=cfg.train.epochs, batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                       num_negatives=cfg.train.num_negatives, seed=derive_seed(cfg.seed, "train"))
    result = train(model, data, split, tcfg)
    ckpt = out / "model.ckpt"
    save_model(model, ckpt, {
        "name": model_name(cfg),
        "split_seed": split_seed,
        "split_ratios": list(cfg.split.ratios),
        "view_extent": [float(v) for v in view],
        "dataset": {"num_points": len(ds), "types": ds.vocab.names},
    })
    _dump_json({
        "model": model_name(cfg),
        "checkpoint": ckpt.name,
        "split_sizes": dict(zip(("train", "val", "test"), split.sizes())),
        "history": result.history.to_dict(),
        "open_choice_defaults": OPEN_CHOICE_DEFAULTS,
    }, out / "run.json")
    return ckpt


def _split_ids(split, which: str):
    return {"train": split.train, "val": split.val, "test": split.test}[which]


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, baseline: str | None = None) -> Path:
    if (checkpoint is None) == (baseline is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --baseline")
    ds = load_dataset(cfg)
    ev = cfg.eval
    eval_seed = derive_seed(cfg.seed, "eval")
    if baseline is not None:
        if baseline != "random":
            raise ConfigError(f"unknown baseline {baseline!r}")
        out = _prepare_out(cfg)
        split = _split(ds, cfg.split.ratios, derive_seed(cfg.seed, "split"))
        ids = _split_ids(split, ev.split)
        report = evaluate_random(len(ds), len(ids), ev.num_negatives, ev.k, ev.repeats, eval_seed)
    else:
        if not Path(checkpoint).is_file():
            raise DataError(f"checkpoint not found: {checkpoint}")
        model, header = load_model(checkpoint)
        expected = header.get("dataset", {}).get("num_points")
        if expected is not None and expected != len(ds):
            raise DataError(f"checkpoint was trained on {expected} points; dataset has {len(ds)}")
        out = _prepare_out(cfg)
        split = _split(ds, header.get("split_ratios", cfg.split.ratios), header["split_seed"])
        ids = _split_ids(split, ev.split)
        report = evaluate_model(model, PointTable(ds), ids, ev.num_negatives, ev.k, ev.repeats,
                                eval_seed, name=header.get("name"))
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    return out / "report.txt"


def cmd_analyze(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg)
    out = _prepare_out(cfg)
    a = cfg.analysis
    if not a.radius_step > 0 or not a.radius_max >= a.radius_step:
        raise ConfigError("analysis radii need 0 < radius_step <= radius_max")
    radii = np.arange(a.radius_step, a.radius_max + a.radius_step / 2, a.radius_step)
    rdir = out / "ripley"
    rdir.mkdir(exist_ok=True)
    rows = ["type_id,type,count,radius,group"]
    for t in range(len(ds.vocab)):
        count = len(ds.points_of_type(t))
        name = ds.vocab.name(t).replace(",", " ")
        if count < 2:
            rows.append(f"{t},{name},{count},,insufficient")
            continue
        curve = analysis.renormalized_curve(analysis.ripley_k(ds, t, radii), a.reference_area)
        (rdir / f"type_{t}.csv").write_text(curve.to_csv(), encoding="utf-8")
        r = analysis.radius_at_threshold(curve, a.y)
        group = analysis.group_for_radius(r, *a.thresholds)
        rows.append(f"{t},{name},{count},{'' if r is None else format(r, '.17g')},{group.value}")
    (out / "groups.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out / "groups.csv"


def cmd_viz(cfg: RunConfig, checkpoint: str) -> Path:
    if not Path(checkpoint).is_file():
        raise DataError(f"checkpoint not found: {checkpoint}")
    model, header = load_model(checkpoint)
    if model.encoder is None:
        raise ConfigError("checkpoint has no location encoder to visualize")
    v = cfg.viz
    extent = v.extent if v.extent is not None else tuple(header["view_extent"])
    out = _prepare_out(cfg)
    vdir = out / "viz"
    vdir.mkdir(exist_ok=True)
    grid = analysis.response_map(model.encoder, v.neurons, extent, v.resolution)
    for n, m in zip(grid.neurons, grid.maps):
        for fmt in ("csv", "pgm"):
            analysis.export_grid(m, vdir / f"neuron_{n}.{fmt}", fmt)
    labels = analysis.embedding_cluster_map(model.encoder, extent, v.resolution, v.clusters)
    for fmt in ("csv", "pgm"):
        analysis.export_grid(labels, vdir / f"clusters.{fmt}", fmt)
    return vdir


# --------------------------------------------------------------------------
# Entry point


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=_seed, help="root seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        return sp

    common(sub.add_parser("generate", help="sample a synthetic dataset"))
    common(sub.add_parser("train", help="train a model and write a checkpoint"))
    ev = common(sub.add_parser("eval", help="rank test points and write a report"))
    ev.add_argument("--checkpoint", help="checkpoint written by train")
    ev.add_argument("--baseline", choices=["random"], help="evaluate a baseline instead")
    common(sub.add_parser("analyze", help="Ripley curves and distribution groups"))
    vz = common(sub.add_parser("viz", help="encoder response and cluster maps"))
    vz.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    update = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.out is not None:
        update["output_dir"] = args.out
    return cfg.model_copy(update=update) if update else cfg


def run(args) -> Path:
    cfg = resolve_config(args)
    if args.command == "generate":
        return cmd_generate(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.baseline)
    if args.command == "analyze":
        return cmd_analyze(cfg)
    return cmd_viz(cfg, args.checkpoint)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = run(args)
    except TrainingDivergence as exc:
        print(f"gridloc: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (GridlocError, ValueError, OSError) as exc:
        print(f"gridloc: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.debug("unexpected failure", exc_info=True)
        print(f"gridloc: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
