"""Command-line entry point: synth, train, infer, eval, ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 missing artifact
(dataset, checkpoint, input image), 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from .adaptation import estimate_batch
from .gan import NumericError
from .metrics import MissingArtifact, emit_report, format_table, median_table, run_ablation
from .pipeline import (
    STAGES,
    RunConfig,
    RunRecord,
    load_models,
    oracle_predictors,
    open_dataset,
    predictors,
    train_all,
    version_string,
)
from .synth import Scene, make_dataset, read_rgb

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("voxcal")


class UsageError(ValueError):
    pass


def _global_flags() -> argparse.ArgumentParser:
    # defaults are suppressed so a flag given before the subcommand is not
    # overwritten by the subparser's default
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite existing outputs")
    p.add_argument("--oracle", action="store_true", default=argparse.SUPPRESS,
                   help="replace every model by a groundtruth passthrough")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS,
                   help="override one config key (value parsed as JSON)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="voxcal", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train one stage or all stages")
    t.add_argument("--stage", choices=STAGES + ("all",), default="all")
    t.add_argument("--all-seeds", action="store_true", help="train every ablation seed instead of --seed")
    i = sub.add_parser("infer", parents=[common], help="estimate energy from RGB images")
    i.add_argument("images", nargs="+", help="binary PPM images")
    i.add_argument("--out", help="output directory (default: <report_dir>/infer)")
    sub.add_parser("eval", parents=[common], help="evaluate the full pipeline on the test split")
    sub.add_parser("ablate", parents=[common], help="three-configuration ablation over the ablation seeds")
    return parser


def resolve_config(args) -> RunConfig:
    d = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(f"config file not found: {path}")
        d = json.loads(path.read_text())
    for item in getattr(args, "set", []) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            d[key] = json.loads(value)
        except json.JSONDecodeError:
            d[key] = value
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return RunConfig.from_dict(d)


def _record(cfg: RunConfig, stage_seconds=None, metrics=None) -> None:
    path = Path(cfg.report_dir) / "run_record.json"
    rec = RunRecord(cfg.to_dict(), version_string())
    if path.exists():
        old = json.loads(path.read_text())
        rec.stage_seconds.update(old.get("stage_seconds", {}))
        rec.metrics.update(old.get("metrics", {}))
    rec.stage_seconds.update(stage_seconds or {})
    rec.metrics.update(metrics or {})
    rec.write(cfg.report_dir)


def cmd_synth(cfg: RunConfig, force: bool) -> int:
    out = Path(cfg.dataset_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} is not empty; pass --force to regenerate")
        if not (out / "manifest.csv").exists():
            raise UsageError(f"refusing to clear {out}: it does not look like a dataset directory")
        shutil.rmtree(out)
    manifest = make_dataset(out, cfg.n_samples, cfg.num_classes, cfg.seed, cfg.split_ratio, cfg.image_size, Scene())
    c = manifest.counts()
    print(f"wrote {len(manifest.sample_ids)} samples to {out} ({c['train']} train / {c['test']} test)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, stage: str, all_seeds: bool) -> int:
    data = open_dataset(cfg)
    stages = STAGES if stage == "all" else (stage,)
    seeds = cfg.ablation_seeds if all_seeds else [cfg.seed]
    timings = {}
    for seed in seeds:
        for name, secs in train_all(cfg, seed, data, stages).items():
            timings[f"seed-{seed}/{name}"] = round(secs, 3)
            print(f"seed {seed}: trained {name} in {secs:.1f}s -> {cfg.ckpt(seed, name)}")
    _record(cfg, stage_seconds=timings)
    return EXIT_OK


def _sample_id(path: Path) -> str:
    return path.parent.name if path.stem == "rgb" else path.stem


def cmd_infer(cfg: RunConfig, images: list[str], out_dir: str | None) -> int:
    paths = [Path(p) for p in images]
    for p in paths:
        if not p.exists():
            raise MissingArtifact(f"input image not found: {p}")
    models = load_models(cfg, cfg.seed)
    batch = np.stack([read_rgb(p) for p in paths])
    if batch.shape[-1] != cfg.image_size:
        raise UsageError(f"images are {batch.shape[-1]}px but the models expect {cfg.image_size}px")
    # the adaptation layer was trained with v_scale = cell volume * Z * H * W
    cv = models.adaptation.v_scale / (cfg.z_res * cfg.image_size**2)
    estimates = estimate_batch(batch, [_sample_id(p) for p in paths], models.generator, models.regressor,
                               models.adaptation, cv, cfg.tau)
    out = Path(out_dir) if out_dir else Path(cfg.report_dir) / "infer"
    out.mkdir(parents=True, exist_ok=True)
    for est, p in zip(estimates, paths):
        if not math.isfinite(est.w_kcal):
            raise NumericError(f"non-finite energy for {p}")
        (out / f"{est.sample_id}.json").write_text(json.dumps(est.to_json(), indent=2) + "\n")
        print(f"{est.sample_id}: {est.w_kcal:.1f} kCal (v={est.v:.1f} ml, d={est.d:.3f} kCal/ml)")
    return EXIT_OK


def _evaluate(cfg: RunConfig, seeds, configs, oracle: bool):
    data = open_dataset(cfg)
    cv = data.cell_volume(cfg.z_res)
    models = {}
    for seed in seeds:
        if oracle:
            models[seed] = oracle_predictors()
        else:
            models[seed] = predictors(load_models(cfg, seed, baseline="module2_only" in configs), cv, cfg.tau)
    rows = run_ablation(data.test, models, configs)
    for r in rows:
        if not all(math.isfinite(x) for x in (r.report.mae_kcal, r.report.mape_pct)):
            raise NumericError(f"non-finite metrics for {r.config} seed {r.seed}")
    return rows


def cmd_eval(cfg: RunConfig, oracle: bool) -> int:
    rows = _evaluate(cfg, [cfg.seed], ("full",), oracle)
    emit_report(rows, cfg.report_dir)
    print(format_table(rows))
    r = rows[0].report
    _record(cfg, metrics={"full": {"mae_kcal": r.mae_kcal, "mape_pct": r.mape_pct, "maeom_pct": r.maeom_pct}})
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, oracle: bool) -> int:
    rows = _evaluate(cfg, cfg.ablation_seeds, ("module2_only", "module1_2", "full"), oracle)
    emit_report(rows, cfg.report_dir)
    med = median_table(rows)
    print(format_table(rows))
    print()
    print(format_table(med))
    _record(cfg, metrics={r.config: {"median_mae_kcal": r.report.mae_kcal, "median_mape_pct": r.report.mape_pct}
                          for r in med})
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    oracle = getattr(args, "oracle", False)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg, getattr(args, "force", False))
        if args.command == "train":
            return cmd_train(cfg, args.stage, args.all_seeds)
        if args.command == "infer":
            if oracle:
                raise UsageError("--oracle needs groundtruth and cannot be combined with infer")
            return cmd_infer(cfg, args.images, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, oracle)
        return cmd_ablate(cfg, oracle)
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
