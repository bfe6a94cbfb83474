"""Energy-estimation metrics, the ablation protocol and report files."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

CONFIGS = ("module2_only", "module1_2", "full")
CSV_COLUMNS = ("config", "seed", "n", "mae_kcal", "mape_pct", "maeom_pct", "mean_gt_kcal")


class MissingArtifact(LookupError):
    """A model or file required by the requested configuration is absent."""


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {gt.size} groundtruth values")
    if pred.size == 0:
        raise ValueError("no samples")
    return pred, gt


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def mape(pred, gt) -> float:
    """Mean absolute percentage error; samples with gt <= 0 are skipped."""
    pred, gt = _pair(pred, gt)
    keep = gt > 0
    if not keep.any():
        raise ValueError("every sample has zero groundtruth energy")
    if not keep.all():
        log.warning("mape: excluded %d samples with non-positive groundtruth", int((~keep).sum()))
    return float(100.0 * np.mean(np.abs(pred[keep] - gt[keep]) / gt[keep]))


def maeom(pred, gt) -> float:
    """MAE as a percentage of the mean groundtruth."""
    pred, gt = _pair(pred, gt)
    m = float(np.mean(gt))
    if m == 0:
        raise ValueError("mean groundtruth is zero")
    return 100.0 * mae(pred, gt) / m


def maeom_from(mae_value: float, mean_gt: float) -> float:
    if mean_gt == 0:
        raise ValueError("mean groundtruth is zero")
    return 100.0 * mae_value / mean_gt


@dataclass(frozen=True)
class MetricsReport:
    n: int
    mae_kcal: float
    mape_pct: float
    maeom_pct: float
    mean_gt_kcal: float

    @classmethod
    def compute(cls, pred, gt) -> "MetricsReport":
        pred, gt = _pair(pred, gt)
        m = mae(pred, gt)
        mean_gt = float(np.mean(gt))
        return cls(len(gt), m, mape(pred, gt), maeom_from(m, mean_gt), mean_gt)


@dataclass(frozen=True)
class AblationRow:
    config: str
    seed: int | str
    report: MetricsReport
    pred: tuple[float, ...] = ()
    gt: tuple[float, ...] = ()

    def csv_row(self) -> list:
        r = self.report
        return [self.config, self.seed, r.n, repr(r.mae_kcal), repr(r.mape_pct), repr(r.maeom_pct), repr(r.mean_gt_kcal)]


Predictor = Callable[[Sequence], np.ndarray]


def run_ablation(
    samples: Sequence,
    models: Mapping[int, Mapping[str, Predictor]],
    configs: Sequence[str] = CONFIGS,
) -> list[AblationRow]:
    """Evaluate each configuration's predictor for each seed on ``samples``.

    ``models[seed][config]`` maps a list of samples to predicted energies.
    """
    if not samples:
        raise ValueError("no evaluation samples")
    gt = np.array([s.energy for s in samples], dtype=np.float64)
    rows = []
    for seed in sorted(models):
        for config in configs:
            fn = models[seed].get(config)
            if fn is None:
                raise MissingArtifact(f"no model for configuration {config!r} at seed {seed}")
            pred = np.asarray(fn(samples), dtype=np.float64)
            rows.append(AblationRow(config, seed, MetricsReport.compute(pred, gt), tuple(pred), tuple(gt)))
    return rows


def median_table(rows: Sequence[AblationRow]) -> list[AblationRow]:
    """Median of every metric over seeds, one row per configuration."""
    out = []
    for config in dict.fromkeys(r.config for r in rows):
        reps = [r.report for r in rows if r.config == config]
        med = MetricsReport(
            int(np.median([r.n for r in reps])),
            float(np.median([r.mae_kcal for r in reps])),
            float(np.median([r.mape_pct for r in reps])),
            float(np.median([r.maeom_pct for r in reps])),
            float(np.median([r.mean_gt_kcal for r in reps])),
        )
        out.append(AblationRow(config, "median", med))
    return out


def format_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'config':<14}{'seed':>8}{'n':>6}{'MAE kCal':>12}{'MAPE %':>10}{'MAEoM %':>10}"]
    for r in rows:
        m = r.report
        lines.append(f"{r.config:<14}{str(r.seed):>8}{m.n:>6}{m.mae_kcal:>12.2f}{m.mape_pct:>10.2f}{m.maeom_pct:>10.2f}")
    return "\n".join(lines)


def write_metrics_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


def read_metrics_csv(path) -> list[AblationRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            seed = rec["seed"]
            rep = MetricsReport(
                int(rec["n"]), float(rec["mae_kcal"]), float(rec["mape_pct"]),
                float(rec["maeom_pct"]), float(rec["mean_gt_kcal"]),
            )
            rows.append(AblationRow(rec["config"], int(seed) if seed.lstrip("-").isdigit() else seed, rep))
    return rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def scatter_svg(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], size: int = 480) -> str:
    """Predicted vs groundtruth energy, one colour per series, with a y = x line."""
    pad = 48
    allv = [float(x) for pred, gt in series.values() for x in (*pred, *gt)]
    hi = max(allv) * 1.05 if allv and max(allv) > 0 else 1.0
    span = size - 2 * pad

    def sx(v):
        return pad + span * v / hi

    def sy(v):
        return size - pad - span * v / hi

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" stroke="#888" stroke-dasharray="4 3"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
        f'<text x="{size / 2:.0f}" y="{size - 12}" text-anchor="middle" font-size="12">groundtruth energy (kCal)</text>',
        f'<text x="14" y="{size / 2:.0f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {size / 2:.0f})">predicted energy (kCal)</text>',
        f'<text x="{pad}" y="{size - pad + 14}" font-size="10">0</text>',
        f'<text x="{size - pad}" y="{size - pad + 14}" text-anchor="end" font-size="10">{hi:.0f}</text>',
    ]
    for i, (name, (pred, gt)) in enumerate(series.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        out.append(f'<g fill="{colour}" fill-opacity="0.7"><title>{name}</title>')
        out.extend(f'<circle cx="{sx(g):.2f}" cy="{sy(p):.2f}" r="2.5"/>' for p, g in zip(pred, gt))
        out.append("</g>")
        out.append(f'<text x="{pad + 8}" y="{pad + 14 * (i + 1)}" font-size="11" fill="{colour}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(rows: Sequence[AblationRow], out_dir) -> dict[str, Path]:
    """Write metrics.csv (per-seed rows), ablation.csv (medians) and scatter.svg."""
    if not rows:
        raise ValueError("no rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "scatter": out / "scatter.svg"}
    write_metrics_csv(paths["metrics"], rows)
    if len({r.seed for r in rows}) > 1:
        paths["ablation"] = out / "ablation.csv"
        write_metrics_csv(paths["ablation"], median_table(rows))
    # plot the first seed of each configuration
    series = {}
    for r in rows:
        if r.pred and r.config not in series:
            series[r.config] = (r.pred, r.gt)
    paths["scatter"].write_text(scatter_svg(series))
    return paths
