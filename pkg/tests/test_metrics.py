import logging
import re
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxcal.metrics import (
    CONFIGS,
    AblationRow,
    MetricsReport,
    MissingArtifact,
    emit_report,
    format_table,
    mae,
    maeom,
    maeom_from,
    mape,
    median_table,
    read_metrics_csv,
    run_ablation,
    scatter_svg,
)

positive = st.floats(1.0, 1e4, allow_nan=False)


def test_hand_values():
    assert mae([110, 90], [100, 100]) == pytest.approx(10.0, abs=1e-9)
    assert mape([110, 90], [100, 100]) == pytest.approx(10.0, abs=1e-9)
    assert maeom([110, 90], [100, 100]) == pytest.approx(10.0, abs=1e-9)
    assert mape(np.array([120.0, 60.0]), np.array([100.0, 50.0])) == pytest.approx(20.0, abs=1e-9)
    assert mae([3, 4], [3, 4]) == 0.0 and mape([3, 4], [3, 4]) == 0.0
    assert mae(np.array([1.0, 2.0]) + 5.0, [1.0, 2.0]) == pytest.approx(5.0)


def test_reference_pair():
    assert abs(maeom_from(40.05, 253.48) - 15.8) <= 0.05


def test_errors():
    with pytest.raises(ValueError):
        mae([1, 2], [1])
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        mape([1.0], [0.0])
    with pytest.raises(ValueError):
        maeom([1.0, -1.0], [1.0, -1.0])


def test_mape_skips_zero_groundtruth(caplog):
    with caplog.at_level(logging.WARNING):
        assert mape([110, 5], [100, 0]) == pytest.approx(10.0)
    assert "excluded 1" in caplog.text


def test_maeom_identity_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        gt = rng.uniform(1, 500, n)
        pred = gt + rng.normal(0, 50, n)
        assert abs(maeom(pred, gt) - 100.0 * mae(pred, gt) / gt.mean()) <= 1e-9
        r = MetricsReport.compute(pred, gt)
        assert abs(r.maeom_pct - 100.0 * r.mae_kcal / r.mean_gt_kcal) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(positive, positive), min_size=1, max_size=12), st.floats(0.01, 100.0))
def test_scaling_and_permutation(pairs, c):
    pred = np.array([p for p, _ in pairs])
    gt = np.array([g for _, g in pairs])
    assert mape(c * pred, c * gt) == pytest.approx(mape(pred, gt), rel=1e-9, abs=1e-9)
    assert mae(c * pred, c * gt) == pytest.approx(c * mae(pred, gt), rel=1e-9, abs=1e-9)
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert mae(pred[perm], gt[perm]) == pytest.approx(mae(pred, gt), rel=1e-12)
    assert mape(pred[perm], gt[perm]) == pytest.approx(mape(pred, gt), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(positive, positive), min_size=1, max_size=12))
def test_equal_groundtruth_makes_maeom_equal_mape(pairs):
    pred = np.array([p for p, _ in pairs])
    gt = np.full(len(pairs), pairs[0][1])
    assert maeom(pred, gt) == pytest.approx(mape(pred, gt), rel=1e-9)


def fake_samples(energies):
    return [SimpleNamespace(energy=e) for e in energies]


def test_ablation_with_oracle_predictors():
    samples = fake_samples([100.0, 250.0, 40.0])

    def oracle(ss):
        return [s.energy for s in ss]

    rows = run_ablation(samples, {s: {c: oracle for c in CONFIGS} for s in (0, 1, 2)})
    assert len(rows) == 9
    for r in rows:
        assert (r.report.mae_kcal, r.report.mape_pct, r.report.maeom_pct) == (0.0, 0.0, 0.0)
    med = median_table(rows)
    assert [r.config for r in med] == list(CONFIGS) and all(r.seed == "median" for r in med)
    with pytest.raises(MissingArtifact):
        run_ablation(samples, {0: {"full": oracle}})
    with pytest.raises(ValueError):
        run_ablation([], {0: {}})


def test_median_over_seeds():
    rows = [AblationRow("full", s, MetricsReport(2, m, m, m, 1.0)) for s, m in enumerate([3.0, 1.0, 2.0])]
    assert median_table(rows)[0].report.mae_kcal == 2.0
    assert "full" in format_table(rows)


def test_csv_roundtrip_and_report_files(tmp_path):
    rng = np.random.default_rng(1)
    gt = rng.uniform(50, 400, 10)
    rows = []
    for seed in (0, 1):
        for config in CONFIGS:
            pred = gt * rng.uniform(0.7, 1.3, 10)
            rows.append(AblationRow(config, seed, MetricsReport.compute(pred, gt), tuple(pred), tuple(gt)))
    paths = emit_report(rows, tmp_path / "r")
    lines = paths["metrics"].read_text().splitlines()
    assert lines[0] == "config,seed,n,mae_kcal,mape_pct,maeom_pct,mean_gt_kcal"
    assert len(lines) == 7
    back = read_metrics_csv(paths["metrics"])
    for a, b in zip(rows, back):
        assert (a.config, a.seed) == (b.config, b.seed)
        for f in ("n", "mae_kcal", "mape_pct", "maeom_pct", "mean_gt_kcal"):
            assert getattr(a.report, f) == getattr(b.report, f)
    assert len(read_metrics_csv(paths["ablation"])) == 3
    svg = paths["scatter"].read_text()
    assert svg.startswith("<svg") and "href" not in svg
    assert svg.count("<circle") == 30

    single = emit_report(rows[:1], tmp_path / "one")
    assert len(single["metrics"].read_text().splitlines()) == 2
    assert "ablation" not in single
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "none")


def test_scatter_points_on_guide_line_when_exact():
    vals = [10.0, 50.0, 200.0]
    svg = scatter_svg({"full": (vals, vals)})
    for cx, cy in re.findall(r'<circle cx="([\d.]+)" cy="([\d.]+)"', svg):
        # the guide runs from (pad, size - pad) with slope -1 in screen space
        assert float(cx) + float(cy) == pytest.approx(480.0, abs=0.02)
