"""End-to-end acceptance suite: one test per criterion.

Each test records a one-line summary; the conftest prints PASS/FAIL per
criterion at the end of the run.  Criterion 8 trains the full three-seed
ablation on the default dataset and takes roughly half an hour on one core.
"""
import json
import shutil
import time

import numpy as np
import pytest

from gradcases import primitive_cases
from voxcal import autodiff as ad
from voxcal.adaptation import AdaptationLayer, energy_loss
from voxcal.cli import main
from voxcal.depth import NormalizedDepthMap, postprocess
from voxcal.gan import GanConfig, GeneratorConfig, build_gan, gan_train, generator_losses, reference_voxels
from voxcal.metrics import mae, maeom, maeom_from, mape, read_metrics_csv
from voxcal.pipeline import RunConfig, load_models, open_dataset, predictors
from voxcal.regressor import BackboneConfig, DensityRegressor, RegressorTrainConfig, predict, regressor_loss, train_regressor
from voxcal.synth import DishSpec, Scene, build_samples, generate_dish
from voxcal.voxel import VoxelGrid, binarize, depth_to_voxel, volume, voxel_iou


def report(record_property, n, ok, detail):
    record_property("detail", detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ------------------------------------------------------------------ 1


def loop_voxelize(values, valid, z_res):
    h, w = values.shape
    occ = np.zeros((z_res, h, w), bool)
    for z in range(z_res):
        for y in range(h):
            for x in range(w):
                s = float(values[y, x]) * (z_res - 1)
                first = int(s + 0.5)  # values are non-negative
                occ[z, y, x] = bool(valid[y, x]) and z >= first
    return occ


@pytest.mark.criterion(1)
def test_c1_voxelizer_oracle(record_property):
    rng = np.random.default_rng(2024)
    maps = [(rng.random((16, 16)).astype(np.float32), rng.random((16, 16)) < 0.85) for _ in range(100)]
    t0 = time.perf_counter()
    grids = [depth_to_voxel(NormalizedDepthMap(v, m, 500.0, 600.0), 16).occupancy for v, m in maps]
    secs = time.perf_counter() - t0
    mismatched = sum(not np.array_equal(g, loop_voxelize(v, m, 16)) for g, (v, m) in zip(grids, maps))
    report(record_property, 1, mismatched == 0 and secs < 1.0,
           f"{100 - mismatched}/100 maps match the loop oracle, voxelizer {secs * 1000:.0f} ms")


# ------------------------------------------------------------------ 2

SHAPES = [("spherical_cap", 70.0, 65.0), ("cone", 50.0, 90.0), ("cylinder", 60.0, 70.0), ("paraboloid", 60.0, 80.0)]


def pipeline_volume_error(spec, n):
    scene = Scene()
    s = generate_dish(spec, n, scene, noise_sigma=0, salt_rate=0, specular_threshold=None)
    v = volume(depth_to_voxel(postprocess(s.raw_depth, s.mask), n, scene.cell_volume(n)))
    return abs(v - s.true_volume) / s.true_volume


@pytest.mark.criterion(2)
def test_c2_volume_convergence(record_property):
    t0 = time.perf_counter()
    ok, parts = True, []
    for shape, r, h in SHAPES:
        spec = DishSpec(shape, r, h, 0, 1.0)
        e64, e128 = pipeline_volume_error(spec, 64), pipeline_volume_error(spec, 128)
        ok &= e64 <= 0.05 and e128 <= 0.6 * e64
        parts.append(f"{shape} {100 * e64:.2f}%->{100 * e128:.2f}%")
    secs = time.perf_counter() - t0
    report(record_property, 2, ok and secs < 30, ", ".join(parts) + f" ({secs:.1f}s)")


# ------------------------------------------------------------------ 3


def composed_losses():
    rng = np.random.default_rng(3)
    gcfg = GanConfig(GeneratorConfig(8, 8, 3, 4, 4, 0.5), disc_channels=4)
    gen, disc = build_gan(gcfg, 0)
    x8 = rng.random((2, 3, 8, 8)).astype(np.float32)
    y8 = (rng.random((2, 8, 8, 8)) < 0.5).astype(np.float32)
    z8 = rng.standard_normal((2, 4)).astype(np.float32)

    reg = DensityRegressor(BackboneConfig(resolution=16, channels=(4, 8), strides=(2, 2), feature_width=8), rng)
    x16 = rng.random((3, 3, 16, 16)).astype(np.float32)

    layer = AdaptationLayer.from_weights([5.0, -3.0, 2.0, 1.0], 0.8, 4.0, 3686.4)
    p = np.eye(4)[[0, 1, 2, 3, 1]]
    v = np.array([300.0, 520.0, 610.0, 450.0, 800.0])
    d = np.array([0.5, 1.0, 1.5, 2.0, 1.0])
    gt = d * v * 0.9
    return {
        "generator": (lambda: generator_losses(gen, disc, x8, y8, z8, 7, 100.0)[0], gen.parameters(), 1e-5),
        "regressor": (lambda: regressor_loss(reg, x16, np.array([0, 3, 1]), np.array([0.5, 2.0, 1.0]))[0],
                      reg.parameters(), 1e-5),
        "adaptation": (lambda: energy_loss(layer, p, v, d, gt, gt.mean()), layer.parameters(), 1e-6),
    }


@pytest.mark.criterion(3)
def test_c3_gradient_suite(record_property):
    t0 = time.perf_counter()
    worst_prim, worst_name = 0.0, ""
    names = sorted(ad.PRIMITIVES)
    for seed in range(3):
        cases = primitive_cases(np.random.default_rng(seed))
        for name in names:
            f, xs = cases[name]
            err = ad.grad_check(f, xs, eps=1e-3)
            if err > worst_prim:
                worst_prim, worst_name = err, name
    composed = {k: ad.grad_check(f, ps, eps=eps, samples=12) for k, (f, ps, eps) in composed_losses().items()}
    secs = time.perf_counter() - t0
    ok = worst_prim <= 1e-3 and max(composed.values()) <= 5e-3 and secs < 120
    comp = ", ".join(f"{k} {v:.1e}" for k, v in composed.items())
    report(record_property, 3, ok,
           f"{len(names)} primitives worst {worst_prim:.1e} ({worst_name}); composed {comp}; {secs:.0f}s")


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4)
def test_c4_gan_overfit(record_property):
    samples = build_samples(8, 4, 0, 16)
    targets = reference_voxels(samples, 16)
    # overfitting wants the exact training images, so no augmentation here
    cfg = GanConfig(GeneratorConfig(16, 16), lr=1e-3, batch_size=8, augment=False)
    t0 = time.perf_counter()
    res = gan_train(samples, cfg, epochs=500, seed=0, targets=targets)
    secs = time.perf_counter() - t0
    l1 = [r.g_l1 for r in res.reports]
    ratio = float(np.mean(l1[-10:])) / l1[0]
    with ad.no_grad():
        probs = res.generator(np.stack([s.rgb for s in samples])).data
    iou = float(np.mean([voxel_iou(binarize(p), VoxelGrid(t > 0.5)) for p, t in zip(probs, targets)]))
    ok = len(l1) == 500 and ratio <= 0.2 and iou >= 0.7 and secs < 600
    report(record_property, 4, ok,
           f"L1 {l1[0]:.3f} -> {np.mean(l1[-10:]):.3f} ({100 * ratio:.1f}%), mean IoU {iou:.3f}, {secs:.0f}s")


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5)
def test_c5_regressor_learnability(record_property):
    samples = build_samples(250, 4, 123, 32)
    train, test = samples[:200], samples[200:]
    t0 = time.perf_counter()
    model = train_regressor(train, RegressorTrainConfig(), epochs=60, seed=0).model
    secs = time.perf_counter() - t0
    p, d = predict(model, np.stack([s.rgb for s in test]))
    labels = np.array([s.class_id for s in test])
    dens = np.array([s.density for s in test])
    acc = float(np.mean(p.argmax(1) == labels))
    per_class = [mape(d[labels == c], dens[labels == c]) for c in range(4)]
    ok = acc >= 0.95 and max(per_class) <= 10.0 and secs < 600
    report(record_property, 5, ok,
           f"accuracy {100 * acc:.1f}%, density MAPE per class " + "/".join(f"{m:.1f}" for m in per_class)
           + f"%, {secs:.0f}s")


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6)
def test_c6_metric_identities(record_property):
    hand = (mae([110, 90], [100, 100]), mape([110, 90], [100, 100]), maeom([110, 90], [100, 100]))
    ok = all(abs(x - 10.0) <= 1e-9 for x in hand)
    ok &= abs(mape([120.0, 60.0], [100.0, 50.0]) - 20.0) <= 1e-9
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        gt = rng.uniform(1, 1000, n)
        pred = np.abs(gt + rng.normal(0, 100, n))
        worst = max(worst, abs(maeom(pred, gt) - 100.0 * mae(pred, gt) / gt.mean()))
    ok &= worst <= 1e-9
    report(record_property, 6, ok, f"hand values {hand}, identity worst deviation {worst:.1e} over 1000 vectors")


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7)
def test_c7_reference_metric_pair(record_property):
    value = maeom_from(40.05, 253.48)
    report(record_property, 7, abs(value - 15.8) <= 0.05, f"MAEoM(40.05, 253.48) = {value:.3f}%")


# ------------------------------------------------------------------ 8, 9


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Synthesize the default dataset and train every stage for the three ablation seeds."""
    root = tmp_path_factory.mktemp("default_run")
    cfg = {"dataset_dir": str(root / "data"), "ckpt_dir": str(root / "ckpt"), "report_dir": str(root / "report")}
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    t0 = time.perf_counter()
    codes = [main(["--config", str(path), "synth"]),
             main(["--config", str(path), "train", "--all-seeds"]),
             main(["--config", str(path), "ablate"])]
    return root, str(path), codes, time.perf_counter() - t0


@pytest.mark.criterion(8)
def test_c8_ablation_ordering(default_run, record_property):
    root, _, codes, secs = default_run
    assert codes == [0, 0, 0], codes
    med = {r.config: r.report for r in read_metrics_csv(root / "report" / "ablation.csv")}
    full, m12, m2 = (med[c].mape_pct for c in ("full", "module1_2", "module2_only"))
    ok = full <= m2 and m12 >= full and secs < 3600
    report(record_property, 8, ok,
           f"median MAPE full {full:.2f}% / module1_2 {m12:.2f}% / module2_only {m2:.2f}%, "
           f"MAE {med['full'].mae_kcal:.1f}/{med['module1_2'].mae_kcal:.1f}/{med['module2_only'].mae_kcal:.1f} kCal, "
           f"{secs / 60:.1f} min")


def test_full_pipeline_within_25_percent_on_half_the_test_set(default_run):
    root, _, _, _ = default_run
    cfg = RunConfig.load(root / "cfg.json")
    data = open_dataset(cfg)
    models = load_models(cfg, 0)
    pred = predictors(models, data.cell_volume(cfg.z_res), cfg.tau)["full"](data.test)
    gt = np.array([s.energy for s in data.test])
    assert np.mean(np.abs(pred - gt) / gt <= 0.25) >= 0.5


def test_generator_footprint_matches_mask(default_run):
    root, _, _, _ = default_run
    cfg = RunConfig.load(root / "cfg.json")
    data = open_dataset(cfg)
    gen = load_models(cfg, 0).generator
    train = data.train[:32]
    with ad.no_grad():
        probs = gen(np.stack([s.rgb for s in train])).data
    ious = []
    for p, s in zip(probs, train):
        foot = binarize(p).footprint()
        ious.append(np.sum(foot & s.mask) / max(np.sum(foot | s.mask), 1))
    assert np.mean(ious) >= 0.6


@pytest.mark.criterion(9)
def test_c9_inference_without_depth(default_run, tmp_path, record_property):
    root, cfg, _, _ = default_run
    data = tmp_path / "rgb_only"
    shutil.copytree(root / "data", data)
    removed = 0
    for p in data.rglob("depth.pgm"):
        p.unlink()
        removed += 1
    images = sorted(str(p) for p in data.rglob("rgb.ppm"))[:62]
    t0 = time.perf_counter()
    code = main(["--config", cfg, "infer", *images, "--out", str(tmp_path / "out")])
    secs = time.perf_counter() - t0
    written = len(list((tmp_path / "out").glob("*.json")))
    ok = code == 0 and removed > 0 and not list(data.rglob("depth.pgm")) and written == len(images) and secs < 60
    report(record_property, 9, ok, f"deleted {removed} depth maps, exit {code}, {written} estimates in {secs:.1f}s")


# ------------------------------------------------------------------ 10

TINY = {
    "n_samples": 12, "image_size": 8, "z_res": 8, "gan_levels": 3, "gan_base_channels": 4,
    "gan_epochs": 2, "gan_batch": 4, "regressor_epochs": 3, "regressor_batch": 4,
    "adaptation_epochs": 3, "ablation_seeds": [0, 1],
}


def tiny_run(root):
    root.mkdir(parents=True)
    cfg = {**TINY, "dataset_dir": str(root / "data"), "ckpt_dir": str(root / "ckpt"), "report_dir": str(root / "report")}
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    codes = [main(["--config", str(path), c, *extra]) for c, extra in
             (("synth", []), ("train", ["--all-seeds"]), ("ablate", []))]
    files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted((root / "ckpt").rglob("*")) if p.is_file()}
    files["report/metrics.csv"] = (root / "report" / "metrics.csv").read_bytes()
    return codes, files


@pytest.mark.criterion(10)
def test_c10_determinism(tmp_path, record_property):
    codes_a, a = tiny_run(tmp_path / "a")
    codes_b, b = tiny_run(tmp_path / "b")
    differing = sorted(k for k in a if a.get(k) != b.get(k))
    ckpts = sum(k.endswith(".ckpt") for k in a)
    ok = codes_a == codes_b == [0, 0, 0] and set(a) == set(b) and not differing
    report(record_property, 10, ok,
           f"{ckpts} checkpoints, {len(a) - ckpts - 1} loss logs and metrics.csv compared; "
           f"{len(differing)} differ" + (f": {differing[:3]}" if differing else ""))
