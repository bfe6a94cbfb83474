"""Run configuration and staged orchestration of the three models.

Layout under the configured directories::

    dataset_dir/                 samples + manifest.csv + dataset.json
    ckpt_dir/seed-{s}/           gan.ckpt regressor.ckpt baseline.ckpt adaptation.ckpt
                                 and one *_loss.csv per stage
    report_dir/                  metrics.csv ablation.csv scatter.svg run_record.json
"""
from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import (
    AdaptationConfig,
    AdaptationLayer,
    estimate_batch,
    load_adaptation,
    save_adaptation,
    train_adaptation,
    train_joint,
    voxel_volumes,
)
from .gan import GanConfig, GeneratorConfig, gan_train, load_gan
from .metrics import MissingArtifact
from .regressor import (
    BackboneConfig,
    RegressorTrainConfig,
    load_regressor,
    predict,
    save_regressor,
    train_baseline,
    train_regressor,
)
from .synth import Scene, load_dataset, scene_from_meta

log = logging.getLogger(__name__)

STAGES = ("gan", "regressor", "baseline", "adaptation")
CKPT_NAMES = {s: f"{s}.ckpt" for s in STAGES}


@dataclass
class RunConfig:
    seed: int = 0
    n_samples: int = 400
    image_size: int = 32
    z_res: int = 32
    num_classes: int = 4
    split_ratio: float = 0.845
    gan_lambda: float = 100.0
    gan_lr: float = 1e-3
    gan_epochs: int = 20
    gan_batch: int = 8
    gan_levels: int = 4
    gan_base_channels: int = 16
    regressor_beta: float = 1.0
    regressor_lr: float = 1e-3
    regressor_epochs: int = 60
    regressor_batch: int = 32
    adaptation_epochs: int = 100
    adaptation_lr: float = 1e-3
    adaptation_bias: bool = True
    joint_finetune: bool = False
    joint_epochs: int = 5
    tau: float = 0.5
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    dataset_dir: str = "runs/data"
    ckpt_dir: str = "runs/ckpt"
    report_dir: str = "runs/report"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            if f.name.endswith("_epochs") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.n_samples < self.num_classes:
            raise ValueError(f"n_samples={self.n_samples} is smaller than the class count {self.num_classes}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.z_res != self.image_size:
            raise ValueError("z_res must equal image_size (cubic voxel grids)")
        paths = [Path(p).resolve() for p in (self.dataset_dir, self.ckpt_dir, self.report_dir)]
        if len(set(paths)) != 3:
            raise ValueError("dataset_dir, ckpt_dir and report_dir must be distinct")
        if not self.ablation_seeds:
            raise ValueError("ablation_seeds must not be empty")
        if self.seed < 0 or min(self.ablation_seeds) < 0:
            raise ValueError("seeds must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def ckpt(self, seed: int, stage: str) -> Path:
        return Path(self.ckpt_dir) / f"seed-{seed}" / CKPT_NAMES[stage]

    def loss_log(self, seed: int, stage: str) -> Path:
        return Path(self.ckpt_dir) / f"seed-{seed}" / f"{stage}_loss.csv"

    def gan_config(self) -> GanConfig:
        g = GeneratorConfig(self.image_size, self.z_res, self.gan_levels, self.gan_base_channels)
        return GanConfig(generator=g, lam=self.gan_lambda, lr=self.gan_lr, batch_size=self.gan_batch)

    def regressor_config(self) -> RegressorTrainConfig:
        bb = BackboneConfig(resolution=self.image_size, num_classes=self.num_classes)
        return RegressorTrainConfig(bb, self.regressor_beta, self.regressor_lr, self.regressor_batch)


def version_string() -> str:
    """``git describe`` of the working tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunRecord:
    config: dict
    version: str
    stage_seconds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def write(self, report_dir) -> Path:
        path = Path(report_dir) / "run_record.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class Dataset:
    train: list
    test: list
    scene: Scene
    k: int

    def cell_volume(self, z_res: int) -> float:
        return self.scene.cell_volume(self.train[0].rgb.shape[-1], z_res)


def open_dataset(cfg: RunConfig) -> Dataset:
    root = Path(cfg.dataset_dir)
    if not (root / "manifest.csv").exists():
        raise MissingArtifact(f"dataset manifest not found: {root / 'manifest.csv'}")
    manifest, samples = load_dataset(root)
    by_split = {"train": [], "test": []}
    for s, split in zip(samples, manifest.splits):
        by_split[split].append(s)
    size = samples[0].rgb.shape[-1]
    if size != cfg.image_size:
        raise ValueError(f"dataset images are {size}px but the config expects {cfg.image_size}px")
    return Dataset(by_split["train"], by_split["test"], scene_from_meta(manifest.meta), manifest.meta["k"])


def require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing checkpoint: {path}")
    return path


def train_stage(cfg: RunConfig, stage: str, seed: int, data: Dataset) -> float:
    """Run one training stage for one seed; returns wall time in seconds."""
    t0 = time.perf_counter()
    ckpt = cfg.ckpt(seed, stage)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    if stage == "gan":
        gan_train(data.train, cfg.gan_config(), cfg.gan_epochs, seed, ckpt, cfg.loss_log(seed, stage))
    elif stage == "regressor":
        train_regressor(data.train, cfg.regressor_config(), cfg.regressor_epochs, seed, ckpt, cfg.loss_log(seed, stage))
    elif stage == "baseline":
        train_baseline(data.train, cfg.regressor_config(), cfg.regressor_epochs, seed, ckpt, cfg.loss_log(seed, stage))
    elif stage == "adaptation":
        _train_adaptation_stage(cfg, seed, data)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return time.perf_counter() - t0


def _train_adaptation_stage(cfg: RunConfig, seed: int, data: Dataset) -> None:
    gen, _, _ = load_gan(require(cfg.ckpt(seed, "gan")))
    reg, meta = load_regressor(require(cfg.ckpt(seed, "regressor")))
    images = np.stack([s.rgb for s in data.train])
    gt = np.array([s.energy for s in data.train])
    cv = data.cell_volume(cfg.z_res)
    v = voxel_volumes(gen, images, cv, cfg.tau)
    v_scale = cv * cfg.z_res * cfg.image_size**2
    acfg = AdaptationConfig(lr=cfg.adaptation_lr, bias=cfg.adaptation_bias)
    p, d = predict(reg, images)
    layer, _ = train_adaptation(p, v, d, gt, data.k, v_scale, acfg, cfg.adaptation_epochs, seed,
                                cfg.loss_log(seed, "adaptation"))
    extra = {"seed": seed, "epochs": cfg.adaptation_epochs}
    if cfg.joint_finetune and cfg.joint_epochs > 0:
        labels = np.array([s.class_id for s in data.train])
        dens = np.array([s.density for s in data.train], dtype=np.float32)
        train_joint(reg, layer, images, labels, dens, v, gt, cfg.joint_epochs, seed,
                    beta=cfg.regressor_beta, batch_size=cfg.regressor_batch)
        save_regressor(cfg.ckpt(seed, "regressor"), reg, {**meta, "joint_epochs": cfg.joint_epochs})
        extra["joint_epochs"] = cfg.joint_epochs
    save_adaptation(cfg.ckpt(seed, "adaptation"), layer, extra)


def train_all(cfg: RunConfig, seed: int, data: Dataset, stages=STAGES) -> dict[str, float]:
    return {stage: train_stage(cfg, stage, seed, data) for stage in stages}


@dataclass
class LoadedModels:
    generator: object
    regressor: object
    adaptation: AdaptationLayer
    baseline: object | None = None


def load_models(cfg: RunConfig, seed: int, baseline: bool = False) -> LoadedModels:
    gen, _, _ = load_gan(require(cfg.ckpt(seed, "gan")))
    reg, _ = load_regressor(require(cfg.ckpt(seed, "regressor")))
    layer = load_adaptation(require(cfg.ckpt(seed, "adaptation")))
    base = load_regressor(require(cfg.ckpt(seed, "baseline")), kind="baseline")[0] if baseline else None
    return LoadedModels(gen, reg, layer, base)


def predictors(models: LoadedModels, cell_volume: float, tau: float = 0.5) -> dict:
    """Energy predictors for the three ablation configurations.

    module1_2 is the full pipeline with the refinement replaced by identity.
    """
    cache: dict = {}

    def estimates(samples):
        key = tuple(s.sample_id for s in samples)
        if key not in cache:
            images = np.stack([s.rgb for s in samples])
            cache[key] = estimate_batch(images, list(key), models.generator, models.regressor,
                                        models.adaptation, cell_volume, tau)
        return cache[key]

    def full(samples):
        return np.array([e.w_kcal for e in estimates(samples)])

    def module1_2(samples):
        return np.array([e.d * e.v for e in estimates(samples)])

    out = {"full": full, "module1_2": module1_2}
    if models.baseline is not None:
        out["module2_only"] = lambda samples: predict(models.baseline, np.stack([s.rgb for s in samples]))[1]
    return out


def oracle_predictors() -> dict:
    def oracle(samples):
        return np.array([s.energy for s in samples])

    return {"full": oracle, "module1_2": oracle, "module2_only": oracle}
