"""Synthetic top-view dishes with closed-form volume and energy.

Each class locks a (shape primitive, colour, energy density) triple.  A dish
is a height field over a grey plate seen by an orthographic top-view camera;
lighting comes from a point source between camera and plate, so both surface
slope and height show up in pixel brightness.

Lengths are millimetres, volumes millilitres, energies kCal.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .depth import MISSING, RawDepthMap, read_depth_pgm, read_mask_pgm, write_depth_pgm, write_mask_pgm
from .netpbm import read_pnm, write_ppm

SHAPES = ("spherical_cap", "cone", "cylinder", "paraboloid")


@dataclass(frozen=True)
class Scene:
    """Camera, light and plate geometry shared by every dish of a dataset."""

    near: float = 500.0
    far: float = 600.0  # camera-to-plate distance
    fov: float = 192.0  # side of the square field of view at the plate
    plate_radius: float = 90.0
    light: tuple[float, float, float] = (40.0, -25.0, 400.0)  # (x, y, height above plate)
    ambient: float = 0.15

    def cell_volume(self, size: int, z_res: int | None = None) -> float:
        """Physical volume (ml) of one voxel for a ``size`` image and ``z_res`` slices."""
        z_res = z_res or size
        px = self.fov / size
        return px * px * (self.far - self.near) / z_res / 1000.0


@dataclass(frozen=True)
class FoodClass:
    name: str
    shape: str
    color: tuple[float, float, float]
    density: float  # kCal / ml
    radius_range: tuple[float, float]
    height_range: tuple[float, float]  # fraction of the radius for spherical caps


DEFAULT_CLASSES = (
    FoodClass("dome", "spherical_cap", (0.50, 0.30, 0.10), 0.5, (60.0, 85.0), (0.85, 1.0)),
    FoodClass("spire", "cone", (0.15, 0.42, 0.12), 1.0, (35.0, 75.0), (85.0, 97.0)),
    FoodClass("cake", "cylinder", (0.45, 0.10, 0.16), 1.5, (35.0, 80.0), (45.0, 95.0)),
    FoodClass("mound", "paraboloid", (0.16, 0.24, 0.52), 2.0, (40.0, 80.0), (60.0, 95.0)),
)


def class_table(k: int = 4) -> tuple[FoodClass, ...]:
    """Default table for four classes; other counts cycle the shapes with new hues."""
    if k < 2:
        raise ValueError(f"need at least two classes, got {k}")
    if k == len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES
    import colorsys

    out = []
    for i, density in enumerate(np.linspace(0.5, 2.0, k)):
        base = DEFAULT_CLASSES[i % 4]
        rgb = colorsys.hsv_to_rgb(i / k, 0.75, 0.5)
        out.append(
            FoodClass(f"{base.name}{i}", base.shape, tuple(round(c, 4) for c in rgb), float(density),
                      base.radius_range, base.height_range)
        )
    return tuple(out)


@dataclass(frozen=True)
class DishSpec:
    shape: str
    radius: float
    height: float
    class_id: int
    density: float
    plate_radius: float = 90.0
    center: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    color: tuple[float, float, float] = (0.4, 0.4, 0.1)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown primitive {self.shape!r}")
        if not self.height > 0:
            raise ValueError("dish height must be positive")
        if not 0 < self.radius < self.plate_radius:
            raise ValueError(f"need 0 < radius < plate radius, got {self.radius}")
        if self.shape == "spherical_cap" and self.height > self.radius:
            raise ValueError("spherical cap taller than its base radius is not a cap")


@dataclass
class DishSample:
    sample_id: str
    rgb: np.ndarray  # (3, H, W) float32, multiples of 1/255
    raw_depth: RawDepthMap
    mask: np.ndarray  # (H, W) bool
    spec: DishSpec
    true_volume: float  # ml
    energy: float  # kCal

    @property
    def class_id(self) -> int:
        return self.spec.class_id

    @property
    def density(self) -> float:
        return self.spec.density


def analytic_volume(spec: DishSpec) -> float:
    """Closed-form volume in ml."""
    r, h = spec.radius, spec.height
    if spec.shape == "cylinder":
        v = math.pi * r * r * h
    elif spec.shape == "cone":
        v = math.pi * r * r * h / 3.0
    elif spec.shape == "paraboloid":
        v = math.pi * r * r * h / 2.0
    elif spec.shape == "spherical_cap":
        big_r = sphere_radius(r, h)
        v = math.pi * h * h * (3.0 * big_r - h) / 3.0
    else:
        raise ValueError(f"unknown primitive {spec.shape!r}")
    return v / 1000.0


def sphere_radius(base_radius: float, height: float) -> float:
    return (base_radius**2 + height**2) / (2.0 * height)


def height_field(spec: DishSpec, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Height and its x/y slopes at plate coordinates; zero off the dish."""
    dx, dy = x - spec.center[0], y - spec.center[1]
    rho = np.hypot(dx, dy)
    inside = rho < spec.radius
    r, h = spec.radius, spec.height
    if spec.shape == "cylinder":
        z = np.full_like(rho, h)
        dz = np.zeros_like(rho)
    elif spec.shape == "cone":
        z = h * (1.0 - rho / r)
        dz = np.full_like(rho, -h / r)
    elif spec.shape == "paraboloid":
        z = h * (1.0 - (rho / r) ** 2)
        dz = -2.0 * h * rho / (r * r)
    else:
        big_r = sphere_radius(r, h)
        root = np.sqrt(np.maximum(big_r * big_r - rho * rho, 1e-12))
        z = root - (big_r - h)
        dz = -rho / root
    safe = np.where(rho > 0, rho, 1.0)
    zx = np.where(inside, dz * dx / safe, 0.0)
    zy = np.where(inside, dz * dy / safe, 0.0)
    z = np.where(inside, np.maximum(z, 0.0), 0.0)
    return z, zx, zy


def pixel_centres(size: int, fov: float) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) * (fov / size) - fov / 2.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    return x, y


def generate_dish(
    spec: DishSpec,
    size: int = 32,
    scene: Scene = Scene(),
    noise_sigma: float = 0.02,
    salt_rate: float = 0.02,
    specular_threshold: float | None = 0.9999,
    sample_id: str = "dish",
) -> DishSample:
    """Render one dish: RGB, raw depth with holes, and the food mask."""
    half = scene.fov / 2.0
    if math.hypot(*spec.center) + spec.radius > half:
        raise ValueError(f"dish (radius {spec.radius}, centre {spec.center}) exceeds the image bounds")
    if not scene.near < scene.far:
        raise ValueError("scene needs near < far")
    x, y = pixel_centres(size, scene.fov)
    z, zx, zy = height_field(spec, x, y)
    mask = z > 0

    normal = np.stack([-zx, -zy, np.ones_like(z)])
    normal /= np.linalg.norm(normal, axis=0)
    lx, ly, lz = scene.light
    to_light = np.stack([lx - x, ly - y, lz - z])
    dist = np.linalg.norm(to_light, axis=0)
    to_light /= dist
    lambert = np.clip((normal * to_light).sum(axis=0), 0.0, None)
    shading = scene.ambient + (1.0 - scene.ambient) * lambert * (lz / dist) ** 2

    on_plate = np.hypot(x, y) < scene.plate_radius
    base = np.where(on_plate, 0.45, 0.2)[None] * np.ones((3, 1, 1))
    color = np.asarray(spec.color, dtype=np.float64)
    base = np.where(mask[None], color[:, None, None], base)

    rng = np.random.default_rng(spec.seed)
    rgb = base * shading[None]
    if noise_sigma > 0:
        rgb = rgb + rng.normal(0.0, noise_sigma, size=rgb.shape)
    rgb = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5) / 255.0

    depth = RawDepthMap.from_physical(scene.far - z, scene.near, scene.far)
    holes = np.zeros_like(mask)
    if specular_threshold is not None:
        halfway = to_light + np.array([0.0, 0.0, 1.0])[:, None, None]
        halfway /= np.linalg.norm(halfway, axis=0)
        holes |= (normal * halfway).sum(axis=0) >= specular_threshold
    if salt_rate > 0:
        holes |= rng.random(mask.shape) < salt_rate
    values = np.where(holes, MISSING, depth.values).astype(np.uint16)
    raw = RawDepthMap(values, scene.near, scene.far)

    vol = analytic_volume(spec)
    return DishSample(sample_id, rgb.astype(np.float32), raw, mask, spec, vol, spec.density * vol)


def sample_spec(class_id: int, classes, seed: int, scene: Scene = Scene()) -> DishSpec:
    """Draw a dish of the given class from that class's size ranges."""
    fc = classes[class_id]
    rng = np.random.default_rng([seed, 1])
    r = float(rng.uniform(*fc.radius_range))
    h = float(rng.uniform(*fc.height_range))
    if fc.shape == "spherical_cap":
        h *= r
    # keep the dish on the plate with a little slack
    slack = max(scene.plate_radius - r - 2.0, 0.0)
    ang = rng.uniform(0.0, 2.0 * math.pi)
    off = slack * math.sqrt(rng.uniform()) * 0.5
    centre = (round(off * math.cos(ang), 6), round(off * math.sin(ang), 6))
    return DishSpec(fc.shape, r, h, class_id, fc.density, scene.plate_radius, centre, seed, fc.color)


def sample_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


@dataclass
class SplitManifest:
    sample_ids: list[str]
    splits: list[str]
    class_ids: list[int]
    energies: list[float]
    seed: int
    ratio: float
    meta: dict = field(default_factory=dict)

    def ids(self, split: str) -> list[str]:
        return [s for s, t in zip(self.sample_ids, self.splits) if t == split]

    def counts(self) -> dict[str, int]:
        return {t: self.splits.count(t) for t in ("train", "test")}


def split_counts(n: int, ratio: float) -> tuple[int, int]:
    n_train = int(math.floor(n * ratio + 1e-9))
    return n_train, n - n_train


def build_samples(
    n: int,
    k: int = 4,
    seed: int = 0,
    size: int = 32,
    scene: Scene = Scene(),
    **render,
) -> list[DishSample]:
    """In-memory dataset with balanced classes (sample ``i`` has class ``i % k``)."""
    if n < k:
        raise ValueError(f"need at least one sample per class: n={n} < k={k}")
    classes = class_table(k)
    out = []
    for i in range(n):
        s = sample_seed(seed, i)
        spec = sample_spec(i % k, classes, s, scene)
        out.append(generate_dish(spec, size, scene, sample_id=f"dish_{i:05d}", **render))
    return out


def split_samples(samples: list[DishSample], seed: int, ratio: float) -> SplitManifest:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    n_train, _ = split_counts(len(samples), ratio)
    order = np.random.default_rng(seed).permutation(len(samples))
    train = set(order[:n_train].tolist())
    return SplitManifest(
        [s.sample_id for s in samples],
        ["train" if i in train else "test" for i in range(len(samples))],
        [s.class_id for s in samples],
        [s.energy for s in samples],
        seed,
        ratio,
    )


def make_dataset(
    out_dir,
    n: int = 400,
    k: int = 4,
    seed: int = 0,
    ratio: float = 0.845,
    size: int = 32,
    scene: Scene = Scene(),
) -> SplitManifest:
    """Generate ``n`` dishes and write them with a train/test manifest."""
    samples = build_samples(n, k, seed, size, scene)
    manifest = split_samples(samples, seed, ratio)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_sample(out / s.sample_id, s)
    classes = class_table(k)
    manifest.meta = {
        "n": n,
        "k": k,
        "size": size,
        "scene": asdict(scene),
        "classes": [{"id": i, **asdict(c)} for i, c in enumerate(classes)],
    }
    write_manifest(out, manifest)
    return manifest


def write_sample(directory, sample: DishSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rgb8 = np.floor(np.moveaxis(sample.rgb, 0, -1) * 255.0 + 0.5).astype(np.uint8)
    write_ppm(d / "rgb.ppm", rgb8)
    write_depth_pgm(d / "depth.pgm", sample.raw_depth)
    write_mask_pgm(d / "mask.pgm", sample.mask)
    meta = {
        "class_id": sample.class_id,
        "density": sample.density,
        "true_volume": sample.true_volume,
        "energy_kcal": sample.energy,
        "spec": asdict(sample.spec),
        "seed": sample.spec.seed,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))


def read_rgb(path) -> np.ndarray:
    """(3, H, W) float32 image in [0, 1] from a binary PPM."""
    return (np.moveaxis(read_pnm(path), -1, 0).astype(np.float32) / 255.0).astype(np.float32)


def load_sample(directory, scene: Scene = Scene()) -> DishSample:
    """Read a sample directory (synthetic or converted real dish)."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    spec_d = dict(meta["spec"])
    spec_d["center"] = tuple(spec_d["center"])
    spec_d["color"] = tuple(spec_d["color"])
    spec = DishSpec(**spec_d)
    return DishSample(
        d.name,
        read_rgb(d / "rgb.ppm"),
        read_depth_pgm(d / "depth.pgm", scene.near, scene.far),
        read_mask_pgm(d / "mask.pgm"),
        spec,
        float(meta["true_volume"]),
        float(meta["energy_kcal"]),
    )


def write_manifest(out_dir, manifest: SplitManifest) -> None:
    out = Path(out_dir)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "split", "class_id", "energy_kcal"])
        for row in zip(manifest.sample_ids, manifest.splits, manifest.class_ids, manifest.energies):
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    info = {"seed": manifest.seed, "ratio": manifest.ratio, **manifest.meta}
    (out / "dataset.json").write_text(json.dumps(info, indent=2))


def read_manifest(out_dir) -> SplitManifest:
    out = Path(out_dir)
    info = json.loads((out / "dataset.json").read_text())
    ids, splits, classes, energies = [], [], [], []
    with open(out / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["sample_id"])
            splits.append(row["split"])
            classes.append(int(row["class_id"]))
            energies.append(float(row["energy_kcal"]))
    seed, ratio = info.pop("seed"), info.pop("ratio")
    return SplitManifest(ids, splits, classes, energies, seed, ratio, info)


def scene_from_meta(meta: dict) -> Scene:
    s = dict(meta.get("scene", {}))
    if "light" in s:
        s["light"] = tuple(s["light"])
    return Scene(**s)


def load_dataset(out_dir) -> tuple[SplitManifest, list[DishSample]]:
    manifest = read_manifest(out_dir)
    scene = scene_from_meta(manifest.meta)
    samples = [load_sample(Path(out_dir) / sid, scene) for sid in manifest.sample_ids]
    return manifest, samples
