"""Conditional GAN that lifts a top-view RGB image to a voxel occupancy grid.

The generator is a U-net whose encoder is 2-D and whose decoder is 3-D:
each encoder feature map (C, h, w) is reinterpreted as (C / h, h, h, w) so it
can be concatenated onto the decoder volume of matching size.  The
discriminator is a 3-D PatchGAN that sees the voxel grid with the RGB image
tiled along the depth axis.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .depth import postprocess
from .nn import Conv2d, Conv3d, ConvTranspose3d, Module, dihedral, frozen
from .optim import Adam
from .voxel import depth_to_voxel

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-6


class NumericError(RuntimeError):
    """A loss became NaN or infinite during training."""


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 32
    z_res: int = 32
    levels: int = 4
    base_channels: int = 16
    noise_dim: int = 16
    dropout: float = 0.5

    def __post_init__(self):
        res = self.resolution
        if res < 2 or res & (res - 1):
            raise ValueError(f"resolution must be a power of two, got {res}")
        if res < 2**self.levels:
            raise ValueError(f"resolution {res} too small for {self.levels} levels")
        if self.z_res != res:
            raise ValueError("the decoder produces cubic grids: z_res must equal resolution")
        for i, (c, s) in enumerate(zip(self.encoder_channels, self.encoder_sizes)):
            if c % s:
                raise ValueError(f"encoder level {i + 1}: {c} channels not divisible into {s} depth slices")
        if self.noise_dim % self.encoder_sizes[-1]:
            raise ValueError("noise_dim must be divisible by the bottleneck size")

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** min(i, 3) for i in range(self.levels)]

    @property
    def encoder_sizes(self) -> list[int]:
        return [self.resolution // 2 ** (i + 1) for i in range(self.levels)]


def skip_reshape_2d_to_3d(feat, depth_slices: int):
    """Reinterpret channels as (channel, depth): (N, C, h, w) -> (N, C/D, D, h, w)."""
    feat = ad.as_tensor(feat)
    batched = feat.ndim == 4
    n, c, h, w = feat.shape if batched else (1,) + feat.shape
    if c % depth_slices:
        raise ValueError(f"{c} channels cannot be split into {depth_slices} depth slices")
    shape = (c // depth_slices, depth_slices, h, w)
    return ad.reshape(feat, (n,) + shape if batched else shape)


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans, sizes = cfg.encoder_channels, cfg.encoder_sizes
        self.enc = []
        cin = 3
        for c in chans:
            self.enc.append(Conv2d(cin, c, 4, rng, stride=2, pad=1, bias=False, init="he", alpha=0.2))
            cin = c
        # decoder level i upsamples from sizes[i] to sizes[i - 1] (or to the full grid)
        self.dec = []
        cin = chans[-1] // sizes[-1] + cfg.noise_dim // sizes[-1]
        for i in range(cfg.levels - 1, -1, -1):
            last = i == 0
            cout = 1 if last else chans[i - 1] // 2 if i > 1 else max(chans[0], 4)
            self.dec.append(ConvTranspose3d(cin, cout, 4, rng, stride=2, pad=1, bias=last,
                                            init="xavier" if last else "he"))
            if not last:
                cin = cout + chans[i - 1] // sizes[i - 1]

    def __call__(self, images, noise=None, dropout_seed=None, capture: dict | None = None):
        """(N, 3, H, W) images -> (N, Z, H, W) occupancy probabilities."""
        cfg = self.cfg
        images = ad.as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != (3, cfg.resolution, cfg.resolution):
            raise ValueError(f"generator expects (N, 3, {cfg.resolution}, {cfg.resolution}), got {images.shape}")
        n = images.shape[0]
        feats = []
        h = images
        for i, conv in enumerate(self.enc):
            h = conv(h)
            if i > 0 and h.shape[-1] > 1:
                h = ad.instance_norm(h)
            h = ad.leaky_relu(h, 0.2)
            feats.append(h)
            if capture is not None:
                capture[f"enc{i}"] = h.data.copy()
        s = cfg.encoder_sizes[-1]
        x = skip_reshape_2d_to_3d(feats[-1], s)
        if cfg.noise_dim:
            z = np.zeros((n, cfg.noise_dim), dtype=ad.DTYPE) if noise is None else np.asarray(noise)
            if z.shape != (n, cfg.noise_dim):
                raise ValueError(f"noise must have shape {(n, cfg.noise_dim)}, got {z.shape}")
            z = ad.add(ad.reshape(ad.as_tensor(z), (n, cfg.noise_dim, 1, 1)), np.zeros((1, 1, s, s), ad.DTYPE))
            x = ad.concat([x, skip_reshape_2d_to_3d(z, s)], axis=1)
        if capture is not None:
            capture["bottleneck"] = x.data.copy()
        rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
        for j, up in enumerate(self.dec):
            x = up(x)
            level = cfg.levels - 1 - j
            if level == 0:
                break
            x = ad.relu(ad.instance_norm(x))
            if self.training and cfg.dropout > 0 and j < 3:
                seed = None if rng is None else int(rng.integers(2**63))
                x = ad.dropout(x, cfg.dropout, seed)
            skip = skip_reshape_2d_to_3d(feats[level - 1], cfg.encoder_sizes[level - 1])
            x = ad.concat([x, skip], axis=1)
        probs = ad.add(ad.mul(ad.sigmoid(x), 1.0 - 2.0 * PROB_FLOOR), PROB_FLOOR)
        return ad.reshape(probs, (n, cfg.z_res, cfg.resolution, cfg.resolution))


def generator_forward(gen: Generator, image, noise=None) -> np.ndarray:
    """Single-image inference: (3, H, W) -> (Z, H, W) probabilities."""
    image = np.asarray(getattr(image, "data", image))
    z = None if noise is None else np.asarray(noise)[None]
    with ad.no_grad():
        return gen(image[None], z).data[0]


class Discriminator(Module):
    def __init__(self, resolution: int, rng: np.random.Generator, base_channels: int = 8):
        self.resolution = resolution
        n_down = max(1, min(3, int(math.log2(resolution)) - 1))
        self.convs = []
        cin, cout = 4, base_channels
        for _ in range(n_down):
            self.convs.append(Conv3d(cin, cout, 4, rng, stride=2, pad=1, bias=False, init="he", alpha=0.2))
            cin, cout = cout, cout * 2
        self.head = Conv3d(cin, 1, 3, rng, stride=1, pad=1, bias=True, init="xavier")

    def __call__(self, images, voxels):
        """Patch logits (N, 1, d, d, d) for (N, 3, H, W) images and (N, Z, H, W) grids."""
        images, voxels = ad.as_tensor(images), ad.as_tensor(voxels)
        n, z = voxels.shape[0], voxels.shape[1]
        if images.shape[0] != n or images.shape[2:] != voxels.shape[2:]:
            raise ValueError(f"image {images.shape} does not match voxel grid {voxels.shape}")
        tiled = ad.add(ad.reshape(images, (n, 3, 1) + images.shape[2:]), np.zeros((1, 1, z, 1, 1), ad.DTYPE))
        h = ad.concat([ad.reshape(voxels, (n, 1) + voxels.shape[1:]), tiled], axis=1)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i > 0 and h.shape[-1] > 1:
                h = ad.instance_norm(h)
            h = ad.leaky_relu(h, 0.2)
        return self.head(h)


@dataclass(frozen=True)
class GanConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc_channels: int = 8
    lam: float = 100.0
    lr: float = 1e-3
    beta1: float = 0.5
    batch_size: int = 8
    use_noise: bool = True
    use_dropout: bool = True
    augment: bool = True


@dataclass
class GanLossReport:
    iteration: int
    d_loss: float
    g_adv: float
    g_l1: float
    g_total: float


def reference_voxels(samples, z_res: int) -> np.ndarray:
    """Training targets: each sample's post-processed depth voxelized at ``z_res``."""
    grids = []
    for s in samples:
        dbar = postprocess(s.raw_depth, s.mask)
        grids.append(depth_to_voxel(dbar, z_res).occupancy)
    return np.stack(grids).astype(ad.DTYPE)


def generator_losses(gen, disc, images, targets, noise, dropout_seed, lam):
    """Generator objective on the current tape: (total, adversarial, L1, probs)."""
    fake = gen(images, noise, dropout_seed)
    with frozen(disc):
        logits = disc(images, fake)
    adv = ad.bce_with_logits(logits, np.ones(logits.shape, ad.DTYPE))
    l1 = ad.l1_loss(fake, targets)
    return ad.add(adv, ad.mul(l1, lam)), adv, l1, fake


def discriminator_loss(disc, images, real, fake):
    d_real = disc(images, real)
    d_fake = disc(images, fake)
    return ad.mul(
        ad.add(
            ad.bce_with_logits(d_real, np.ones(d_real.shape, ad.DTYPE)),
            ad.bce_with_logits(d_fake, np.zeros(d_fake.shape, ad.DTYPE)),
        ),
        0.5,
    )


def build_gan(cfg: GanConfig, seed: int) -> tuple[Generator, Discriminator]:
    gcfg = cfg.generator
    if not cfg.use_noise or not cfg.use_dropout:
        gcfg = GeneratorConfig(
            gcfg.resolution, gcfg.z_res, gcfg.levels, gcfg.base_channels,
            gcfg.noise_dim if cfg.use_noise else 0,
            gcfg.dropout if cfg.use_dropout else 0.0,
        )
    rng = np.random.default_rng([seed, 0])
    return Generator(gcfg, rng), Discriminator(gcfg.resolution, rng, cfg.disc_channels)


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    reports: list[GanLossReport]


def gan_train(
    samples,
    cfg: GanConfig = GanConfig(),
    epochs: int = 50,
    seed: int = 0,
    ckpt_path=None,
    log_path=None,
    targets: np.ndarray | None = None,
    on_epoch: Callable[[int, GanResult], None] | None = None,
) -> GanResult:
    """Alternating discriminator / generator Adam steps over ``samples``."""
    if not samples:
        raise ValueError("cannot train the GAN on an empty dataset")
    gen, disc = build_gan(cfg, seed)
    res = gen.cfg.resolution
    images = np.stack([s.rgb for s in samples]).astype(ad.DTYPE)
    if images.shape[1:] != (3, res, res):
        raise ValueError(f"samples are {images.shape[1:]} but the generator expects {(3, res, res)}")
    if targets is None:
        targets = reference_voxels(samples, gen.cfg.z_res)
    opt_g = Adam(gen.parameters(), lr=cfg.lr, beta1=cfg.beta1)
    opt_d = Adam(disc.parameters(), lr=cfg.lr, beta1=cfg.beta1)
    rng = np.random.default_rng([seed, 1])
    result = GanResult(gen, disc, [])
    it = 0
    writer = _LossWriter(log_path)
    gen.train()
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            x, y = images[idx], targets[idx]
            if cfg.augment:
                code = int(rng.integers(8))
                x, y = dihedral(x, code), dihedral(y, code)
            noise = rng.standard_normal((len(idx), gen.cfg.noise_dim)).astype(ad.DTYPE)
            drop_seed = int(rng.integers(2**63))

            tape_g = Tape()
            with tape_g:
                fake = gen(x, noise, drop_seed)
            with Tape() as tape_d:
                d_loss = discriminator_loss(disc, x, y, fake.detach())
                grads_d = ad.backward(d_loss, tape_d)
            opt_d.step(grads_d)

            with tape_g:
                with frozen(disc):
                    logits = disc(x, fake)
                adv = ad.bce_with_logits(logits, np.ones(logits.shape, ad.DTYPE))
                l1 = ad.l1_loss(fake, y)
                total = ad.add(adv, ad.mul(l1, cfg.lam))
                grads_g = ad.backward(total, tape_g)
            opt_g.step(grads_g)

            rep = GanLossReport(it, d_loss.item(), adv.item(), l1.item(), total.item())
            if not all(math.isfinite(v) for v in (rep.d_loss, rep.g_total)):
                raise NumericError(f"non-finite GAN loss at iteration {it}")
            result.reports.append(rep)
            writer.write(rep)
            it += 1
        log.info("gan epoch %d: l1 %.4f d %.4f", epoch, rep.g_l1, rep.d_loss)
        if ckpt_path is not None:
            save_gan(ckpt_path, gen, disc, cfg, seed, epoch + 1)
        if on_epoch is not None:
            on_epoch(epoch, result)
    writer.close()
    if ckpt_path is not None and epochs == 0:
        save_gan(ckpt_path, gen, disc, cfg, seed, 0)
    gen.eval()
    return result


class _LossWriter:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.w = csv.writer(self.fh, lineterminator="\n")
            self.w.writerow(["iteration", "d_loss", "g_adv", "g_l1", "g_total"])

    def write(self, rep: GanLossReport):
        if self.fh:
            self.w.writerow([rep.iteration, repr(rep.d_loss), repr(rep.g_adv), repr(rep.g_l1), repr(rep.g_total)])

    def close(self):
        if self.fh:
            self.fh.close()


def save_gan(path, gen: Generator, disc: Discriminator, cfg: GanConfig, seed: int, epoch: int) -> None:
    tensors = {f"generator.{k}": v for k, v in gen.state_dict().items()}
    tensors.update({f"discriminator.{k}": v for k, v in disc.state_dict().items()})
    meta = {"kind": "gan", "config": _gan_cfg_dict(cfg, gen.cfg), "seed": seed, "epoch": epoch}
    save_checkpoint(path, tensors, meta)


def _gan_cfg_dict(cfg: GanConfig, gcfg: GeneratorConfig) -> dict:
    d = asdict(cfg)
    d["generator"] = asdict(gcfg)
    return d


def load_gan(path) -> tuple[Generator, Discriminator, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "gan":
        raise ValueError(f"{path} is not a GAN checkpoint")
    c = dict(meta["config"])
    gcfg = GeneratorConfig(**c.pop("generator"))
    rng = np.random.default_rng(0)
    gen = Generator(gcfg, rng)
    disc = Discriminator(gcfg.resolution, rng, c["disc_channels"])
    gen.load_state_dict({k[len("generator."):]: v for k, v in tensors.items() if k.startswith("generator.")})
    disc.load_state_dict({k[len("discriminator."):]: v for k, v in tensors.items() if k.startswith("discriminator.")})
    gen.eval()
    return gen, disc, meta
