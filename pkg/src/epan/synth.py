"""Synthetic misalignment benchmark with known ground-truth warps.

Each identity gets a deterministic procedural "person" texture (id-seeded
stripe/column/checker signature, values capped at 0.85 so the bright camera
never clips). Each sample applies one of the two detector failure modes
through the affine sampler and stores both the corruption parameters and
their exact inverse:

- ``background_excess``: an expanding map (scale 1/s, s in [0.5, 0.95])
  shrinks the figure into the frame; the revealed border is filled with
  per-sample clutter. The inverse is the contractive crop (scale s).
- ``partial_loss``: a translation (0.1..0.4 normalized, random axis and sign)
  pushes part of the figure out of frame; the lost band is zero-filled. The
  inverse is the opposite translation; content that left the frame is
  unrecoverable by construction.

Two camera ids model illumination: cam 1 scales brightness by 0.85 and cam 2
by 1.15. Samples are split per id into train / query (cam 1) / gallery
(cam 2) so every query has cross-camera matches under the retrieval protocol.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .affine import AffineParams, warp
from .autodiff import Tensor
from .data import format_market_name, write_image
from .errors import ConfigError

CORRUPTIONS = ("background_excess", "partial_loss", "none", "mixed")
CAM_BRIGHTNESS = {1: 0.85, 2: 1.15}


@dataclass
class SynthSpec:
    num_ids: int = 10
    per_id: int = 40
    canvas: tuple[int, int] = (64, 64)
    corruption: str = "mixed"
    scale_range: tuple[float, float] = (0.5, 0.95)
    shift_range: tuple[float, float] = (0.1, 0.4)
    seed: int = 0
    train_frac: float = 0.6
    query_frac: float = 0.2

    def __post_init__(self):
        if self.num_ids < 2 or self.per_id < 2:
            raise ConfigError("synthetic benchmark needs >= 2 ids and >= 2 samples per id")
        if self.corruption not in CORRUPTIONS:
            raise ConfigError(f"corruption must be one of {CORRUPTIONS}")
        if not 0.0 < self.scale_range[0] <= self.scale_range[1] < 1.0:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi < 1")
        if not 0.0 < self.shift_range[0] <= self.shift_range[1]:
            raise ConfigError("shift_range must be positive")


@dataclass
class SynthSample:
    image: np.ndarray  # [3,H,W] in [0,1]
    pid: int
    camid: int
    split: str  # train | query | gallery
    theta_gen: AffineParams
    theta_inv: AffineParams
    kind: str  # background_excess | partial_loss | none
    filename: str


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    samples: list[SynthSample]
    canonical: dict[int, np.ndarray]

    def split(self, name: str) -> list[SynthSample]:
        return [s for s in self.samples if s.split == name]


def _box_blur(img: np.ndarray, passes: int = 2) -> np.ndarray:
    """Separable 3-tap blur (edge-replicated); softens warp resampling loss."""
    out = img
    for _ in range(passes):
        p = np.pad(out, ((0, 0), (1, 1), (0, 0)), mode="edge")
        out = (p[:, :-2] + p[:, 1:-1] + p[:, 2:]) / 3.0
        p = np.pad(out, ((0, 0), (0, 0), (1, 1)), mode="edge")
        out = (p[:, :, :-2] + p[:, :, 1:-1] + p[:, :, 2:]) / 3.0
    return out


def _person_texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Shared body pattern + id-coded border ring + faint id tint.

    The body (gradient + fixed stripes) is common to every id; identity
    evidence sits in a colored frame at the figure's border plus a weak
    interior tint. Tying the strong signal to the border means a warp reads
    it only when the figure's extent is mapped to the output extent, which is
    what lets warp-regression errors be measured against ground truth.
    Values stay in [0.05, 0.85].
    """
    yy, xx = np.mgrid[0:h, 0:w]
    body = np.empty((3, h, w))
    # keep the shared body dim: corrupted-away content then carries little
    # energy relative to the id-coded frame, which retrieval depends on
    body[0] = 0.18 + 0.15 * yy / max(1, h - 1)
    body[1] = 0.27 - 0.12 * xx / max(1, w - 1)
    body[2] = 0.21 + 0.09 * np.sin(2 * np.pi * (2 * yy / h))
    for a, b, level in ((int(0.28 * h), int(0.38 * h), 0.37),
                        (int(0.55 * h), int(0.62 * h), 0.13)):
        body[:, a:b, :] = level

    frame = max(2, int(round(0.16 * min(h, w))))
    # per-edge colors from the high-contrast corner palette {0.1, 0.8}^3
    edge_colors = np.where(rng.integers(0, 2, (4, 3)) > 0, 0.80, 0.10)
    img = body
    img[:, :frame, :] = edge_colors[0][:, None, None]
    img[:, h - frame:, :] = edge_colors[1][:, None, None]
    img[:, :, :frame] = edge_colors[2][:, None, None]
    img[:, :, w - frame:] = edge_colors[3][:, None, None]

    tint = rng.uniform(-0.03, 0.03, 3)
    img = img + tint[:, None, None]
    return np.clip(_box_blur(np.clip(img, 0.05, 0.85)), 0.05, 0.85)


def _clutter(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Blocky background noise, distinct from any person signature."""
    block = 8
    coarse = rng.uniform(0.10, 0.85, (3, max(1, h // block), max(1, w // block)))
    big = np.repeat(np.repeat(coarse, block, axis=1), block, axis=2)
    return big[:, :h, :w]


def _draw_corruption(kind: str, spec: SynthSpec, rng: np.random.Generator):
    """(theta_gen, theta_inv, resolved kind) for one sample."""
    if kind == "mixed":
        kind = "background_excess" if rng.random() < 0.5 else "partial_loss"
    if kind == "none":
        ident = AffineParams.identity()
        return ident, ident, kind
    if kind == "background_excess":
        s = rng.uniform(*spec.scale_range)
        gen = AffineParams((1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0))
        inv = AffineParams((s, 0.0, 0.0, 0.0, s, 0.0))
        return gen, inv, kind
    # partial_loss: single-axis translation, random sign
    d = rng.uniform(*spec.shift_range) * (1.0 if rng.random() < 0.5 else -1.0)
    if rng.random() < 0.5:
        gen = AffineParams((1.0, 0.0, d, 0.0, 1.0, 0.0))
        inv = AffineParams((1.0, 0.0, -d, 0.0, 1.0, 0.0))
    else:
        gen = AffineParams((1.0, 0.0, 0.0, 0.0, 1.0, d))
        inv = AffineParams((1.0, 0.0, 0.0, 0.0, 1.0, -d))
    return gen, inv, kind


def recoverable_mask(theta_inv: AffineParams, h: int, w: int) -> np.ndarray:
    """[H,W] bool: canonical pixels whose content survived the corruption.

    A canonical point u is recoverable iff the inverse map sends it inside
    the corrupted frame; translations clip a band, crops keep everything.
    """
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    pts = theta_inv.apply(np.stack([gx, gy], axis=-1))
    return (np.abs(pts[..., 0]) <= 1.0) & (np.abs(pts[..., 1]) <= 1.0)


def generate_synthetic(spec: SynthSpec) -> SyntheticDataset:
    """Deterministic benchmark dataset for the given spec (seeded)."""
    h, w = spec.canvas
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xEAAE]))
    canonical = {
        pid: _person_texture(h, w, np.random.default_rng(
            np.random.SeedSequence([spec.seed, 0x1D, pid])))
        for pid in range(1, spec.num_ids + 1)
    }
    n_train = int(round(spec.per_id * spec.train_frac))
    n_query = int(round(spec.per_id * spec.query_frac))
    samples: list[SynthSample] = []
    frame = 0
    for pid in range(1, spec.num_ids + 1):
        base = Tensor(canonical[pid])
        for k in range(spec.per_id):
            theta_gen, theta_inv, kind = _draw_corruption(spec.corruption, spec, rng)
            img = warp(base, theta_gen).data
            if kind == "background_excess":
                inside = warp(Tensor(np.ones((1, h, w))), theta_gen).data[0]
                img = img + (1.0 - inside) * _clutter(h, w, rng)
            if k < n_train:
                split, camid = "train", 1 + (k % 2)
            elif k < n_train + n_query:
                split, camid = "query", 1
            else:
                split, camid = "gallery", 2
            img = np.clip(img * CAM_BRIGHTNESS[camid], 0.0, 1.0)
            samples.append(SynthSample(
                image=img,
                pid=pid,
                camid=camid,
                split=split,
                theta_gen=theta_gen,
                theta_inv=theta_inv,
                kind=kind,
                filename=format_market_name(pid, camid, frame=frame),
            ))
            frame += 1
    return SyntheticDataset(spec=spec, samples=samples, canonical=canonical)


def write_synthetic(dataset: SyntheticDataset, root_dir) -> Path:
    """Emit the dataset in Market1501 layout plus a thetas.csv sidecar."""
    root = Path(root_dir)
    dirs = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
    for d in dirs.values():
        (root / d).mkdir(parents=True, exist_ok=True)
    side = root / "thetas.csv"
    with open(side, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["filename"]
            + [f"theta{i}" for i in range(1, 7)]
            + [f"inv_theta{i}" for i in range(1, 7)]
        )
        for s in dataset.samples:
            write_image(root / dirs[s.split] / s.filename, s.image)
            writer.writerow([s.filename, *s.theta_gen.theta, *s.theta_inv.theta])
    return root
