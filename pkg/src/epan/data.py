"""Dataset ingestion: Market1501-layout records, portable image I/O, resize,
and the training augmentation pipeline.

Filenames follow the ``{pid}_c{cam}s{seq}_{frame}_{bbox}.ext`` pattern; pid -1
marks junk. Images are binary PPM (P6) at 8-bit depth — the one codec with a
bit-exact round trip — plus P5 graymaps for matrix visualizations. Resizing
reuses the affine sampler so there is exactly one interpolation code path.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import AffineParams, bilinear_sample, make_grid
from .autodiff import Tensor
from .errors import ConfigError, DataFormatError

MARKET_NAME = re.compile(
    r"^(?P<pid>-?\d+)_c(?P<cam>\d+)s(?P<seq>\d+)_(?P<frame>\d+)_(?P<bbox>\d+)\.(?P<ext>\w+)$"
)

SPLIT_DIRS = {
    "train": "bounding_box_train",
    "query": "query",
    "gallery": "bounding_box_test",
}


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    pid: int
    camid: int
    split: str

    @property
    def is_junk(self) -> bool:
        return self.pid == -1


@dataclass
class DatasetSummary:
    counts: dict[str, int]
    num_junk: int
    rejects: list[str]
    expected: dict[str, int] | None = None

    @property
    def matches_expected(self) -> bool | None:
        if self.expected is None:
            return None
        return all(self.counts.get(k) == v for k, v in self.expected.items())


def parse_market_name(filename: str) -> tuple[int, int]:
    """(pid, camid) from a Market-style basename; raises on mismatch."""
    m = MARKET_NAME.match(Path(filename).name)
    if not m:
        raise DataFormatError(f"not a Market-style filename: {filename!r}")
    return int(m.group("pid")), int(m.group("cam"))


def format_market_name(pid: int, camid: int, seq: int = 1, frame: int = 0,
                       bbox: int = 0, ext: str = "ppm") -> str:
    pid_txt = f"{pid:04d}" if pid >= 0 else str(pid)
    return f"{pid_txt}_c{camid}s{seq}_{frame:06d}_{bbox:02d}.{ext}"


def load_dataset(root_dir) -> tuple[dict[str, list[SampleRecord]], DatasetSummary]:
    """Scan a Market1501-layout tree into per-split records.

    Junk entries (pid -1) are excluded from every split but counted;
    unparseable names land in the rejects report instead of failing the load.
    An optional ``expected_counts.json`` manifest in the root is compared
    against the observed counts.
    """
    root = Path(root_dir)
    splits: dict[str, list[SampleRecord]] = {}
    rejects: list[str] = []
    num_junk = 0
    for split, dirname in SPLIT_DIRS.items():
        directory = root / dirname
        if not directory.is_dir():
            raise ConfigError(f"dataset root {root} is missing {dirname}/")
        records = []
        for path in sorted(directory.iterdir()):
            if not path.is_file():
                continue
            try:
                pid, camid = parse_market_name(path.name)
            except DataFormatError:
                rejects.append(str(path))
                continue
            if pid == -1:
                num_junk += 1
                continue
            records.append(SampleRecord(str(path), pid, camid, split))
        splits[split] = records

    expected = None
    manifest = root / "expected_counts.json"
    if manifest.exists():
        try:
            expected = {k: int(v) for k, v in json.loads(manifest.read_text()).items()}
        except (ValueError, TypeError) as exc:
            raise DataFormatError(f"bad expected-counts manifest {manifest}") from exc
    summary = DatasetSummary(
        counts={k: len(v) for k, v in splits.items()},
        num_junk=num_junk,
        rejects=rejects,
        expected=expected,
    )
    return splits, summary


# -- portable image I/O -------------------------------------------------------


def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataFormatError(f"truncated image header at byte {start}")
    return data[start:pos], pos


def _parse_pnm(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if data[:2] != magic:
        raise DataFormatError(
            f"{path}: bad magic {data[:2]!r} at byte 0 (expected {magic!r})"
        )
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_header_token(data, pos)
        if not token.isdigit():
            raise DataFormatError(f"{path}: non-numeric header field at byte {pos - len(token)}")
        fields.append(int(token))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataFormatError(f"{path}: missing header terminator at byte {pos}")
    pos += 1  # exactly one whitespace byte before the raster
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataFormatError(f"{path}: empty raster {width}x{height}")
    if not 0 < maxval < 256:
        raise DataFormatError(f"{path}: unsupported maxval {maxval} (8-bit only)")
    return width, height, maxval, pos


def load_image(path) -> Tensor:
    """Read a binary PPM (P6) into a channel-major [3,H,W] tensor in [0,1]."""
    data = Path(path).read_bytes()
    width, height, maxval, pos = _parse_pnm(data, b"P6", path)
    expected = width * height * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise DataFormatError(
            f"{path}: raster truncated at byte {pos + len(raster)} "
            f"(need {expected} bytes)"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return Tensor(pixels.transpose(2, 0, 1).astype(np.float64) / maxval)


def write_image(path, image) -> None:
    """Write [3,H,W] unit-scaled values as binary PPM (maxval 255)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataFormatError(f"write_image needs [3,H,W], got {arr.shape}")
    _, h, w = arr.shape
    raster = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(raster.transpose(1, 2, 0).tobytes())


def load_graymap(path) -> np.ndarray:
    """Read a binary PGM (P5) into [H,W] in [0,1]."""
    data = Path(path).read_bytes()
    width, height, maxval, pos = _parse_pnm(data, b"P5", path)
    expected = width * height
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise DataFormatError(f"{path}: raster truncated at byte {pos + len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width) / maxval


def write_graymap(path, values: np.ndarray) -> None:
    """Write [H,W] values as P5, min-max scaled to the 8-bit range."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataFormatError(f"write_graymap needs [H,W], got {arr.shape}")
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.rint(scaled * 255.0).astype(np.uint8).tobytes())


def resize(image, h_out: int, w_out: int) -> Tensor:
    """Bilinear resize through the affine sampler (identity map, new lattice)."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    grid = make_grid(AffineParams.identity(), h_out, w_out)
    return bilinear_sample(img, grid)


# -- augmentation -------------------------------------------------------------


@dataclass
class AugConfig:
    enabled: bool = True
    flip_p: float = 0.5
    pad: int = 10
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.20)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    erase_fill: tuple[float, float, float] | float = 0.5

    def __post_init__(self):
        for p in (self.flip_p, self.erase_p):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("augmentation probabilities must be in [0,1]")
        if self.pad < 0:
            raise ConfigError("augmentation pad must be >= 0")


def augment(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply flip / pad-crop / random-erase to a [3,H,W] array (copy)."""
    out = np.array(img, copy=True)
    if not cfg.enabled:
        return out
    _, h, w = out.shape
    if cfg.flip_p > 0 and rng.random() < cfg.flip_p:
        out = out[:, :, ::-1].copy()
    if cfg.pad > 0:
        p = cfg.pad
        padded = np.pad(out, ((0, 0), (p, p), (p, p)))
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        out = padded[:, top:top + h, left:left + w].copy()
    if cfg.erase_p > 0 and rng.random() < cfg.erase_p:
        area = rng.uniform(*cfg.erase_area) * h * w
        log_lo, log_hi = np.log(cfg.erase_aspect[0]), np.log(cfg.erase_aspect[1])
        aspect = np.exp(rng.uniform(log_lo, log_hi))
        eh = int(np.clip(np.rint(np.sqrt(area * aspect)), 1, h))
        ew = int(np.clip(np.rint(np.sqrt(area / aspect)), 1, w))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        fill = np.asarray(cfg.erase_fill, dtype=out.dtype).reshape(-1, 1, 1)
        out[:, top:top + eh, left:left + ew] = fill
    return out
