"""Volume files, preprocessing, manifests, batching and synthetic phantoms."""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from volnet.tensor import Tensor

VOLF_MAGIC = b"VOLF"
VOLF_VERSION = 1
_HEADER = struct.Struct("<4sI3Q")

CANONICAL_DEPTH = 50
CANONICAL_SIZE = (112, 112)
TINY_DEPTH = 16
TINY_SIZE = (32, 32)


class VolumeFormatError(ValueError):
    """Malformed VOLF file."""


class TruncatedVolumeError(VolumeFormatError):
    pass


class DataError(RuntimeError):
    """A record could not be loaded or preprocessed."""

    def __init__(self, record_id: str, cause: Exception):
        super().__init__(f"record {record_id!r}: {cause}")
        self.record_id = record_id


@dataclass
class VolumeRecord:
    id: str
    label: int
    voxels: np.ndarray | None = None
    path: Path | None = None


# -- VOLF I/O ----------------------------------------------------------------

def write_volume(path: str | Path, voxels: np.ndarray) -> None:
    voxels = np.asarray(voxels)
    if voxels.ndim != 3 or min(voxels.shape) < 1:
        raise ValueError(f"expected a non-empty [D,H,W] volume, got shape {voxels.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLF_MAGIC, VOLF_VERSION, *voxels.shape))
        fh.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 4 or buf[:4] != VOLF_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {buf[:4]!r}, expected {VOLF_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedVolumeError(f"{path}: header truncated ({len(buf)} bytes)")
    _, version, d, h, w = _HEADER.unpack_from(buf)
    if version != VOLF_VERSION:
        raise VolumeFormatError(f"{path}: unsupported VOLF version {version}")
    if min(d, h, w) < 1:
        raise VolumeFormatError(f"{path}: empty dims {(d, h, w)}")
    count = d * h * w
    if count * 4 >= 2**63:
        raise VolumeFormatError(f"{path}: dims {(d, h, w)} overflow")
    payload = len(buf) - _HEADER.size
    if payload != count * 4:
        raise TruncatedVolumeError(f"{path}: dims {(d, h, w)} need {count * 4} payload bytes, file has {payload}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(d, h, w).astype(np.float32)


# -- preprocessing -----------------------------------------------------------

def center_window(voxels: np.ndarray, target: int = CANONICAL_DEPTH) -> np.ndarray:
    """``target`` consecutive slices starting at ``floor((D - target) / 2)``.

    Shorter volumes are padded by replicating the edge slices, split as
    evenly as possible (the extra slice, if any, goes to the end).
    """
    d = voxels.shape[0]
    if d >= target:
        s = (d - target) // 2
        return voxels[s : s + target]
    before = (target - d) // 2
    return np.pad(voxels, ((before, target - d - before), (0, 0), (0, 0)), mode="edge")


def _bilinear_taps(n_in: int, n_out: int):
    # Half-pixel centers; source coords clamped at the border.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_slices(voxels: np.ndarray, size: tuple[int, int] = CANONICAL_SIZE) -> np.ndarray:
    """Bilinear per-slice resize of ``[D, H, W]`` to ``[D, *size]``."""
    d, h, w = voxels.shape
    if h < 1 or w < 1:
        raise ValueError(f"cannot resize degenerate slices of shape {(h, w)}")
    y0, y1, wy = _bilinear_taps(h, size[0])
    x0, x1, wx = _bilinear_taps(w, size[1])
    v = voxels.astype(np.float64, copy=False)
    rows = v[:, y0, :] * (1 - wy)[None, :, None] + v[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx
    return out.astype(np.float32)


def normalize(voxels: np.ndarray, clamp: tuple[float, float] | None = None) -> np.ndarray:
    """Per-volume z-score ``(x - mean) / (std + 1e-6)``; constant input maps to zeros."""
    v = voxels.astype(np.float64)
    if clamp is not None:
        v = np.clip(v, *clamp)
    if v.size == 0 or v.max() == v.min():
        return np.zeros(voxels.shape, dtype=np.float32)
    return ((v - v.mean()) / (v.std() + 1e-6)).astype(np.float32)


def preprocess(
    voxels: np.ndarray,
    depth: int = CANONICAL_DEPTH,
    size: tuple[int, int] = CANONICAL_SIZE,
    clamp: tuple[float, float] | None = None,
) -> np.ndarray:
    return normalize(resize_slices(center_window(voxels, depth), size), clamp)


# -- manifests ---------------------------------------------------------------

SPLITS = ("train", "val")


@dataclass
class ManifestRow:
    id: str
    path: str
    label: int
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.id in seen:
                raise ValueError(f"duplicate manifest id {r.id!r}")
            seen.add(r.id)
            if r.label not in (0, 1):
                raise ValueError(f"{r.id}: label must be 0 or 1, got {r.label!r}")
            if r.split not in SPLITS:
                raise ValueError(f"{r.id}: split must be one of {SPLITS}, got {r.split!r}")

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.rows if r.split == name], self.root)

    def records(self) -> list[VolumeRecord]:
        return [VolumeRecord(r.id, r.label, path=self.root / r.path) for r in self.rows]


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "path", "label", "split"]:
            raise ValueError(f"{path}: header must be id,path,label,split, got {reader.fieldnames}")
        rows = []
        for line in reader:
            try:
                label = int(line["label"])
            except ValueError:
                raise ValueError(f"{path}: bad label {line['label']!r} for {line['id']!r}") from None
            rows.append(ManifestRow(line["id"], line["path"], label, line["split"]))
    manifest = Manifest(rows, path.parent)
    for r in manifest.rows:
        if not (manifest.root / r.path).is_file():
            raise FileNotFoundError(f"{path}: volume for {r.id!r} not found at {r.path}")
    return manifest


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "path", "label", "split"])
        for r in manifest.rows:
            writer.writerow([r.id, r.path, r.label, r.split])


# -- batching ----------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(seed ^ epoch).permutation(n)


@dataclass
class Preprocessor:
    depth: int = CANONICAL_DEPTH
    size: tuple[int, int] = CANONICAL_SIZE
    clamp: tuple[float, float] | None = None
    cache: dict | None = None

    def __call__(self, record: VolumeRecord) -> np.ndarray:
        if self.cache is not None and record.id in self.cache:
            return self.cache[record.id]
        try:
            raw = record.voxels if record.voxels is not None else read_volume(record.path)
            out = preprocess(raw, self.depth, self.size, self.clamp)
        except (OSError, ValueError) as err:
            raise DataError(record.id, err) from err
        if self.cache is not None:
            self.cache[record.id] = out
        return out


def make_batches(
    records: Sequence[VolumeRecord],
    batch_size: int = 4,
    seed: int = 0,
    epoch: int = 0,
    prep: Preprocessor | None = None,
    workers: int = 1,
    shuffle: bool = True,
) -> Iterator[tuple[Tensor, np.ndarray, list[str]]]:
    """Yield ``(volumes [B,1,D,H,W], labels [B], ids)`` per batch.

    The order for an epoch is a permutation seeded by ``seed ^ epoch``;
    preprocessing runs lazily per batch and, with ``workers > 1``, on a
    thread pool whose map preserves record order.
    """
    if not records:
        raise ValueError("cannot batch an empty record list")
    prep = prep or Preprocessor()
    order = epoch_order(len(records), seed, epoch) if shuffle else np.arange(len(records))
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            chunk = [records[i] for i in order[start : start + batch_size]]
            vols = list(pool.map(prep, chunk)) if pool else [prep(r) for r in chunk]
            x = np.stack(vols)[:, None]
            yield Tensor(x), np.array([r.label for r in chunk], dtype=np.float32), [r.id for r in chunk]
    finally:
        if pool:
            pool.shutdown()


# -- phantoms ----------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic chest volume: body, two lung ellipsoids, optional lesions.

    Intensity ranges are disjoint by construction: lung voxels never exceed
    ``lung_value + noise`` while lesion voxels are at least
    ``lesion_intensity[0] - noise``.
    """

    dims: tuple[int, int, int] = (64, 128, 128)
    window: int = CANONICAL_DEPTH
    air_value: float = -1000.0
    body_value: float = 40.0
    lung_value: float = -850.0
    lung_semi_axes: tuple[float, float, float] = (0.42, 0.30, 0.17)  # fractions of D, H, W
    geometry_jitter: float = 0.08
    lesion_count: tuple[int, int] = (2, 4)
    lesion_radius: tuple[float, float] = (0.10, 0.15)  # fraction of min(H, W)
    lesion_core: float = 0.6  # centers lie in the lung scaled by this factor
    lesion_intensity: tuple[float, float] = (200.0, 500.0)
    noise: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 2:
            raise ValueError(f"phantom dims must be >= 2, got {self.dims}")
        if self.lesion_count[0] < 1 or self.lesion_count[1] < self.lesion_count[0]:
            raise ValueError(f"bad lesion_count range {self.lesion_count}")
        if not 0 < self.lesion_core <= 1:
            raise ValueError(f"lesion_core must be in (0, 1], got {self.lesion_core}")
        if self.lung_value + self.noise >= self.lesion_intensity[0] - self.noise:
            raise ValueError("lesion and lung intensity ranges overlap")


def _ellipsoid(grid, center, semi):
    return sum(((g - c) / s) ** 2 for g, c, s in zip(grid, center, semi)) <= 1.0


def phantom_volume(spec: PhantomSpec, index: int, label: int) -> tuple[np.ndarray, np.ndarray]:
    """Volume and lung mask for record ``index``.

    Anatomy and noise come from the ``(seed, index, 0)`` stream, lesions from
    ``(seed, index, 1)``, so the two labels of one index differ only inside
    the lung mask.
    """
    base = np.random.default_rng([spec.seed, index, 0])
    d, h, w = spec.dims
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij", sparse=True)
    jit = lambda: 1 + base.uniform(-spec.geometry_jitter, spec.geometry_jitter)  # noqa: E731

    vol = np.full(spec.dims, spec.air_value)
    body = _ellipsoid(grid[1:], (h / 2, w / 2), (0.45 * h * jit(), 0.47 * w * jit()))
    vol[np.broadcast_to(body, spec.dims)] = spec.body_value
    lung = np.zeros(spec.dims, dtype=bool)
    core = np.zeros(spec.dims, dtype=bool)
    sd, sh, sw = spec.lung_semi_axes
    for side in (-1, 1):
        center = (d / 2 * jit(), h / 2 * jit(), w / 2 + side * 0.22 * w * jit())
        semi = (sd * d * jit(), sh * h * jit(), sw * w * jit())
        lung |= _ellipsoid(grid, center, semi)
        core |= _ellipsoid(grid, center, tuple(spec.lesion_core * s for s in semi))
    vol[lung] = spec.lung_value
    noise = base.uniform(-spec.noise, spec.noise, size=spec.dims)

    if label == 1:
        les = np.random.default_rng([spec.seed, index, 1])
        start = max((d - spec.window) // 2, 0)
        slab = np.zeros_like(lung)
        slab[start : start + spec.window] = True
        candidates = np.argwhere(core & slab)
        if len(candidates) == 0:
            candidates = np.argwhere(lung & slab)
        if len(candidates) == 0:
            candidates = np.argwhere(lung)
        if len(candidates) == 0:
            raise ValueError(f"phantom {index}: lung mask is empty for dims {spec.dims}")
        for _ in range(les.integers(spec.lesion_count[0], spec.lesion_count[1] + 1)):
            center = candidates[les.integers(len(candidates))]
            radius = les.uniform(*spec.lesion_radius) * min(h, w)
            value = les.uniform(*spec.lesion_intensity)
            sphere = sum((g - c) ** 2 for g, c in zip(grid, center)) <= radius**2
            vol[sphere & lung] = value
    return (vol + noise).astype(np.float32), lung


def generate_phantoms(
    spec: PhantomSpec,
    out_dir: str | Path,
    n_per_class: int,
    n_val_per_class: int = 0,
) -> Manifest:
    """Write balanced train (and optionally val) phantoms plus ``manifest.csv``."""
    if n_per_class < 0 or n_val_per_class < 0:
        raise ValueError("class counts must be non-negative")
    out_dir = Path(out_dir)
    rows = []
    index = 0
    for split, per_class in (("train", n_per_class), ("val", n_val_per_class)):
        for i in range(2 * per_class):
            label = i % 2
            rid = f"{split}_{i:04d}"
            rel = f"volumes/{rid}.volf"
            vol, _ = phantom_volume(spec, index, label)
            write_volume(out_dir / rel, vol)
            rows.append(ManifestRow(rid, rel, label, split))
            index += 1
    manifest = Manifest(rows, out_dir)
    write_manifest(out_dir / "manifest.csv", manifest)
    return manifest
