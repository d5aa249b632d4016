"""Object corpora, paired (raw, phase) synthesis and the on-disk dataset layout.

A dataset directory holds::

    manifest.csv      id,source,split,dataset,optics_digest
    dataset.txt       optics + noise settings (key = value) and their digest
    objects/<id>.pgm  8-bit object image at grid size, as shown on the SLM
    samples/<id>.raw.dlt, samples/<id>.truth.dlt
    samples.csv       id,mean,scale,degenerate  (per-sample raw standardization)

Tensor files are little-endian: magic ``DLT0``, u32 rank, u32 extents, then
float32 values.
"""

from __future__ import annotations

import csv
import errno
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from dlpr.optics import (
    NoiseSpec,
    PropagationConfig,
    calibrate_phase,
    intensity,
    optics_digest,
    phase_to_field,
    propagate,
    quantize_8bit,
)

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"DLT0"
MANIFEST_FIELDS = ("id", "source", "split", "dataset", "optics_digest")
IMAGE_SUFFIXES = {".pgm", ".png", ".pnm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
KINDS = ("blobs", "gratings", "digits", "characters", "null")
_KIND_ALIASES = {"digits-like": "digits", "characters-like": "characters"}


class DatasetError(Exception):
    pass


class DiskFullError(DatasetError):
    pass


class DigestMismatchError(DatasetError):
    pass


# -- tensor and image files -------------------------------------------------


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    _write_bytes(path, header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise DatasetError(f"{path}: not a DLT0 tensor file")
    (rank,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(data) != offset + 4 * count:
        raise DatasetError(f"{path}: expected {count} values, file size {len(data)} disagrees")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def _write_bytes(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFullError(f"disk full while writing {path}") from exc
        raise


def read_gray(path) -> np.ndarray:
    """Load an image as a float64 grayscale array in [0, 255]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = arr.max()
            return arr * (255.0 / peak) if peak > 255 else arr
        return np.asarray(im.convert("L"), dtype=np.float64)


def write_gray(path, gray) -> None:
    arr = np.clip(np.round(np.asarray(gray, dtype=np.float64)), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path)
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFullError(f"disk full while writing {path}") from exc
        raise


def phase_to_gray(phase) -> np.ndarray:
    """Display mapping [-pi, 0] -> [0, 255] (0 rad is white)."""
    return np.clip((np.asarray(phase) + np.pi) / np.pi * 255.0, 0, 255)


def resize_pad(gray, grid: int, margin: int = 0, fill: float = 0.0) -> np.ndarray:
    """Fit an image into ``grid - 2*margin`` keeping aspect ratio, centred.

    Bilinear resampling; the border is filled with gray ``fill``.
    """
    gray = np.asarray(gray, dtype=np.float64)
    inner = grid - 2 * margin
    if inner < 1:
        raise ValueError(f"margin {margin} leaves no room in a {grid} grid")
    h, w = gray.shape
    s = inner / max(h, w)
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    if (nh, nw) == (h, w):
        scaled = gray
    else:
        im = Image.fromarray(gray.astype(np.float32), mode="F")
        scaled = np.asarray(im.resize((nw, nh), Image.BILINEAR), dtype=np.float64)
    out = np.full((grid, grid), float(fill))
    top, left = (grid - nh) // 2, (grid - nw) // 2
    out[top : top + nh, left : left + nw] = np.clip(scaled, 0, 255)
    return out


# -- manifest -----------------------------------------------------------------


@dataclass
class Record:
    id: str
    source: str
    split: str
    dataset: str
    optics_digest: str = ""


@dataclass
class Manifest:
    records: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest ids are not unique")
        for r in self.records:
            if r.split not in ("train", "test"):
                raise DatasetError(f"record {r.id}: split must be train or test, got {r.split!r}")

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def ids(self, split: str | None = None) -> list:
        return [r.id for r in self.records if split is None or r.split == split]

    def write(self, path) -> None:
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
                w.writerow(MANIFEST_FIELDS)
                for r in self.records:
                    w.writerow([r.id, r.source, r.split, r.dataset, r.optics_digest])
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise DiskFullError(f"disk full while writing {path}") from exc
            raise

    @classmethod
    def read(cls, path) -> "Manifest":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise DatasetError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
            return cls([Record(**row) for row in reader])


def assign_splits(n: int, train_fraction: float, seed: int) -> list:
    """Seeded train/test labels; ``round(n * train_fraction)`` go to train."""
    if not 0 <= train_fraction <= 1:
        raise ValueError(f"split fraction must be in [0, 1], got {train_fraction}")
    n_train = int(round(n * train_fraction))
    order = np.random.default_rng(seed).permutation(n)
    labels = ["test"] * n
    for i in order[:n_train]:
        labels[i] = "train"
    return labels


# -- procedural object generators ------------------------------------------


def canonical_kind(kind: str) -> str:
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown procedural kind {kind!r}; choose from {', '.join(KINDS)}")
    return kind


def _blobs(rng, n, tilt=2.5):
    z = ndimage.gaussian_filter(rng.standard_normal((n, n)), rng.uniform(2.0, 5.0), mode="wrap")
    z = (z - z.mean()) / z.std()
    rows = np.arange(n)[:, None] / (n - 1)
    # denser toward the bottom, like the ground-heavy layout of photographs
    threshold = rng.uniform(0.2, 1.8) + tilt * (0.5 - rows)
    return 255.0 / (1.0 + np.exp(-(z - threshold) / 0.3))


def _gratings(rng, n):
    period = rng.uniform(6.0, 24.0)
    theta = rng.uniform(0, np.pi)
    psi = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[:n, :n]
    return 127.5 * (1 + np.cos(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period + psi))


def _segment_distance(n, p0, p1):
    y, x = np.mgrid[:n, :n].astype(np.float64)
    d = p1 - p0
    length2 = max(float(d @ d), 1e-12)
    t = np.clip(((x - p0[0]) * d[0] + (y - p0[1]) * d[1]) / length2, 0, 1)
    return np.hypot(x - (p0[0] + t * d[0]), y - (p0[1] + t * d[1]))


def _strokes(rng, n, n_strokes, thickness, box, step):
    lo, hi = box
    dist = np.full((n, n), np.inf)
    for _ in range(n_strokes):
        p = rng.uniform(lo, hi, size=2)
        for _ in range(int(rng.integers(1, 4))):
            q = np.clip(p + rng.normal(0, step, size=2), lo, hi)
            dist = np.minimum(dist, _segment_distance(n, p, q))
            p = q
    return 255.0 * np.clip(thickness / 2 - dist + 0.5, 0, 1)


def _digits(rng, n):
    return _strokes(rng, n, int(rng.integers(2, 4)), rng.uniform(4.0, 6.0), (0.25 * n, 0.75 * n), 0.3 * n)


def _characters(rng, n):
    # several short thin strokes inside a glyph box
    return _strokes(rng, n, int(rng.integers(3, 6)), 2.0, (0.3 * n, 0.7 * n), 0.15 * n)


_GENERATORS = {
    "blobs": _blobs,
    "gratings": _gratings,
    "digits": _digits,
    "characters": _characters,
    "null": lambda rng, n: np.zeros((n, n)),
}
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


def procedural_image(kind: str, index: int, seed: int, grid: int = 64) -> np.ndarray:
    """One deterministic 8-bit object; independent of how many others are made."""
    kind = canonical_kind(kind)
    rng = np.random.default_rng([seed, _KIND_CODE[kind], index])
    return np.round(np.clip(_GENERATORS[kind](rng, grid), 0, 255))


def foreground_coverage(gray) -> float:
    return float(np.mean(np.asarray(gray) >= 128))


def generate_procedural(kind, count, seed, grid=64, train_fraction=0.9, split_seed=None):
    """Return ``(manifest, images)`` for ``count`` synthetic objects of one kind."""
    kind = canonical_kind(kind)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    images = np.stack([procedural_image(kind, i, seed, grid) for i in range(count)]).astype(np.uint8)
    labels = assign_splits(count, train_fraction, seed if split_seed is None else split_seed)
    records = [
        Record(f"{kind}-{i:05d}", f"procedural:{kind}:seed={seed}:index={i}", labels[i], kind)
        for i in range(count)
    ]
    return Manifest(records), images


def ingest(directory, grid=64, margin=0, fill=0.0, train_fraction=0.9, seed=0, tag=None):
    """Read every image in ``directory`` and fit it to the grid.

    Returns ``(manifest, images, skipped)``; ``skipped`` counts files that
    were not readable images.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory}: not a readable directory")
    tag = tag or directory.name
    paths, images, skipped = [], [], 0
    for path in sorted(p for p in directory.iterdir() if p.is_file()):
        try:
            gray = read_gray(path)
        except (UnidentifiedImageError, OSError, ValueError):
            skipped += 1
            continue
        paths.append(path)
        images.append(resize_pad(gray, grid, margin, fill))
    if skipped:
        log.warning("skipped %d non-image files in %s", skipped, directory)
    if not images:
        raise DatasetError(f"{directory}: no readable images")
    labels = assign_splits(len(images), train_fraction, seed)
    records = [Record(f"{tag}-{i:05d}", str(p), labels[i], tag) for i, p in enumerate(paths)]
    return Manifest(records), np.round(np.stack(images)).astype(np.uint8), skipped


# -- synthesis --------------------------------------------------------------


def standardize(raw: np.ndarray, rel_tol: float = 1e-9):
    """Per-image zero-mean unit-variance scaling.

    Returns ``(normalized, mean, scale, degenerate)``; flat images come back
    as zeros with ``degenerate=True``.
    """
    mean = float(raw.mean())
    scale = float(raw.std())
    if scale <= rel_tol * max(1.0, abs(mean)):
        return np.zeros_like(raw), mean, scale, True
    return (raw - mean) / scale, mean, scale, False


class PerImageStandardizer(TransformerMixin, BaseEstimator):
    """Stateless transformer applying :func:`standardize` to each image."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(len(X), -1)
        out = np.empty_like(flat)
        for i, row in enumerate(flat):
            out[i] = standardize(row)[0]
        return out.reshape(X.shape)


def measure_batch(objects, cfg: PropagationConfig, noise: NoiseSpec | None = None):
    """Raw intensities and phase truths for a stack of 8-bit objects.

    Noise for item ``i`` is drawn from ``default_rng([noise.seed, i])``.
    """
    noise = noise or NoiseSpec()
    objects = np.asarray(objects)
    raws = np.empty(objects.shape, dtype=np.float64)
    truths = np.empty(objects.shape, dtype=np.float64)
    for i, obj in enumerate(objects):
        phase = calibrate_phase(obj, cfg.grid)
        raw = intensity(propagate(phase_to_field(phase), cfg))
        if noise.sigma > 0:
            rng = np.random.default_rng([noise.seed, i])
            raw = np.clip(raw + rng.normal(0.0, noise.sigma, raw.shape), 0.0, None)
        if noise.quantize:
            raw = quantize_8bit(raw)
        raws[i], truths[i] = raw, phase
    return raws, truths


def network_inputs(objects, cfg: PropagationConfig, noise: NoiseSpec | None = None):
    """``(X, y, stats)`` ready for the network: standardized raw, phase truth."""
    raws, truths = measure_batch(objects, cfg, noise)
    X = np.empty(raws.shape, dtype=np.float32)
    stats = []
    for i, raw in enumerate(raws):
        norm, mean, scale, degenerate = standardize(raw)
        X[i] = norm
        stats.append((mean, scale, degenerate))
    return X[:, None], truths.astype(np.float32)[:, None], stats


def write_optics_settings(path, cfg: PropagationConfig, noise: NoiseSpec) -> str:
    digest = optics_digest(cfg, noise)
    lines = [
        f"optics.wavelength = {cfg.wavelength!r}",
        f"optics.pixel_pitch = {cfg.pixel_pitch!r}",
        f"optics.distance = {cfg.distance!r}",
        f"optics.grid = {cfg.grid}",
        f"optics.pad_factor = {cfg.pad_factor}",
        f"optics.pad_mode = {cfg.pad_mode}",
        f"optics.noise_sigma = {noise.sigma!r}",
        f"optics.quantize = {int(noise.quantize)}",
        f"optics.noise_seed = {noise.seed}",
        f"optics.digest = {digest}",
    ]
    _write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return digest


def read_optics_settings(path) -> tuple[PropagationConfig, NoiseSpec, str]:
    from dlpr.network import parse_key_values

    v = parse_key_values(Path(path).read_text(encoding="utf-8"))
    cfg = PropagationConfig(
        wavelength=float(v["optics.wavelength"]),
        pixel_pitch=float(v["optics.pixel_pitch"]),
        distance=float(v["optics.distance"]),
        grid=int(v["optics.grid"]),
        pad_factor=int(v["optics.pad_factor"]),
        pad_mode=v["optics.pad_mode"],
    )
    noise = NoiseSpec(float(v["optics.noise_sigma"]), bool(int(v["optics.quantize"])), int(v["optics.noise_seed"]))
    return cfg, noise, v["optics.digest"]


def synthesize(manifest: Manifest, objects, cfg: PropagationConfig, out_dir, noise: NoiseSpec | None = None) -> Manifest:
    """Simulate every record and write the dataset directory.  Returns the stamped manifest."""
    noise = noise or NoiseSpec()
    objects = np.asarray(objects)
    if objects.shape[1:] != (cfg.grid, cfg.grid):
        raise DatasetError(f"objects are {objects.shape[1:]} but the optics grid is {cfg.grid}")
    if len(objects) != len(manifest):
        raise DatasetError(f"{len(objects)} objects for {len(manifest)} manifest records")
    out = Path(out_dir)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(parents=True, exist_ok=True)

    digest = write_optics_settings(out / "dataset.txt", cfg, noise)
    X, y, stats = network_inputs(objects, cfg, noise)
    rows = []
    for i, rec in enumerate(manifest):
        rec.optics_digest = digest
        write_gray(out / "objects" / f"{rec.id}.pgm", objects[i])
        write_tensor(out / "samples" / f"{rec.id}.raw.dlt", X[i, 0])
        write_tensor(out / "samples" / f"{rec.id}.truth.dlt", y[i, 0])
        mean, scale, degenerate = stats[i]
        rows.append(f"{rec.id},{float(mean)!r},{float(scale)!r},{int(degenerate)}")
    _write_bytes(out / "samples.csv", ("id,mean,scale,degenerate\n" + "\n".join(rows) + "\n").encode("utf-8"))
    manifest.write(out / "manifest.csv")
    return manifest


@dataclass
class Dataset:
    """A loaded dataset split: network inputs, phase truths and objects."""

    X: np.ndarray
    y: np.ndarray
    objects: np.ndarray
    ids: list
    tags: list
    cfg: PropagationConfig
    noise: NoiseSpec
    digest: str

    def __len__(self):
        return len(self.ids)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset(
            self.X[idx], self.y[idx], self.objects[idx],
            [self.ids[i] for i in idx], [self.tags[i] for i in idx],
            self.cfg, self.noise, self.digest,
        )


def load_dataset(directory, split: str | None = None) -> Dataset:
    """Read one split (or all records) of a dataset directory."""
    directory = Path(directory)
    if not (directory / "manifest.csv").exists():
        raise DatasetError(f"{directory}: no manifest.csv")
    manifest = Manifest.read(directory / "manifest.csv")
    cfg, noise, digest = read_optics_settings(directory / "dataset.txt")
    recs = [r for r in manifest if split is None or r.split == split]
    if not recs:
        raise DatasetError(f"{directory}: no records in split {split!r}")
    for r in recs:
        if r.optics_digest != digest:
            raise DigestMismatchError(
                f"{directory}: record {r.id} has optics digest {r.optics_digest!r}, dataset declares {digest!r}"
            )
    X = np.stack([read_tensor(directory / "samples" / f"{r.id}.raw.dlt") for r in recs])[:, None]
    y = np.stack([read_tensor(directory / "samples" / f"{r.id}.truth.dlt") for r in recs])[:, None]
    objects = np.stack([read_gray(directory / "objects" / f"{r.id}.pgm") for r in recs]).astype(np.uint8)
    return Dataset(X, y, objects, [r.id for r in recs], [r.dataset for r in recs], cfg, noise, digest)


def dataset_from_objects(objects, cfg, noise=None, tag="memory", ids=None) -> Dataset:
    """In-memory dataset, e.g. for sweeps that re-simulate under new optics."""
    noise = noise or NoiseSpec()
    X, y, _ = network_inputs(objects, cfg, noise)
    ids = ids or [f"{tag}-{i:05d}" for i in range(len(X))]
    return Dataset(X, y, np.asarray(objects, dtype=np.uint8), list(ids), [tag] * len(ids), cfg, noise, optics_digest(cfg, noise))
