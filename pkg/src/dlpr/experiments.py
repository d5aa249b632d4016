"""Evaluation analyses run on a trained, frozen network.

Perturbations (distance, lateral shift, rotation) are applied to the object
before simulation, i.e. to what the SLM shows, never to the measured image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dlpr import autodiff as ad
from dlpr.datasets import dataset_from_objects, phase_to_gray, write_gray
from dlpr.network import PhaseNet
from dlpr.optics import NoiseSpec, PropagationConfig
from dlpr.training import EVAL_BATCH, evaluate, per_sample_l1

AXES = ("distance", "shift", "rotation")


class DigestMismatch(ValueError):
    pass


@dataclass
class SweepResult:
    axis: str
    values: list = field(default_factory=list)
    mae: list = field(default_factory=list)
    n: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["axis,value,mae,n"]
        for v, m, k in zip(self.values, self.mae, self.n):
            lines.append(f"{self.axis},{_fmt_value(self.axis, v)},{float(m)!r},{k}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def argmin(self):
        return self.values[int(np.argmin(self.mae))]


def _fmt_value(axis, v):
    return repr(float(v)) if axis == "distance" else str(int(v))


def cross_domain_eval(model: PhaseNet, datasets: dict, model_digest: str | None = None) -> dict:
    """MAE per dataset tag.  Each set must share the model's optics digest."""
    table = {}
    for tag, ds in datasets.items():
        if model_digest and ds.digest != model_digest:
            raise DigestMismatch(
                f"test set {tag!r} was simulated with optics {ds.digest}, the model was trained on {model_digest}"
            )
        table[tag] = (evaluate(model, ds), len(ds))
    return table


def table_csv(table: dict) -> str:
    lines = ["dataset,mae,n"] + [f"{tag},{float(mae)!r},{n}" for tag, (mae, n) in table.items()]
    return "\n".join(lines) + "\n"


def _sweep(model, objects, cfg, noise, axis, values, make):
    result = SweepResult(axis, metadata={"base_distance": cfg.distance, "grid": cfg.grid})
    for v in values:
        objs, c = make(v)
        ds = dataset_from_objects(objs, c, noise)
        result.values.append(v)
        result.mae.append(evaluate(model, ds))
        result.n.append(len(ds))
    return result


def distance_sweep(model, objects, cfg: PropagationConfig, values, noise: NoiseSpec | None = None) -> SweepResult:
    """Re-simulate the same objects at each sensor distance (meters)."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    if any(v <= 0 for v in values):
        raise ValueError(f"distances must be > 0, got {values}")
    return _sweep(model, objects, cfg, noise, "distance", values, lambda d: (objects, cfg.replace(distance=d)))


def shift_image(gray, shift: int) -> np.ndarray:
    """Move an object ``shift`` pixels up the frame (negative: down), filling with gray 0.

    Rows are the second-to-last axis, so a batch ``(n, h, w)`` shifts every image.
    """
    gray = np.asarray(gray)
    out = np.zeros_like(gray)
    n = gray.shape[-2]
    if shift >= 0:
        out[..., : n - shift, :] = gray[..., shift:, :]
    else:
        out[..., -shift:, :] = gray[..., : n + shift, :]
    return out


def shift_sweep(model, objects, cfg: PropagationConfig, values, noise: NoiseSpec | None = None) -> SweepResult:
    values = [int(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    for v in values:
        if abs(v) > cfg.grid:
            raise ValueError(f"shift {v} exceeds the {cfg.grid}-pixel grid")
    return _sweep(model, objects, cfg, noise, "shift", values, lambda s: (shift_image(objects, s), cfg))


def normalize_rotation(angle) -> int:
    a = float(angle)
    if a % 90:
        raise ValueError(f"rotation must be a multiple of 90 degrees, got {angle}")
    return int(a) % 360


def rotation_sweep(model, objects, cfg: PropagationConfig, values, noise: NoiseSpec | None = None) -> SweepResult:
    values = [normalize_rotation(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    return _sweep(
        model, objects, cfg, noise, "rotation", values,
        lambda a: (np.rot90(objects, a // 90, axes=(-2, -1)).copy(), cfg),
    )


def run_sweep(axis, model, objects, cfg, values, noise=None) -> SweepResult:
    fn = {"distance": distance_sweep, "shift": shift_sweep, "rotation": rotation_sweep}.get(axis)
    if fn is None:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    return fn(model, objects, cfg, values, noise)


# -- maximally activated patterns ---------------------------------------------


def filter_activation(model: PhaseNet, image, layer: int, filt: int):
    """Mean response of one filter of one block to ``image`` (a Tensor).

    Layers count from 1 in :meth:`PhaseNet.block_names` order, so layer 1 is
    the stem convolution.
    """
    acts = []
    model.forward(image, activations=acts)
    return ad.mean(ad.select_channel(acts[layer - 1], filt))


def max_activation_pattern(model: PhaseNet, layer: int, filt: int, steps=100, step_size=0.1, seed=0):
    """Normalized gradient ascent on the input to maximize a filter's mean response.

    The pattern is kept at unit L2 norm; the network sees it scaled by
    ``input_size`` so its per-pixel RMS is 1, the scale of standardized raw
    images.  Returns ``(pattern, trace)`` with ``trace[k]`` the activation
    after ``k`` steps.
    """
    n_layers = len(model.block_names())
    if not 1 <= layer <= n_layers:
        raise IndexError(f"layer {layer} out of range; layers are 1..{n_layers}")
    size = model.spec.input_size
    probe = []
    model.forward(ad.Tensor(np.zeros((1, 1, size, size))), activations=probe)
    channels = probe[layer - 1].shape[1]
    if not 0 <= filt < channels:
        raise IndexError(f"filter {filt} out of range; layer {layer} has {channels} filters")
    if steps < 0 or not step_size > 0:
        raise ValueError("need steps >= 0 and step_size > 0")

    rng = np.random.default_rng(seed)
    x = 1e-2 * rng.standard_normal((size, size))
    x /= np.linalg.norm(x)
    gain = float(size)
    trace = []
    for k in range(steps + 1):
        inp = ad.Tensor((gain * x)[None, None], requires_grad=True)
        act = filter_activation(model, inp, layer, filt)
        trace.append(float(act.data))
        if k == steps:
            break
        act.backward()
        g = inp.grad[0, 0].astype(np.float64)
        gnorm = np.linalg.norm(g)
        if gnorm == 0:
            trace.extend([trace[-1]] * (steps - k))
            break
        x = x + step_size * g / gnorm
        x /= np.linalg.norm(x)
    model.zero_grad()
    return x, np.array(trace)


def pattern_to_gray(pattern) -> np.ndarray:
    p = np.asarray(pattern, dtype=np.float64)
    lo, hi = p.min(), p.max()
    return np.zeros_like(p) if hi == lo else (p - lo) / (hi - lo) * 255.0


# -- reconstruction grids -----------------------------------------------------


def reconstruct_grid(model: PhaseNet, dataset, path, limit: int | None = None, gap: int = 2):
    """Tile ``[truth | raw | reconstruction]`` rows for each sample into one image.

    Returns the per-sample L1 values, in row order.
    """
    count = len(dataset) if limit is None else min(limit, len(dataset))
    if count < 1:
        raise ValueError("reconstruct_grid needs at least one sample")
    X, y = dataset.X[:count], dataset.y[:count]
    pred = model.predict(X, batch_size=EVAL_BATCH)
    l1 = per_sample_l1(pred, y)
    return l1, write_tiles(path, y[:, 0], X[:, 0], pred[:, 0], gap)


def write_tiles(path, truths, raws, preds, gap=2) -> np.ndarray:
    n, h, w = truths.shape
    sheet = np.full((n * h + (n - 1) * gap, 3 * w + 2 * gap), 255.0)
    for i in range(n):
        r = raws[i]
        lo, hi = r.min(), r.max()
        raw_gray = np.zeros_like(r) if hi == lo else (r - lo) / (hi - lo) * 255.0
        for j, tile in enumerate((phase_to_gray(truths[i]), raw_gray, phase_to_gray(preds[i]))):
            top, left = i * (h + gap), j * (w + gap)
            sheet[top : top + h, left : left + w] = tile
    write_gray(path, sheet)
    return sheet
