"""Coherent forward model: 8-bit object image -> pure-phase field -> free space -> intensity.

All arithmetic here is 64-bit.  The propagator is the angular spectrum method
with evanescent frequencies zeroed.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from dlpr.validation import check_finite, check_gray_image, check_square

PAD_MODES = ("edge", "zero")


@dataclass(frozen=True)
class PropagationConfig:
    """Geometry of one simulated SLM -> sensor path.

    Parameters
    ----------
    wavelength : float
        Meters.  Defaults to the He-Ne line.
    pixel_pitch : float
        Meters per pixel on both the object and the sensor plane.
    distance : float
        Object-to-sensor distance in meters.  Negative values back-propagate.
    grid : int
        Pixels per side of the simulated window.
    pad_factor : int
        The window is embedded in a ``pad_factor * grid`` square before the
        FFT to push wraparound away from the crop.
    pad_mode : {"edge", "zero"}
        How the embedding is filled.  ``"edge"`` continues the border values
        of the field (an SLM that keeps showing its border phase), so uniform
        objects stay exact plane waves.  ``"zero"`` is an opaque surround.
    """

    wavelength: float = 632.8e-9
    pixel_pitch: float = 20e-6
    distance: float = 0.375
    grid: int = 64
    pad_factor: int = 2
    pad_mode: str = "edge"

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")
        if not self.pixel_pitch > 0:
            raise ValueError(f"pixel_pitch must be > 0, got {self.pixel_pitch}")
        if not np.isfinite(self.distance):
            raise ValueError(f"distance must be finite, got {self.distance}")
        if int(self.grid) != self.grid or self.grid < 2:
            raise ValueError(f"grid must be an integer >= 2, got {self.grid}")
        if int(self.pad_factor) != self.pad_factor or self.pad_factor < 1:
            raise ValueError(f"pad_factor must be an integer >= 1, got {self.pad_factor}")
        if self.pad_mode not in PAD_MODES:
            raise ValueError(f"pad_mode must be one of {PAD_MODES}, got {self.pad_mode!r}")

    def replace(self, **changes) -> "PropagationConfig":
        fields = asdict(self)
        fields.update(changes)
        return PropagationConfig(**fields)


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor model applied after the intensity is formed.

    ``sigma`` is the std of additive Gaussian noise in intensity units (a
    plane wave has intensity 1).  ``quantize`` maps to 8 bits after noise.
    """

    sigma: float = 0.0
    quantize: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")

    @property
    def active(self) -> bool:
        return self.sigma > 0 or self.quantize


def optics_digest(cfg: PropagationConfig, noise: NoiseSpec | None = None) -> str:
    """Short stable hash identifying a measurement configuration."""
    noise = noise or NoiseSpec()
    text = (
        f"wavelength={cfg.wavelength!r};pixel_pitch={cfg.pixel_pitch!r};"
        f"distance={cfg.distance!r};grid={cfg.grid};pad_factor={cfg.pad_factor};"
        f"pad_mode={cfg.pad_mode};noise_sigma={noise.sigma!r};quantize={noise.quantize}"
    )
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def calibrate_phase(gray, grid: int | None = None) -> np.ndarray:
    """Map 8-bit SLM drive values to phase delay, linearly onto [-pi, 0].

    >>> calibrate_phase(np.array([[0, 51], [255, 0]]))[1, 0] == -np.pi
    True
    """
    gray = check_gray_image(gray)
    if grid is not None and gray.shape != (grid, grid):
        raise ValueError(
            f"image is {gray.shape[0]}x{gray.shape[1]} but the simulation grid is {grid}x{grid}"
        )
    return -np.pi * gray / 255.0


def phase_to_field(phase) -> np.ndarray:
    phase = np.asarray(phase, dtype=np.float64)
    return np.exp(1j * phase)


def transfer_function(cfg: PropagationConfig, size: int | None = None) -> np.ndarray:
    """Angular-spectrum transfer function on the padded frequency grid.

    Evanescent frequencies (fx^2 + fy^2 >= 1/lambda^2) are set to exactly 0.
    """
    size = size or cfg.grid * cfg.pad_factor
    f = np.fft.fftfreq(size, d=cfg.pixel_pitch)
    fx2 = f[None, :] ** 2
    fy2 = f[:, None] ** 2
    arg = 1.0 / cfg.wavelength**2 - fx2 - fy2
    propagating = arg > 0
    kz = np.sqrt(np.where(propagating, arg, 0.0))
    return np.where(propagating, np.exp(2j * np.pi * cfg.distance * kz), 0.0)


def _embed(field: np.ndarray, cfg: PropagationConfig) -> tuple[np.ndarray, int]:
    n = cfg.grid
    total = n * cfg.pad_factor
    lo = (total - n) // 2
    hi = total - n - lo
    if total == n:
        return field, 0
    if cfg.pad_mode == "edge":
        return np.pad(field, ((lo, hi), (lo, hi)), mode="edge"), lo
    return np.pad(field, ((lo, hi), (lo, hi)), mode="constant"), lo


def propagate(field, cfg: PropagationConfig) -> np.ndarray:
    """Propagate a complex field by ``cfg.distance`` with the angular spectrum method.

    The field is embedded in the padded window, transformed, multiplied by
    :func:`transfer_function`, transformed back and cropped to ``cfg.grid``.
    """
    field = np.asarray(field, dtype=np.complex128)
    check_square(field, cfg.grid, what="field")
    check_finite(field, what="field")
    padded, lo = _embed(field, cfg)
    spectrum = np.fft.fft2(padded)
    out = np.fft.ifft2(spectrum * transfer_function(cfg, padded.shape[0]))
    n = cfg.grid
    return out[lo : lo + n, lo : lo + n]


def intensity(field) -> np.ndarray:
    field = np.asarray(field)
    return field.real**2 + field.imag**2


def quantize_8bit(raw: np.ndarray) -> np.ndarray:
    """Normalize to the frame maximum and round to 0..255 (as float)."""
    peak = raw.max()
    if peak <= 0:
        return np.zeros_like(raw)
    return np.round(raw / peak * 255.0)


def simulate_measurement(
    gray, cfg: PropagationConfig, noise: NoiseSpec | None = None, rng=None
) -> np.ndarray:
    """Raw sensor image for one SLM drive image.

    ``rng`` overrides the generator built from ``noise.seed``; batch callers
    pass per-sample generators so results do not depend on call order.
    """
    phase = calibrate_phase(gray, cfg.grid)
    raw = intensity(propagate(phase_to_field(phase), cfg))
    noise = noise or NoiseSpec()
    if noise.sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(noise.seed)
        raw = np.clip(raw + rng.normal(0.0, noise.sigma, size=raw.shape), 0.0, None)
    if noise.quantize:
        raw = quantize_8bit(raw)
    return raw


class DiffractionSimulator(TransformerMixin, BaseEstimator):
    """Transformer wrapping :func:`simulate_measurement` for image batches.

    ``transform`` maps an ``(n, grid, grid)`` stack of 8-bit images to raw
    intensities of the same shape.  It is stateless; ``fit`` only validates.
    """

    def __init__(
        self,
        wavelength=632.8e-9,
        pixel_pitch=20e-6,
        distance=0.375,
        grid=64,
        pad_factor=2,
        pad_mode="edge",
        noise_sigma=0.0,
        quantize=False,
        seed=0,
    ):
        self.wavelength = wavelength
        self.pixel_pitch = pixel_pitch
        self.distance = distance
        self.grid = grid
        self.pad_factor = pad_factor
        self.pad_mode = pad_mode
        self.noise_sigma = noise_sigma
        self.quantize = quantize
        self.seed = seed

    @property
    def config_(self) -> PropagationConfig:
        return PropagationConfig(
            wavelength=self.wavelength,
            pixel_pitch=self.pixel_pitch,
            distance=self.distance,
            grid=self.grid,
            pad_factor=self.pad_factor,
            pad_mode=self.pad_mode,
        )

    @property
    def noise_(self) -> NoiseSpec:
        return NoiseSpec(sigma=self.noise_sigma, quantize=self.quantize, seed=self.seed)

    def fit(self, X=None, y=None):
        self.config_  # validates
        self.noise_
        return self

    def transform(self, X):
        X = np.asarray(X)
        single = X.ndim == 2
        if single:
            X = X[None]
        cfg, noise = self.config_, self.noise_
        out = np.empty(X.shape, dtype=np.float64)
        for i, img in enumerate(X):
            rng = np.random.default_rng([noise.seed, i])
            out[i] = simulate_measurement(img, cfg, noise, rng=rng)
        return out[0] if single else out
