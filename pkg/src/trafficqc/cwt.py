"""Morlet continuous wavelet transform and 64x64 scalogram images."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

IMAGE_SIZE = 64
MORLET_W0 = 5.0
PREFACTORS = ("inverse", "inverse_sqrt")


def morlet(t):
    """Real Morlet mother wavelet ``exp(-t**2/2) * cos(5 t)``."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-0.5 * t * t) * np.cos(MORLET_W0 * t)


@dataclass(frozen=True)
class ScaleGrid:
    scales: np.ndarray

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim != 1 or scales.size == 0:
            raise ValueError("scale grid must be a non-empty 1-D array")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("scales must be finite and positive")
        if np.any(np.diff(scales) <= 0):
            raise ValueError("scales must be strictly increasing")
        scales.setflags(write=False)
        object.__setattr__(self, "scales", scales)

    def __len__(self):
        return self.scales.size


def scale_grid_default() -> ScaleGrid:
    return ScaleGrid(np.arange(1, IMAGE_SIZE + 1, dtype=np.float64))


def default_positions(n: int, dt: float = 1.0, n_columns: int = IMAGE_SIZE) -> np.ndarray:
    """Centers of ``n_columns`` equal bins spanning ``n`` samples."""
    j = np.arange(n_columns, dtype=np.float64)
    return ((j + 0.5) * n / n_columns - 0.5) * dt


def _prefactor(scales: np.ndarray, prefactor: str) -> np.ndarray:
    if prefactor == "inverse":
        return 1.0 / scales
    if prefactor == "inverse_sqrt":
        return 1.0 / np.sqrt(scales)
    raise ValueError(f"unknown prefactor {prefactor!r}; expected one of {PREFACTORS}")


def wavelet_matrix(n: int, grid: ScaleGrid, positions, dt: float = 1.0, prefactor: str = "inverse") -> np.ndarray:
    """Riemann-sum weights W[s, b, n] with C(a_s, b) = sum_n W[s, b, n] f(t_n)."""
    positions = np.asarray(positions, dtype=np.float64)
    t = np.arange(n, dtype=np.float64) * dt
    a = grid.scales[:, None, None]
    w = morlet((t[None, None, :] - positions[None, :, None]) / a)
    return w * (_prefactor(grid.scales, prefactor) * dt)[:, None, None]


@lru_cache(maxsize=8)
def _cached_matrix(n: int, scales: tuple, positions: tuple, dt: float, prefactor: str) -> np.ndarray:
    m = wavelet_matrix(n, ScaleGrid(np.array(scales)), np.array(positions), dt, prefactor)
    m = m.reshape(-1, n)
    m.setflags(write=False)
    return m


def _check_samples(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[-1] < 2:
        raise ValueError("a signal needs at least 2 samples")
    if not np.all(np.isfinite(samples)):
        raise ValueError("signal samples must be finite")
    return samples


def cwt(samples, grid: ScaleGrid, positions, dt: float = 1.0, prefactor: str = "inverse") -> np.ndarray:
    """CWT coefficients of one signal, shape ``(len(positions), len(grid))``."""
    samples = _check_samples(samples)
    if samples.ndim != 1:
        raise ValueError("cwt expects a single 1-D signal")
    positions = np.asarray(positions, dtype=np.float64)
    span = (samples.size - 1) * dt
    if np.any(positions < 0) or np.any(positions > span):
        raise ValueError(f"positions must lie within [0, {span}]")
    m = _cached_matrix(samples.size, tuple(grid.scales), tuple(positions), float(dt), prefactor)
    return (m @ samples).reshape(len(grid), positions.size).T


@dataclass(frozen=True)
class Scalogram:
    pixels: np.ndarray
    raw_min: float
    raw_max: float
    scale_grid: ScaleGrid


def normalize_magnitudes(mags: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(mags.min()), float(mags.max())
    if hi == lo:
        return np.zeros_like(mags), lo, hi
    return (mags - lo) / (hi - lo), lo, hi


def scalogram_magnitudes(batch, dt: float = 1.0, prefactor: str = "inverse") -> np.ndarray:
    """|CWT| on the default grid for a ``(D, N)`` batch; returns ``(D, 64, 64)``.

    Row 0 is the smallest scale, columns follow time.
    """
    batch = _check_samples(np.atleast_2d(batch))
    n = batch.shape[1]
    grid = scale_grid_default()
    positions = default_positions(n, dt)
    m = _cached_matrix(n, tuple(grid.scales), tuple(positions), float(dt), prefactor)
    coeffs = batch @ m.T
    return np.abs(coeffs).reshape(batch.shape[0], len(grid), positions.size)


def render_scalogram(samples, dt: float = 1.0, prefactor: str = "inverse") -> Scalogram:
    samples = _check_samples(samples)
    if samples.shape != (288,):
        raise ValueError(f"render_scalogram expects 288 samples, got shape {samples.shape}")
    pixels, lo, hi = normalize_magnitudes(scalogram_magnitudes(samples, dt, prefactor)[0])
    return Scalogram(pixels, lo, hi, scale_grid_default())


def render_batch(batch, dt: float = 1.0, prefactor: str = "inverse", chunk: int = 512):
    """Normalized images plus per-image raw min/max for a ``(D, 288)`` batch."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    images = np.empty((batch.shape[0], IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    lo = np.empty(batch.shape[0])
    hi = np.empty(batch.shape[0])
    for s in range(0, batch.shape[0], chunk):
        mags = scalogram_magnitudes(batch[s:s + chunk], dt, prefactor)
        for i, m in enumerate(mags):
            images[s + i], lo[s + i], hi[s + i] = normalize_magnitudes(m)
    return images, lo, hi


def write_pgm(path: str | Path, pixels: np.ndarray):
    """8-bit binary portable graymap of an image with values in [0, 1]."""
    pixels = np.asarray(pixels)
    gray = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    gray = np.frombuffer(data[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return gray.astype(np.float64) / maxval
