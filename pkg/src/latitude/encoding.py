"""Sinusoidal positional encoding with a truncated dynamic low-pass filter.

Bands are indexed ``k = 0 .. L-1`` with frequency ``2**k * pi``.  The filter
weight of band ``k`` is 1 while ``k <= alpha * L + alpha0`` and 0 otherwise,
where ``alpha`` is the optimisation progress in ``[0, 1]`` and ``alpha0`` is
the truncation offset in band units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import DomainError


@dataclass(frozen=True)
class EncodingConfig:
    num_bands: int
    include_raw_input: bool = True
    input_dim: int = 3

    @property
    def output_dim(self) -> int:
        return self.input_dim * (2 * self.num_bands + int(self.include_raw_input))


@dataclass(frozen=True)
class FilterSchedule:
    """Snapshot of the filter state for one render call."""

    num_bands: int
    alpha0: float = 0.0
    alpha: float = 1.0
    update_interval: int = 50
    smooth: bool = False

    def weights(self) -> np.ndarray:
        return band_weights(self.alpha, self.alpha0, self.num_bands, smooth=self.smooth)


BOUNDARY_TOL = 1e-9


def cutoff(alpha: float, alpha0: float, num_bands: int) -> float:
    return alpha * num_bands + alpha0


def band_weights(alpha: float, alpha0: float, num_bands: int, smooth: bool = False) -> np.ndarray:
    """Per-band filter weights.

    With ``smooth=True`` each band ramps linearly from 0 to 1 as the cutoff
    sweeps across ``[k, k+1]``; the default is the hard step.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if not 0.0 <= alpha0 <= num_bands:
        raise DomainError(f"alpha0 must lie in [0, {num_bands}], got {alpha0}")
    k = np.arange(num_bands, dtype=np.float64)
    c = cutoff(alpha, alpha0, num_bands)
    if smooth:
        return np.clip(c - k + 1.0, 0.0, 1.0)
    # e.g. 0.1 * 10 + 0.7 * 10 lands a hair below 8; decide as if exact
    return (k <= c + BOUNDARY_TOL).astype(np.float64)


def schedule_alpha(step: int, total_steps: int, interval: int) -> float:
    """Progress ratio, held constant between updates every ``interval`` steps."""
    if total_steps <= 0 or interval < 1:
        raise ValueError("total_steps must be positive and interval >= 1")
    held = (step // interval) * interval
    return float(min(max(held / total_steps, 0.0), 1.0))


def direction_bands(position_bands: int) -> int:
    return math.ceil(position_bands / 2)


def truncate_weights(omega: np.ndarray, num_bands: int) -> np.ndarray:
    """Weights for a shorter encoding (direction uses the leading bands)."""
    return np.asarray(omega)[:num_bands]


def encode(x: np.ndarray, cfg: EncodingConfig, omega: np.ndarray) -> np.ndarray:
    """Encode an ``(n, input_dim)`` array (or a single vector).

    Layout: ``[x, w0*cos(pi x), w0*sin(pi x), w1*cos(2 pi x), ...]``.
    """
    out, _ = encode_with_derivative(x, cfg, omega, derivative=False)
    return out


def encode_with_derivative(x: np.ndarray, cfg: EncodingConfig, omega: np.ndarray, derivative: bool = True):
    """Encoding plus the per-slot derivative with respect to its own input.

    Each output slot depends on exactly one input component, so the
    derivative is returned in the same layout as the encoding.
    """
    x = np.asarray(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    omega = np.asarray(omega)
    if omega.shape != (cfg.num_bands,):
        raise ValueError(f"omega has shape {omega.shape}, expected ({cfg.num_bands},)")
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"input has dim {x.shape[-1]}, expected {cfg.input_dim}")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    freqs = (2.0 ** np.arange(cfg.num_bands) * np.pi).astype(dtype)
    w = omega.astype(dtype)
    arg = x[:, None, :] * freqs[None, :, None]  # (n, L, d)
    c, s = np.cos(arg), np.sin(arg)
    wb = w[None, :, None]
    bands = np.stack([wb * c, wb * s], axis=2)  # (n, L, 2, d)
    n = x.shape[0]
    parts = [bands.reshape(n, -1)]
    if cfg.include_raw_input:
        parts.insert(0, x.astype(dtype))
    out = np.concatenate(parts, axis=1)
    deriv = None
    if derivative:
        fb = (w * freqs)[None, :, None]
        dbands = np.stack([-fb * s, fb * c], axis=2).reshape(n, -1)
        dparts = [dbands]
        if cfg.include_raw_input:
            dparts.insert(0, np.ones_like(x, dtype=dtype))
        deriv = np.concatenate(dparts, axis=1)
    if single:
        out = out[0]
        deriv = None if deriv is None else deriv[0]
    return out, deriv


def slot_input_index(cfg: EncodingConfig) -> np.ndarray:
    """Input component feeding each encoded slot."""
    idx = np.tile(np.arange(cfg.input_dim), 2 * cfg.num_bands)
    if cfg.include_raw_input:
        idx = np.concatenate([np.arange(cfg.input_dim), idx])
    return idx
