"""Forward model of multi-echo magnitude decay and its analytic derivatives.

The per-voxel magnitude at echo time t is s0 * exp(-r2star * t) * f(t),
where f is the magnitude of the macroscopic-inhomogeneity factor. A complex
variant with the local frequency term is provided for completeness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import EchoStack, FMap, ParamMap


@dataclass(frozen=True)
class VoxelParams:
    s0: float
    r2star: float
    omega: float = 0.0  # rad/ms; unused by the magnitude model

    def __post_init__(self):
        if not (np.isfinite(self.s0) and self.s0 >= 0):
            raise ValueError("s0 must be finite and >= 0")
        if not (np.isfinite(self.r2star) and self.r2star >= 0):
            raise ValueError("r2star must be finite and >= 0")


@dataclass(frozen=True)
class InhomogeneityField:
    """Per-voxel linear dephasing rate g (1/ms), smooth by construction."""

    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        object.__setattr__(self, "g", g)
        if g.ndim != 3:
            raise ValueError("g must be 3-D")
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise ValueError("g must be finite and >= 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.g.shape


def _as_aligned(echo_times_ms, f) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(echo_times_ms, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if t.shape != f.shape:
        raise ValueError("echo_times_ms and f lengths differ")
    return t, f


def forward_magnitude(params: VoxelParams, echo_times_ms, f) -> np.ndarray:
    """Magnitude signal s_n = s0 * exp(-r2star * t_n) * f_n."""
    t, f = _as_aligned(echo_times_ms, f)
    return params.s0 * np.exp(-params.r2star * t) * f


def jacobian_voxel(params: VoxelParams, echo_times_ms, f) -> tuple[np.ndarray, np.ndarray]:
    """(ds/ds0, ds/dr2star) per echo for the magnitude model."""
    t, f = _as_aligned(echo_times_ms, f)
    decay = np.exp(-params.r2star * t) * f
    return decay, -t * params.s0 * decay


def forward_complex(params: VoxelParams, echo_times_ms, f_complex) -> np.ndarray:
    """Complex signal including the exp(-i*omega*t) phase factor."""
    t = np.asarray(echo_times_ms, dtype=np.float64)
    f = np.asarray(f_complex, dtype=np.complex128)
    if t.shape != f.shape:
        raise ValueError("echo_times_ms and f lengths differ")
    return params.s0 * np.exp(-(params.r2star + 1j * params.omega) * t) * f


def forward_magnitude_volume(pmap: ParamMap, fmap: FMap, echo_times_ms) -> EchoStack:
    """Voxel-wise forward model over a whole volume; out-of-mask voxels -> 0."""
    if pmap.dims != fmap.dims:
        raise ValueError("pmap/fmap dimension mismatch")
    t = np.asarray(echo_times_ms, dtype=np.float64)
    if len(t) != fmap.n_echoes:
        raise ValueError("echo_times_ms length must match fmap echoes")
    s0 = pmap.s0.astype(np.float64)[..., None]
    r2 = pmap.r2star.astype(np.float64)[..., None]
    data = s0 * np.exp(-r2 * t) * fmap.values.astype(np.float64)
    data[~pmap.mask] = 0.0
    return EchoStack(data, t)


def make_fmap_sinc(field: InhomogeneityField, echo_times_ms) -> FMap:
    """|sinc(g * t)| per voxel/echo, clamped non-increasing across echoes.

    The running-minimum clamp removes sinc side-lobe rebounds that the
    mono-exponential fit cannot interpret.
    """
    t = np.asarray(echo_times_ms, dtype=np.float64)
    u = field.g[..., None] * t  # (X, Y, Z, N)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.abs(np.where(u == 0.0, 1.0, np.sin(u) / np.where(u == 0.0, 1.0, u)))
    f = np.minimum.accumulate(f, axis=-1)
    return FMap(np.clip(f, 0.0, 1.0), t)
