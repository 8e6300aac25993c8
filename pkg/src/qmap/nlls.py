"""Voxel-wise nonlinear least-squares estimation of (S0, R2*).

Levenberg-Marquardt with multiplicative damping, log-linear initialization,
and box projection to physical bounds. The batch core is fully elementwise
per voxel, so results are identical regardless of chunking or worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .volumes import EchoStack, FMap, Mask, ParamMap

_EPS = 1e-6  # usability threshold for log-linear init
_FALLBACK_R2 = 0.02  # 1/ms


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 400
    grad_tol: float = 1e-10  # relative squared-residual change
    lm_lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    r2_max: float = 0.5  # 1/ms
    fixed_iters: bool = False  # run exactly max_iters, no early stop

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.grad_tol <= 0 or self.lm_lambda0 <= 0 or self.r2_max <= 0:
            raise ValueError("tolerances and bounds must be > 0")


@dataclass(frozen=True)
class VoxelFit:
    s0: float
    r2star: float
    residual_norm: float
    iters: int
    degenerate: bool


@dataclass(frozen=True)
class FitResult:
    pmap: ParamMap
    residual_norm: np.ndarray  # (X, Y, Z)
    iters_used: np.ndarray  # (X, Y, Z) int32


def _init_loglinear_batch(s, f, t, r2_max):
    """Vectorized OLS of ln(s/f) vs t. Returns (s0, r2, degenerate)."""
    usable = (s > _EPS) & (f > _EPS)
    n = usable.sum(axis=1)
    ok = n >= 2

    w = usable.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(usable, np.log(np.where(usable, s / np.maximum(f, _EPS), 1.0)), 0.0)
    nn = np.maximum(n, 1).astype(np.float64)
    tm = (w * t).sum(axis=1) / nn
    ym = y.sum(axis=1) / nn
    dt = (t - tm[:, None]) * w
    var = (dt * dt).sum(axis=1)
    cov = (dt * (y - ym[:, None])).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(var > 0, cov / np.where(var > 0, var, 1.0), 0.0)
    r2 = np.clip(-slope, 0.0, r2_max)
    intercept = ym - slope * tm
    s0 = np.exp(intercept)

    # fallback: fewer than 2 usable echoes
    fb_s0 = s[:, 0] / np.maximum(f[:, 0], _EPS)
    s0 = np.where(ok, s0, fb_s0)
    r2 = np.where(ok, r2, _FALLBACK_R2)
    degenerate = n == 0
    return np.maximum(s0, 0.0), r2, degenerate


def init_loglinear(signal, f, echo_times_ms, r2_max: float = 0.5):
    """Log-linear least-squares initializer for a single voxel.

    Returns (s0, r2star, degenerate). Falls back to (s1/f1, 0.02 /ms) when
    fewer than 2 echoes are usable; degenerate means no usable echo at all.
    """
    s = np.asarray(signal, dtype=np.float64)[None, :]
    fv = np.asarray(f, dtype=np.float64)[None, :]
    t = np.asarray(echo_times_ms, dtype=np.float64)
    s0, r2, deg = _init_loglinear_batch(s, fv, t, r2_max)
    return float(s0[0]), float(r2[0]), bool(deg[0])


def _fit_batch(s, f, t, cfg: FitConfig):
    """LM over a (V, N) batch. All updates are elementwise per voxel."""
    V = s.shape[0]
    s0, r2, degenerate = _init_loglinear_batch(s, f, t, cfg.r2_max)
    s0 = np.clip(s0, 0.0, None)
    r2 = np.clip(r2, 0.0, cfg.r2_max)

    # all-zero voxels: sentinel (0, 0), no iterations
    zero = ~np.any(s > 0, axis=1)
    s0[zero] = 0.0
    r2[zero] = 0.0

    lam = np.full(V, cfg.lm_lambda0)
    iters = np.zeros(V, dtype=np.int32)
    active = ~zero

    def model(a, b):
        return a[:, None] * np.exp(-b[:, None] * t) * f

    resid = model(s0, r2) - s
    sse = (resid * resid).sum(axis=1)

    for _ in range(cfg.max_iters):
        if not active.any():
            break
        decay = np.exp(-r2[:, None] * t) * f  # ds/ds0
        j1 = -t * s0[:, None] * decay  # ds/dr2
        a = (decay * decay).sum(axis=1)
        b = (decay * j1).sum(axis=1)
        c = (j1 * j1).sum(axis=1)
        g0 = (decay * resid).sum(axis=1)
        g1 = (j1 * resid).sum(axis=1)

        ad = a * (1.0 + lam)
        cd = c * (1.0 + lam)
        det = ad * cd - b * b
        solvable = det > 1e-300
        detv = np.where(solvable, det, 1.0)
        d0 = (-g0 * cd + g1 * b) / detv
        d1 = (-g1 * ad + g0 * b) / detv

        s0_new = np.clip(s0 + d0, 0.0, None)
        r2_new = np.clip(r2 + d1, 0.0, cfg.r2_max)
        resid_new = model(s0_new, r2_new) - s
        sse_new = (resid_new * resid_new).sum(axis=1)

        accept = active & solvable & (sse_new < sse)
        rel_drop = np.where(accept, (sse - sse_new) / np.maximum(sse, 1e-300), 0.0)

        s0 = np.where(accept, s0_new, s0)
        r2 = np.where(accept, r2_new, r2)
        resid = np.where(accept[:, None], resid_new, resid)
        sse = np.where(accept, sse_new, sse)
        lam = np.where(accept, np.maximum(lam * cfg.lambda_down, 1e-12),
                       np.where(active, np.minimum(lam * cfg.lambda_up, 1e12), lam))
        iters += active.astype(np.int32)

        if not cfg.fixed_iters:
            converged = accept & ((rel_drop < cfg.grad_tol) | (sse_new == 0.0))
            active = active & ~converged

    resnorm = np.sqrt(sse)
    return s0, r2, resnorm, iters, degenerate | zero


def fit_voxel(signal, f, echo_times_ms, cfg: FitConfig = FitConfig()) -> VoxelFit:
    """Fit a single voxel's decay curve."""
    s = np.asarray(signal, dtype=np.float64)
    fv = np.asarray(f, dtype=np.float64)
    t = np.asarray(echo_times_ms, dtype=np.float64)
    if s.shape != fv.shape or s.shape != t.shape:
        raise ValueError("signal, f and echo_times_ms lengths differ")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite signal")
    s0, r2, rn, it, deg = _fit_batch(s[None, :], fv[None, :], t, cfg)
    return VoxelFit(float(s0[0]), float(r2[0]), float(rn[0]), int(it[0]), bool(deg[0]))


def fit_volume(stack: EchoStack, fmap: FMap, mask: Mask,
               cfg: FitConfig = FitConfig(), n_workers: int = 1) -> FitResult:
    """Independent voxel-wise fit over all masked voxels.

    Output is deterministic and identical for any worker count since each
    voxel is processed by the same elementwise arithmetic.
    """
    if not (stack.dims == fmap.dims == mask.dims):
        raise ValueError("stack/fmap/mask dimension mismatch")
    if stack.n_echoes != fmap.n_echoes:
        raise ValueError("stack/fmap echo count mismatch")

    idx = np.flatnonzero(mask.values.reshape(-1))
    t = stack.echo_times_ms
    s = stack.data.reshape(-1, stack.n_echoes)[idx].astype(np.float64)
    f = fmap.values.reshape(-1, fmap.n_echoes)[idx].astype(np.float64)

    V = len(idx)
    s0 = np.zeros(V)
    r2 = np.zeros(V)
    rn = np.zeros(V)
    it = np.zeros(V, dtype=np.int32)

    if V:
        n_workers = max(1, int(n_workers))
        chunks = np.array_split(np.arange(V), min(n_workers * 4, V))

        def run(chunk):
            out = _fit_batch(s[chunk], f[chunk], t, cfg)
            s0[chunk], r2[chunk], rn[chunk], it[chunk] = out[:4]

        if n_workers == 1:
            for ch in chunks:
                run(ch)
        else:
            with ThreadPoolExecutor(max_workers=n_workers) as ex:
                list(ex.map(run, chunks))

    dims = stack.dims
    s0_vol = np.zeros(np.prod(dims))
    r2_vol = np.zeros(np.prod(dims))
    rn_vol = np.zeros(np.prod(dims))
    it_vol = np.zeros(np.prod(dims), dtype=np.int32)
    s0_vol[idx], r2_vol[idx], rn_vol[idx], it_vol[idx] = s0, r2, rn, it

    pmap = ParamMap(s0_vol.reshape(dims), r2_vol.reshape(dims), mask.values)
    return FitResult(pmap, rn_vol.reshape(dims), it_vol.reshape(dims))
