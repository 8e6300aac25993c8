"""Synthetic brain-like phantoms, clean signal synthesis, calibrated noise,
and train/val/test dataset manifests.

Everything here is a pure function of its seed: regenerating with the same
spec reproduces identical bytes on disk.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .signal_model import InhomogeneityField, forward_magnitude_volume, make_fmap_sinc
from .volumes import EchoStack, FMap, Mask, ParamMap, write_qvol

DEFAULT_ECHO_TIMES_MS = tuple(float(4 * (k + 1)) for k in range(10))  # 4..40 ms


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 12)
    n_regions: int = 6
    r2_range: tuple[float, float] = (0.010, 0.060)  # 1/ms
    s0_range: tuple[float, float] = (0.5, 1.5)
    texture_amplitude: float = 0.1
    g_range: tuple[float, float] = (0.0, 0.06)  # 1/ms
    seed: int = 0

    def __post_init__(self):
        if any(d < m for d, m in zip(self.dims, (16, 16, 2))):
            raise ValueError("dims must be at least (16, 16, 2)")
        for lo, hi in (self.r2_range, self.s0_range):
            if not (0 < lo <= hi):
                raise ValueError("ranges must be positive and ordered")
        if not (0 <= self.g_range[0] <= self.g_range[1]):
            raise ValueError("g_range must be non-negative and ordered")


@dataclass(frozen=True)
class NoiseSpec:
    snr: float
    seed: int = 0

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError("snr must be > 0")


@dataclass(frozen=True)
class DatasetManifest:
    global_seed: int
    echo_times_ms: tuple[float, ...]
    entries: list[dict] = field(default_factory=list)

    def split(self, name: str) -> list[dict]:
        return [e for e in self.entries if e["split"] == name]

    def to_json(self) -> str:
        return json.dumps(
            {"global_seed": self.global_seed,
             "echo_times_ms": list(self.echo_times_ms),
             "entries": self.entries},
            indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(d["global_seed"], tuple(d["echo_times_ms"]), d["entries"])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def _smooth_field(rng: np.random.Generator, dims, coarse: int = 8) -> np.ndarray:
    """Smooth zero-mean random field in [-1, 1] from an upsampled coarse grid."""
    shape = tuple(max(2, d // coarse) for d in dims)
    noise = rng.standard_normal(shape)
    zoom = [d / s for d, s in zip(dims, shape)]
    fld = ndimage.zoom(noise, zoom, order=3, mode="nearest")
    fld = fld[: dims[0], : dims[1], : dims[2]]
    peak = np.abs(fld).max()
    return fld / peak if peak > 0 else fld


def _ellipsoid(dims, center, semi, power: float = 2.0) -> np.ndarray:
    """Superellipsoid mask; power=2 is an ellipsoid, larger powers are boxier."""
    x = np.arange(dims[0])[:, None, None]
    y = np.arange(dims[1])[None, :, None]
    z = np.arange(dims[2])[None, None, :]
    return (np.abs((x - center[0]) / semi[0]) ** power
            + np.abs((y - center[1]) / semi[1]) ** power
            + np.abs((z - center[2]) / semi[2]) ** power) <= 1.0


def make_phantom(spec: PhantomSpec) -> tuple[ParamMap, Mask, InhomogeneityField]:
    """Elliptical-region phantom with smooth texture and a smooth g field."""
    rng = np.random.default_rng(spec.seed)
    X, Y, Z = spec.dims

    center = ((X - 1) / 2, (Y - 1) / 2, (Z - 1) / 2)
    # boxy superellipsoid so tissue fills most of the FOV, as in tightly
    # cropped brain acquisitions; this keeps the volume-mean S0 (which sets
    # the noise sigma) close to the tissue signal level
    brain = _ellipsoid(spec.dims, center, (0.48 * X, 0.48 * Y, 0.49 * Z), power=5.0)

    r2 = np.zeros(spec.dims)
    s0 = np.zeros(spec.dims)
    r2[brain] = rng.uniform(*spec.r2_range)
    s0[brain] = rng.uniform(*spec.s0_range)

    for _ in range(spec.n_regions):
        c = (center[0] + rng.uniform(-0.25, 0.25) * X,
             center[1] + rng.uniform(-0.25, 0.25) * Y,
             center[2] + rng.uniform(-0.2, 0.2) * Z)
        semi = (rng.uniform(0.08, 0.3) * X,
                rng.uniform(0.08, 0.3) * Y,
                rng.uniform(0.15, 0.4) * Z)
        region = _ellipsoid(spec.dims, c, semi) & brain
        r2[region] = rng.uniform(*spec.r2_range)
        s0[region] = rng.uniform(*spec.s0_range)

    if spec.texture_amplitude > 0:
        r2 *= 1.0 + spec.texture_amplitude * _smooth_field(rng, spec.dims)
        s0 *= 1.0 + spec.texture_amplitude * _smooth_field(rng, spec.dims)
    else:
        # keep rng call count independent of the amplitude branch
        _smooth_field(rng, spec.dims)
        _smooth_field(rng, spec.dims)
    r2 = np.clip(r2, 0.0, None)
    s0 = np.clip(s0, 0.0, None)
    r2[~brain] = 0.0
    s0[~brain] = 0.0

    # dephasing grows smoothly toward the inferior boundary (z = 0)
    g_lo, g_hi = spec.g_range
    axial = (Z - 1 - np.arange(Z)) / max(Z - 1, 1)
    mod = 0.85 + 0.15 * _smooth_field(rng, spec.dims)
    g = g_lo + (g_hi - g_lo) * axial[None, None, :] * np.clip(mod, 0.0, 1.0)
    g = np.clip(g, 0.0, g_hi)

    return ParamMap(s0, r2, brain), Mask(brain), InhomogeneityField(g)


def synthesize_mgre(truth: ParamMap, fmap: FMap, echo_times_ms) -> EchoStack:
    """Clean magnitude stack generated from ground-truth maps."""
    return forward_magnitude_volume(truth, fmap, echo_times_ms)


def noise_sigma(truth: ParamMap, snr: float) -> float:
    """sigma = mean S0 over the entire volume divided by SNR."""
    s0_bar = float(truth.s0.astype(np.float64).mean())
    if s0_bar <= 0:
        raise ValueError("zero mean S0; noise level undefined")
    return s0_bar / snr


def add_noise(stack: EchoStack, truth: ParamMap, noise: NoiseSpec) -> EchoStack:
    """Add i.i.d. Gaussian noise at sigma = S0_bar / SNR, clamped at 0."""
    sigma = noise_sigma(truth, noise.snr)
    rng = np.random.default_rng(noise.seed)
    noisy = stack.data.astype(np.float64) + sigma * rng.standard_normal(stack.data.shape)
    return EchoStack(np.clip(noisy, 0.0, None), stack.echo_times_ms)


FIXED_TEST_SNRS = (5.0, 10.0, 15.0)


def build_dataset(n_subjects: int, spec_template: PhantomSpec, copies: int,
                  snr_interval: tuple[float, float],
                  split_counts: tuple[int, int, int], out_dir,
                  echo_times_ms=DEFAULT_ECHO_TIMES_MS) -> DatasetManifest:
    """Materialize phantoms, clean/noisy stacks and a manifest under out_dir.

    Each subject lands in exactly one split. Test subjects additionally get
    fixed-SNR noisy copies at 5/10/15 for the evaluation sets.
    """
    if sum(split_counts) != n_subjects:
        raise ValueError("split counts must sum to n_subjects")
    if copies < 1:
        raise ValueError("copies must be >= 1")
    lo, hi = snr_interval
    if not (0 < lo <= hi):
        raise ValueError("snr_interval must be positive and ordered")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = np.asarray(echo_times_ms, dtype=np.float64)

    splits = (["train"] * split_counts[0] + ["val"] * split_counts[1]
              + ["test"] * split_counts[2])
    global_seed = spec_template.seed
    ss = np.random.SeedSequence(global_seed)
    subject_seeds = ss.spawn(n_subjects)

    entries = []
    for i in range(n_subjects):
        sub_ss = subject_seeds[i]
        phantom_seed, noise_root, snr_seed = [
            int(c.generate_state(1)[0]) for c in sub_ss.spawn(3)]
        spec = replace(spec_template, seed=phantom_seed)
        truth, mask, gfield = make_phantom(spec)
        fmap = make_fmap_sinc(gfield, t)
        clean = synthesize_mgre(truth, fmap, t)

        sid = f"subject_{i:03d}"
        sdir = out_dir / sid
        sdir.mkdir(exist_ok=True)
        write_qvol(sdir / "truth.qvol", truth)
        write_qvol(sdir / "mask.qvol", mask)
        write_qvol(sdir / "fmap.qvol", fmap)
        write_qvol(sdir / "clean.qvol", clean)

        snr_rng = np.random.default_rng(snr_seed)
        noisy = []
        for k in range(copies):
            snr = float(snr_rng.uniform(lo, hi))
            seed = noise_root + k
            stack = add_noise(clean, truth, NoiseSpec(snr, seed))
            rel = f"{sid}/noisy_{k:02d}.qvol"
            write_qvol(out_dir / rel, stack)
            noisy.append({"path": rel, "snr": snr, "seed": seed, "fixed": False})
        if splits[i] == "test":
            for j, snr in enumerate(FIXED_TEST_SNRS):
                seed = noise_root + copies + j
                stack = add_noise(clean, truth, NoiseSpec(snr, seed))
                rel = f"{sid}/noisy_snr{int(snr):02d}.qvol"
                write_qvol(out_dir / rel, stack)
                noisy.append({"path": rel, "snr": snr, "seed": seed, "fixed": True})

        entries.append({
            "id": sid,
            "split": splits[i],
            "clean": f"{sid}/clean.qvol",
            "noisy": noisy,
            "fmap": f"{sid}/fmap.qvol",
            "mask": f"{sid}/mask.qvol",
            "truth": f"{sid}/truth.qvol",
        })

    manifest = DatasetManifest(global_seed, tuple(map(float, t)), entries)
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest
