"""Relative-error metrics, report tables, timing benchmark and PNG export."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .network import NetCheckpoint, net_infer_volume
from .nlls import FitConfig, fit_volume
from .phantom import DatasetManifest
from .volumes import EchoStack, FMap, Mask, ParamMap, compute_norm_factor, read_qvol

# central window reported for the three in vivo slice counts
_SLICE_WINDOWS = {72: (25, 55), 60: (20, 50), 88: (30, 60)}


def relative_error(estimate: ParamMap, truth: ParamMap, mask: Mask) -> float:
    """Euclidean-norm r2star discrepancy over masked voxels, in percent."""
    if not (estimate.dims == truth.dims == mask.dims):
        raise ValueError("dimension mismatch")
    m = mask.values
    t = truth.r2star[m].astype(np.float64)
    e = estimate.r2star[m].astype(np.float64)
    denom = np.linalg.norm(t)
    if denom == 0:
        raise ValueError("zero-norm truth inside mask")
    return float(np.linalg.norm(t - e) / denom * 100.0)


def relative_error_s0(estimate: ParamMap, truth: ParamMap, mask: Mask) -> float:
    m = mask.values
    t = truth.s0[m].astype(np.float64)
    e = estimate.s0[m].astype(np.float64)
    denom = np.linalg.norm(t)
    if denom == 0:
        raise ValueError("zero-norm truth inside mask")
    return float(np.linalg.norm(t - e) / denom * 100.0)


def difference_map(estimate: ParamMap, truth: ParamMap) -> np.ndarray:
    """Voxel-wise |r2star difference|; zero outside the truth mask."""
    if estimate.dims != truth.dims:
        raise ValueError("dimension mismatch")
    d = np.abs(estimate.r2star.astype(np.float64) - truth.r2star.astype(np.float64))
    d[~truth.mask] = 0.0
    return d


def central_slice_range(z: int) -> tuple[int, int]:
    """Central brain-slice window (inclusive indices).

    Reproduces the reported windows for 72/60/88-slice volumes; otherwise a
    ~43%-of-volume central window starting near 0.35*Z.
    """
    if z < 4:
        raise ValueError("need at least 4 slices")
    if z in _SLICE_WINDOWS:
        return _SLICE_WINDOWS[z]
    lo = int(round(0.35 * z))
    hi = min(z - 1, lo + int(round(30 * z / 72)))
    lo = max(0, min(lo, z - 1))
    return lo, hi


def slice_relative_errors(estimate: ParamMap, truth: ParamMap, mask: Mask,
                          lo: int, hi: int) -> list[float]:
    """Per-slice r2star RE over slices lo..hi (inclusive); skips slices with
    no masked voxels or zero truth norm."""
    out = []
    for z in range(lo, hi + 1):
        m = mask.values[:, :, z]
        if not m.any():
            continue
        t = truth.r2star[:, :, z][m].astype(np.float64)
        denom = np.linalg.norm(t)
        if denom == 0:
            continue
        e = estimate.r2star[:, :, z][m].astype(np.float64)
        out.append(float(np.linalg.norm(t - e) / denom * 100.0))
    return out


@dataclass
class REReport:
    rows: list[dict] = field(default_factory=list)  # method, subject, snr, slice_lo, slice_hi, re_percent

    def add(self, method: str, subject: str, snr: float, lo: int, hi: int, re: float):
        self.rows.append({"method": method, "subject": subject, "snr": snr,
                          "slice_lo": lo, "slice_hi": hi, "re_percent": re})

    def mean(self, method: str, snr: float) -> float:
        vals = [r["re_percent"] for r in self.rows
                if r["method"] == method and r["snr"] == snr]
        if not vals:
            raise KeyError(f"no rows for ({method}, SNR={snr})")
        return float(np.mean(vals))

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def snrs(self) -> list[float]:
        return sorted({r["snr"] for r in self.rows})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "subject", "snr",
                                               "slice_lo", "slice_hi", "re_percent"])
            w.writeheader()
            w.writerows(self.rows)

    def format_table(self) -> str:
        snrs = self.snrs()
        buf = io.StringIO()
        head = "Method".ljust(14) + "".join(f"SNR={int(s) if s == int(s) else s}".rjust(12)
                                            for s in snrs)
        buf.write(head + "\n")
        buf.write("-" * len(head) + "\n")
        for method in self.methods():
            cells = "".join(f"{self.mean(method, s):10.1f} %" for s in snrs)
            buf.write(method.ljust(14) + cells + "\n")
        return buf.getvalue()


def benchmark_table(manifest: DatasetManifest, methods: list[dict], dataset_root,
                    snr_sets=(5.0, 10.0, 15.0), fit_cfg: FitConfig = FitConfig(),
                    n_workers: int = 1) -> REReport:
    """Mean per-slice RE on the fixed-SNR test sets for each method.

    methods: [{"name": str, "kind": "nlls"}] or
             [{"name": str, "kind": "net", "checkpoint": NetCheckpoint}]
    """
    root = Path(dataset_root)
    test = manifest.split("test")
    if not test:
        raise ValueError("empty test split")
    report = REReport()
    for entry in test:
        truth = read_qvol(root / entry["truth"])
        mask = read_qvol(root / entry["mask"])
        fmap = read_qvol(root / entry["fmap"])
        lo, hi = central_slice_range(truth.dims[2])
        by_snr = {item["snr"]: item for item in entry["noisy"] if item.get("fixed")}
        for snr in snr_sets:
            if snr not in by_snr:
                raise ValueError(f"no fixed-SNR copy at SNR={snr} for {entry['id']}")
            stack = read_qvol(root / by_snr[snr]["path"])
            for method in methods:
                if method["kind"] == "nlls":
                    est = fit_volume(stack, fmap, mask, fit_cfg, n_workers=n_workers).pmap
                elif method["kind"] == "net":
                    norm = compute_norm_factor(stack, mask)
                    est = net_infer_volume(method["checkpoint"], stack, norm, mask)
                else:
                    raise ValueError(f"unknown method kind {method['kind']!r}")
                res = slice_relative_errors(est, truth, mask, lo, hi)
                report.add(method["name"], entry["id"], snr, lo, hi, float(np.mean(res)))
    return report


def timing_benchmark(stack: EchoStack, fmap: FMap, mask: Mask,
                     ckpt: NetCheckpoint, cfg: FitConfig = FitConfig(),
                     n_workers: int = 1) -> dict:
    """Wall-clock both estimators on the same volume; speedup = nlls / net."""
    t0 = time.perf_counter()
    fit_volume(stack, fmap, mask, cfg, n_workers=n_workers)
    nlls_s = time.perf_counter() - t0

    norm = compute_norm_factor(stack, mask)
    t0 = time.perf_counter()
    net_infer_volume(ckpt, stack, norm, mask)
    net_s = time.perf_counter() - t0
    return {"nlls_seconds": nlls_s, "net_seconds": net_s,
            "speedup": nlls_s / max(net_s, 1e-12)}


def export_png(slice_2d: np.ndarray, window: tuple[float, float], path) -> None:
    """8-bit grayscale PNG with linear windowing, values clamped."""
    lo, hi = window
    if not lo < hi:
        raise ValueError("window lo must be < hi")
    a = np.asarray(slice_2d, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D slice")
    scaled = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    img = Image.fromarray(np.round(scaled * 255.0).astype(np.uint8).T, mode="L")
    img.save(path, format="PNG")
