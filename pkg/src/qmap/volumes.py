"""Volumetric data types, the QVOL binary container, and intensity normalization.

All 4-D arrays are indexed (x, y, z, echo); 3-D arrays (x, y, z). Echo times
are in milliseconds, decay rates in 1/ms.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

QVOL_MAGIC = b"QVM1"


class QvolError(ValueError):
    """Malformed or inconsistent QVOL file."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite payload")


@dataclass(frozen=True)
class EchoStack:
    """Multi-echo magnitude volume, shape (X, Y, Z, N)."""

    data: np.ndarray
    echo_times_ms: np.ndarray
    norm_factor: float | None = None

    def __post_init__(self):
        data = _freeze(np.asarray(self.data, dtype=np.float32))
        tes = _freeze(np.asarray(self.echo_times_ms, dtype=np.float64))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "echo_times_ms", tes)
        if data.ndim != 4:
            raise ValueError("EchoStack data must be 4-D (X, Y, Z, N)")
        if tes.ndim != 1 or len(tes) != data.shape[3]:
            raise ValueError("echo_times_ms length must match echo axis")
        if len(tes) and (tes[0] <= 0 or np.any(np.diff(tes) <= 0)):
            raise ValueError("echo_times_ms must be strictly increasing and > 0")
        _check_finite("EchoStack", data)
        if np.any(data < 0):
            raise ValueError("EchoStack: magnitudes must be >= 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_echoes(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class Mask:
    """Boolean tissue mask, shape (X, Y, Z)."""

    values: np.ndarray

    def __post_init__(self):
        v = _freeze(np.asarray(self.values, dtype=bool))
        object.__setattr__(self, "values", v)
        if v.ndim != 3:
            raise ValueError("Mask must be 3-D")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_true(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class ParamMap:
    """Paired S0 / R2* volumes with a tissue mask; 0 outside the mask."""

    s0: np.ndarray
    r2star: np.ndarray
    mask: np.ndarray
    norm_factor: float | None = None

    def __post_init__(self):
        s0 = _freeze(np.asarray(self.s0, dtype=np.float32))
        r2 = _freeze(np.asarray(self.r2star, dtype=np.float32))
        m = _freeze(np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "s0", s0)
        object.__setattr__(self, "r2star", r2)
        object.__setattr__(self, "mask", m)
        if not (s0.ndim == 3 and s0.shape == r2.shape == m.shape):
            raise ValueError("ParamMap arrays must share a 3-D shape")
        _check_finite("ParamMap.s0", s0)
        _check_finite("ParamMap.r2star", r2)
        if np.any(s0[m] < 0) or np.any(r2[m] < 0):
            raise ValueError("ParamMap: negative values inside mask")
        out = ~m
        if np.any(s0[out] != 0) or np.any(r2[out] != 0):
            raise ValueError("ParamMap: out-of-mask voxels must be 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.s0.shape


@dataclass(frozen=True)
class FMap:
    """Per-voxel, per-echo |F(t)| values in [0, 1], shape (X, Y, Z, N)."""

    values: np.ndarray
    echo_times_ms: np.ndarray

    def __post_init__(self):
        v = _freeze(np.asarray(self.values, dtype=np.float32))
        tes = _freeze(np.asarray(self.echo_times_ms, dtype=np.float64))
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "echo_times_ms", tes)
        if v.ndim != 4 or len(tes) != v.shape[3]:
            raise ValueError("FMap must be 4-D with matching echo axis")
        _check_finite("FMap", v)
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("FMap values must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    @property
    def n_echoes(self) -> int:
        return self.values.shape[3]


@dataclass(frozen=True)
class NormRecord:
    """Intensity normalization factor (mean masked echo-1 signal)."""

    norm_factor: float

    def __post_init__(self):
        if not (np.isfinite(self.norm_factor) and self.norm_factor > 0):
            raise ValueError("norm_factor must be finite and > 0")


Volume = EchoStack | ParamMap | FMap | Mask


# ---------------------------------------------------------------------------
# QVOL container
#
# layout: magic "QVM1" | u32 little-endian header length H | H bytes UTF-8
# JSON header | raw payload, index order offset = ((e*Z + z)*Y + y)*X + x
# (x fastest).  "param" stores s0 then r2star then mask (u8) concatenated.
# ---------------------------------------------------------------------------

def _to_payload(a: np.ndarray, dtype) -> bytes:
    # Fortran order over (X, Y, Z[, E]) gives x fastest / echo slowest.
    return np.asarray(a, dtype=dtype).ravel(order="F").tobytes()


def _from_payload(buf: bytes, shape: tuple, dtype) -> np.ndarray:
    n = int(np.prod(shape))
    a = np.frombuffer(buf, dtype=dtype, count=n)
    return a.reshape(shape, order="F")


def write_qvol(path, volume: Volume) -> None:
    """Serialize a volume to a QVOL file; refuses non-finite payloads."""
    if isinstance(volume, EchoStack):
        header = {
            "kind": "mgre",
            "dims": list(volume.dims),
            "n_echoes": volume.n_echoes,
            "echo_times_ms": list(map(float, volume.echo_times_ms)),
            "dtype": "f32",
        }
        if volume.norm_factor is not None:
            header["norm_factor"] = float(volume.norm_factor)
        payload = _to_payload(volume.data, "<f4")
    elif isinstance(volume, FMap):
        header = {
            "kind": "fmap",
            "dims": list(volume.dims),
            "n_echoes": volume.n_echoes,
            "echo_times_ms": list(map(float, volume.echo_times_ms)),
            "dtype": "f32",
        }
        payload = _to_payload(volume.values, "<f4")
    elif isinstance(volume, ParamMap):
        header = {"kind": "param", "dims": list(volume.dims), "dtype": "f32"}
        if volume.norm_factor is not None:
            header["norm_factor"] = float(volume.norm_factor)
        payload = (
            _to_payload(volume.s0, "<f4")
            + _to_payload(volume.r2star, "<f4")
            + _to_payload(volume.mask, "u1")
        )
    elif isinstance(volume, Mask):
        header = {"kind": "mask", "dims": list(volume.dims), "dtype": "u8"}
        payload = _to_payload(volume.values, "u1")
    else:
        raise TypeError(f"unsupported volume type {type(volume).__name__}")

    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(QVOL_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(payload)


def read_qvol(path) -> Volume:
    """Load a QVOL file into the typed volume named by its header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != QVOL_MAGIC:
        raise QvolError("bad magic")
    if len(raw) < 8:
        raise QvolError("truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise QvolError("truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise QvolError(f"bad header: {exc}") from exc
    payload = raw[8 + hlen :]

    kind = header.get("kind")
    dims = tuple(header.get("dims", ()))
    if len(dims) != 3:
        raise QvolError("header dims must have 3 entries")
    nvox = int(np.prod(dims))

    if kind == "mgre":
        n = int(header["n_echoes"])
        if len(payload) != nvox * n * 4:
            raise QvolError("payload length mismatch")
        data = _from_payload(payload, dims + (n,), "<f4")
        return EchoStack(data, header["echo_times_ms"],
                         norm_factor=header.get("norm_factor"))
    if kind == "fmap":
        n = int(header["n_echoes"])
        if len(payload) != nvox * n * 4:
            raise QvolError("payload length mismatch")
        data = _from_payload(payload, dims + (n,), "<f4")
        return FMap(data, header["echo_times_ms"])
    if kind == "param":
        if len(payload) != nvox * 4 * 2 + nvox:
            raise QvolError("payload length mismatch")
        s0 = _from_payload(payload[: nvox * 4], dims, "<f4")
        r2 = _from_payload(payload[nvox * 4 : nvox * 8], dims, "<f4")
        mask = _from_payload(payload[nvox * 8 :], dims, "u1").astype(bool)
        return ParamMap(s0, r2, mask, norm_factor=header.get("norm_factor"))
    if kind == "mask":
        if len(payload) != nvox:
            raise QvolError("payload length mismatch")
        return Mask(_from_payload(payload, dims, "u1").astype(bool))
    raise QvolError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def compute_norm_factor(stack: EchoStack, mask: Mask) -> NormRecord:
    """Mean echo-1 signal over masked voxels."""
    if stack.dims != mask.dims:
        raise ValueError("stack/mask dimension mismatch")
    if mask.n_true == 0:
        raise ValueError("empty mask")
    factor = float(stack.data[..., 0][mask.values].astype(np.float64).mean())
    if factor <= 0:
        raise ValueError("normalization undefined: zero mean echo-1 signal")
    return NormRecord(factor)


def normalize(stack: EchoStack, norm: NormRecord) -> EchoStack:
    """Divide every sample by the normalization factor; echo times unchanged."""
    data = (stack.data.astype(np.float64) / norm.norm_factor).astype(np.float32)
    return EchoStack(data, stack.echo_times_ms, norm_factor=norm.norm_factor)


def denormalize_s0(pmap: ParamMap, norm: NormRecord) -> ParamMap:
    """Rescale a normalized S0 map back to raw intensity units."""
    s0 = (pmap.s0.astype(np.float64) * norm.norm_factor).astype(np.float32)
    return ParamMap(s0, pmap.r2star, pmap.mask)
