"""Slice-wise encoder-decoder estimator: N-echo magnitude slice in,
(S0, R2*) slice out, with softplus outputs so both channels stay positive.

Checkpoints are stored in a QVOL-style container (kind "ckpt"): JSON header
with the architecture config, echo schedule and a weight layout table,
followed by the flat little-endian f32 parameter payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volumes import QVOL_MAGIC, EchoStack, Mask, NormRecord, ParamMap, QvolError, normalize


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 10
    out_channels: int = 2
    depth: int = 3
    base_width: int = 32
    norm: str = "none"  # "none" | "instance"
    # width of an optional per-pixel refinement head: two 1x1 conv layers over
    # the decoder features concatenated with the raw input echoes; 0 disables.
    # Gives cheap per-voxel decay-curve inversion capacity on top of the
    # spatial encoder-decoder.
    head_width: int = 0
    # when set, log(x + 1e-3) of each echo is concatenated to the input
    # channels: the decay rate is a linear slope in log space, which makes
    # the voxel-wise inversion nearly linear and much easier to learn
    log_features: bool = False
    # fixed positive gain after the softplus per output channel; puts the
    # untrained output near the physical scale of (s0, r2star in 1/ms)
    output_scales: tuple[float, ...] = (1.0, 0.05)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "output_scales", tuple(self.output_scales))
        if self.depth < 1 or self.base_width < 4:
            raise ValueError("depth >= 1 and base_width >= 4 required")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.norm not in ("none", "instance"):
            raise ValueError("norm must be 'none' or 'instance'")
        if self.head_width < 0:
            raise ValueError("head_width must be >= 0")
        if len(self.output_scales) != self.out_channels or \
                any(s <= 0 for s in self.output_scales):
            raise ValueError("output_scales must be positive, one per channel")


def _block(cin: int, cout: int, norm: str) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, c in enumerate((cin, cout)):
        layers.append(nn.Conv2d(c if i == 0 else cout, cout, 3,
                                padding=1, padding_mode="reflect"))
        if norm == "instance":
            layers.append(nn.InstanceNorm2d(cout, affine=True))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class SliceNet(nn.Module):
    """2-D U-Net style encoder-decoder with skip connections."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = [cfg.base_width * 2 ** d for d in range(cfg.depth + 1)]
        cin = cfg.in_channels * (2 if cfg.log_features else 1)
        self.enc = nn.ModuleList(
            [_block(cin if d == 0 else w[d - 1], w[d], cfg.norm)
             for d in range(cfg.depth)])
        self.bottleneck = _block(w[cfg.depth - 1], w[cfg.depth], cfg.norm)
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(w[d + 1], w[d], 2, stride=2)
             for d in reversed(range(cfg.depth))])
        self.dec = nn.ModuleList(
            [_block(2 * w[d], w[d], cfg.norm) for d in reversed(range(cfg.depth))])
        if cfg.head_width > 0:
            hw = cfg.head_width
            self.head = nn.Sequential(
                nn.Conv2d(w[0] + cin, hw, 1), nn.ReLU(inplace=True),
                nn.Conv2d(hw, hw, 1), nn.ReLU(inplace=True),
                nn.Conv2d(hw, cfg.out_channels, 1))
        else:
            self.head = nn.Conv2d(w[0], cfg.out_channels, 1)
        self.register_buffer(
            "out_scale",
            torch.tensor(cfg.output_scales, dtype=torch.float32).view(1, -1, 1, 1),
            persistent=False)  # derived from config, not a weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        m = 2 ** self.cfg.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")

        if self.cfg.log_features:
            x = torch.cat([x, torch.log(x.clamp(min=0) + 1e-3)], dim=1)
        raw = x
        skips = []
        for enc in self.enc:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        if self.cfg.head_width > 0:
            x = torch.cat([x, raw], dim=1)
        x = F.softplus(self.head(x)) * self.out_scale
        return x[..., :h, :w]


@dataclass
class NetCheckpoint:
    config: NetConfig
    echo_times_ms: tuple[float, ...]
    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, a in self.state.items():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite weights in {name}")


def build_module(ckpt: NetCheckpoint) -> SliceNet:
    net = SliceNet(ckpt.config)
    ref = net.state_dict()
    if set(ref) != set(ckpt.state):
        raise ValueError("checkpoint weight names do not match the architecture")
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.state.items()})
    net.eval()
    return net


def state_to_numpy(net: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in net.state_dict().items()}


def net_init(config: NetConfig, echo_times_ms) -> NetCheckpoint:
    """Fresh checkpoint with fan-in-scaled random weights; seeded."""
    if len(echo_times_ms) != config.in_channels:
        raise ValueError("echo schedule length must match in_channels")
    torch.manual_seed(config.seed)
    net = SliceNet(config)
    return NetCheckpoint(config, tuple(map(float, echo_times_ms)), state_to_numpy(net))


def parameter_count(ckpt: NetCheckpoint) -> int:
    return int(sum(a.size for a in ckpt.state.values()))


def flatten_state(state: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(state[k], dtype=np.float32).ravel()
                           for k in sorted(state)])


def net_forward(ckpt: NetCheckpoint, slice_xyn: np.ndarray,
                module: SliceNet | None = None) -> np.ndarray:
    """Single-slice inference: (X, Y, N) in, (X, Y, 2) out, both positive."""
    a = np.asarray(slice_xyn, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != ckpt.config.in_channels:
        raise ValueError("slice channel count must match the checkpoint config")
    net = module or build_module(ckpt)
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]
        y = net(x)[0].numpy()
    return y.transpose(1, 2, 0)


def net_infer_volume(ckpt: NetCheckpoint, stack: EchoStack, norm: NormRecord,
                     mask: Mask | None = None) -> ParamMap:
    """Normalize, run the network slice by slice along z, assemble maps.

    No inhomogeneity map is required; S0 comes out in normalized units and
    can be rescaled with denormalize_s0.
    """
    if stack.n_echoes != ckpt.config.in_channels:
        raise ValueError("echo count mismatch with checkpoint")
    if not np.allclose(stack.echo_times_ms, ckpt.echo_times_ms):
        raise ValueError("echo schedule mismatch with checkpoint")
    if mask is not None and mask.dims != stack.dims:
        raise ValueError("mask dimension mismatch")

    data = normalize(stack, norm).data  # (X, Y, Z, N)
    net = build_module(ckpt)
    x = torch.from_numpy(np.ascontiguousarray(data.transpose(2, 3, 0, 1)))  # (Z, N, X, Y)
    with torch.no_grad():
        y = net(x).numpy()  # (Z, 2, X, Y)
    s0 = y[:, 0].transpose(1, 2, 0)
    r2 = y[:, 1].transpose(1, 2, 0)
    m = mask.values if mask is not None else np.ones(stack.dims, dtype=bool)
    s0 = np.where(m, s0, 0.0)
    r2 = np.where(m, r2, 0.0)
    return ParamMap(s0, r2, m, norm_factor=norm.norm_factor)


def net_gradients(ckpt: NetCheckpoint, slice_xyn: np.ndarray, loss_fn) -> dict[str, np.ndarray]:
    """d(loss)/d(theta) for a scalar loss of the network output.

    loss_fn receives the (1, 2, X, Y) output tensor and must return a scalar
    torch tensor. Returns per-parameter gradient arrays keyed like the state.
    """
    net = build_module(ckpt)
    net.train()
    a = np.asarray(slice_xyn, dtype=np.float32)
    x = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]
    loss = loss_fn(net(x))
    if not torch.isfinite(loss):
        raise ValueError("non-finite loss")
    loss.backward()
    grads = {}
    params = dict(net.named_parameters())
    for name in ckpt.state:
        p = params.get(name)
        if p is None:  # buffers carry no gradient
            grads[name] = np.zeros_like(ckpt.state[name])
        else:
            g = p.grad
            grads[name] = (np.zeros_like(ckpt.state[name]) if g is None
                           else g.detach().numpy().astype(np.float32))
    return grads


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, ckpt: NetCheckpoint) -> None:
    layout = []
    offset = 0
    chunks = []
    for name in sorted(ckpt.state):
        a = np.asarray(ckpt.state[name], dtype="<f4")
        layout.append({"name": name, "offset": offset, "shape": list(a.shape)})
        chunks.append(a.tobytes())
        offset += a.size
    header = {
        "kind": "ckpt",
        "config": asdict(ckpt.config),
        "echo_times_ms": list(ckpt.echo_times_ms),
        "layout": layout,
        "meta": ckpt.meta,
        "dtype": "f32",
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(QVOL_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> NetCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != QVOL_MAGIC:
        raise QvolError("bad magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("kind") != "ckpt":
        raise QvolError(f"unknown kind {header.get('kind')!r}")
    payload = raw[8 + hlen :]
    total = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in header["layout"])
    if len(payload) != total * 4:
        raise QvolError("payload length mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    state = {}
    for e in header["layout"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy()
    return NetCheckpoint(NetConfig(**header["config"]),
                         tuple(header["echo_times_ms"]), state,
                         meta=header.get("meta", {}))
