"""Training objectives and loop for the slice-wise estimator.

Three modes:
  selfsup    - measurement-domain loss: model(net(s)) vs s itself
  denoise    - net sees a noisy stack, model output compared to the clean one
  supervised - image-domain loss against ground-truth parameter maps

Losses are averaged per selected pixel and echo (or channel).
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .evaluation import central_slice_range, slice_relative_errors
from .network import (NetCheckpoint, NetConfig, SliceNet, build_module, net_infer_volume,
                      net_init, state_to_numpy)
from .phantom import DatasetManifest
from .volumes import EchoStack, Mask, NormRecord, ParamMap, compute_norm_factor, read_qvol

MODES = ("selfsup", "denoise", "supervised")
MASK_POLICIES = ("brain_mask", "whole_slice")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "denoise"
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    loss_mask_policy: str = "brain_mask"
    lr_schedule: str = "constant"
    # "none" | "dihedral" (random flips/90-degree rotations plus small
    # circular shifts, applied jointly to input, target, fmap and mask)
    augment: str = "none"
    # exponential moving average of the weights; 0 disables. The averaged
    # weights are what get validated and checkpointed.
    ema_decay: float = 0.0
    val_interval: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.loss_mask_policy not in MASK_POLICIES:
            raise ValueError(f"loss_mask_policy must be one of {MASK_POLICIES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.augment not in ("none", "dihedral"):
            raise ValueError("augment must be 'none' or 'dihedral'")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 1, batch_size >= 1, learning_rate > 0")


@dataclass
class TrainReport:
    mode: str
    epoch_losses: list[float] = field(default_factory=list)
    val_re_percent: list[tuple[int, float]] = field(default_factory=list)
    wall_seconds: float = 0.0
    checkpoint_path: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write_csv(self, path) -> None:
        val = dict(self.val_re_percent)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_re_percent"])
            for i, loss in enumerate(self.epoch_losses):
                w.writerow([i, loss, val.get(i, "")])


# ---------------------------------------------------------------------------
# Loss terms (torch level); pred is (B, 2, X, Y)
# ---------------------------------------------------------------------------

def _model_signal(pred: torch.Tensor, f: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    s0 = pred[:, 0:1]
    r2 = pred[:, 1:2]
    decay = torch.exp(-r2 * t.view(1, -1, 1, 1))
    return s0 * decay * f


def measurement_loss(pred: torch.Tensor, target_signal: torch.Tensor,
                     f: torch.Tensor, t: torch.Tensor, sel: torch.Tensor) -> torch.Tensor:
    """Mean squared measurement-space residual over selected pixels/echoes."""
    resid = (_model_signal(pred, f, t) - target_signal) * sel
    denom = sel.sum() * t.numel()
    return (resid * resid).sum() / torch.clamp(denom, min=1.0)


def supervised_loss(pred: torch.Tensor, truth: torch.Tensor, sel: torch.Tensor) -> torch.Tensor:
    """Channel-balanced image-domain loss: each channel's squared error is
    normalized by that truth channel's mean square over the selection."""
    n = torch.clamp(sel.sum(), min=1.0)
    loss = pred.new_zeros(())
    for c in range(pred.shape[1]):
        err = ((pred[:, c:c + 1] - truth[:, c:c + 1]) * sel)
        mse = (err * err).sum() / n
        scale = ((truth[:, c:c + 1] * sel) ** 2).sum() / n
        loss = loss + mse / torch.clamp(scale, min=1e-12)
    return loss / pred.shape[1]


def _selection(mask_slice: np.ndarray | None, shape, policy: str) -> np.ndarray:
    if policy == "whole_slice" or mask_slice is None:
        return np.ones((1, 1) + tuple(shape), dtype=np.float32)
    return mask_slice.astype(np.float32)[None, None]


def _forward_slice(ckpt: NetCheckpoint, slice_xyn: np.ndarray) -> torch.Tensor:
    net = build_module(ckpt)
    x = torch.from_numpy(np.ascontiguousarray(
        np.asarray(slice_xyn, dtype=np.float32).transpose(2, 0, 1)))[None]
    with torch.no_grad():
        return net(x)


def loss_selfsup(ckpt: NetCheckpoint, slice_xyn, fmap_slice, echo_times_ms,
                 mask_policy: str = "brain_mask", mask_slice=None) -> float:
    """Measurement-domain loss of the net's own reconstruction of a slice."""
    s = np.asarray(slice_xyn, dtype=np.float32)
    f = np.asarray(fmap_slice, dtype=np.float32)
    if s.shape != f.shape:
        raise ValueError("slice/fmap shape mismatch")
    pred = _forward_slice(ckpt, s)
    t = torch.tensor(np.asarray(echo_times_ms, dtype=np.float32))
    sig = torch.from_numpy(s.transpose(2, 0, 1))[None]
    fm = torch.from_numpy(f.transpose(2, 0, 1))[None]
    sel = torch.from_numpy(_selection(mask_slice, s.shape[:2], mask_policy))
    return float(measurement_loss(pred, sig, fm, t, sel))


def loss_denoise(ckpt: NetCheckpoint, noisy_xyn, clean_xyn, fmap_slice, echo_times_ms,
                 mask_policy: str = "brain_mask", mask_slice=None) -> float:
    """Measurement-domain loss: net sees noisy input, model vs clean target."""
    sn = np.asarray(noisy_xyn, dtype=np.float32)
    sc = np.asarray(clean_xyn, dtype=np.float32)
    f = np.asarray(fmap_slice, dtype=np.float32)
    if sn.shape != sc.shape or sn.shape != f.shape:
        raise ValueError("noisy/clean/fmap shape mismatch")
    pred = _forward_slice(ckpt, sn)
    t = torch.tensor(np.asarray(echo_times_ms, dtype=np.float32))
    sig = torch.from_numpy(sc.transpose(2, 0, 1))[None]
    fm = torch.from_numpy(f.transpose(2, 0, 1))[None]
    sel = torch.from_numpy(_selection(mask_slice, sn.shape[:2], mask_policy))
    return float(measurement_loss(pred, sig, fm, t, sel))


def loss_supervised(ckpt: NetCheckpoint, slice_xyn, truth_xy2,
                    mask_policy: str = "brain_mask", mask_slice=None) -> float:
    """Image-domain loss against a ground-truth (s0, r2star) slice."""
    s = np.asarray(slice_xyn, dtype=np.float32)
    p = np.asarray(truth_xy2, dtype=np.float32)
    if p.shape != s.shape[:2] + (2,):
        raise ValueError("truth slice must be (X, Y, 2)")
    pred = _forward_slice(ckpt, s)
    truth = torch.from_numpy(p.transpose(2, 0, 1))[None]
    sel = torch.from_numpy(_selection(mask_slice, s.shape[:2], mask_policy))
    return float(supervised_loss(pred, truth, sel))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _load_samples(manifest: DatasetManifest, root: Path, split: str, mode: str):
    """Stack normalized slice samples for one split.

    Returns dict of arrays: inputs (S, N, X, Y), targets (signal or params),
    fmaps (S, N, X, Y), sel (S, 1, X, Y).
    """
    inputs, targets, fmaps, sels = [], [], [], []
    for entry in manifest.split(split):
        clean = read_qvol(root / entry["clean"])
        fmap = read_qvol(root / entry["fmap"])
        mask = read_qvol(root / entry["mask"])
        truth = read_qvol(root / entry["truth"])
        for item in entry["noisy"]:
            if item.get("fixed"):
                continue
            noisy = read_qvol(root / item["path"])
            norm = compute_norm_factor(noisy, mask)
            inp = (noisy.data.astype(np.float64) / norm.norm_factor).astype(np.float32)
            for z in range(inp.shape[2]):
                inputs.append(inp[:, :, z, :].transpose(2, 0, 1))
                fmaps.append(fmap.values[:, :, z, :].transpose(2, 0, 1))
                sels.append(mask.values[:, :, z][None].astype(np.float32))
                if mode == "selfsup":
                    targets.append(inputs[-1])
                elif mode == "denoise":
                    tgt = (clean.data[:, :, z, :].astype(np.float64)
                           / norm.norm_factor).astype(np.float32)
                    targets.append(tgt.transpose(2, 0, 1))
                else:  # supervised: s0 in normalized units, r2star as-is
                    s0 = (truth.s0[:, :, z].astype(np.float64)
                          / norm.norm_factor).astype(np.float32)
                    targets.append(np.stack([s0, truth.r2star[:, :, z]]))
    if not inputs:
        raise ValueError(f"empty split {split!r}")
    return {k: np.stack(v).astype(np.float32)
            for k, v in (("inputs", inputs), ("targets", targets),
                         ("fmaps", fmaps), ("sel", sels))}


def _validation_re(ckpt: NetCheckpoint, manifest: DatasetManifest, root: Path) -> float:
    """Mean central-window per-slice r2star RE over all non-fixed noisy
    copies of the val split — the same protocol the benchmark reports."""
    res = []
    for entry in manifest.split("val"):
        mask = read_qvol(root / entry["mask"])
        truth = read_qvol(root / entry["truth"])
        lo, hi = central_slice_range(truth.dims[2])
        for item in entry["noisy"]:
            if item.get("fixed"):
                continue
            noisy = read_qvol(root / item["path"])
            norm = compute_norm_factor(noisy, mask)
            est = net_infer_volume(ckpt, noisy, norm, mask)
            res.append(float(np.mean(slice_relative_errors(est, truth, mask, lo, hi))))
    return float(np.mean(res))


def train(manifest: DatasetManifest, net_cfg: NetConfig, cfg: TrainConfig,
          dataset_root, out_dir=None) -> tuple[NetCheckpoint, TrainReport]:
    """Adam over shuffled slice mini-batches; keeps the best-val checkpoint."""
    root = Path(dataset_root)
    t0 = time.perf_counter()

    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    data = _load_samples(manifest, root, "train", cfg.mode)
    t = torch.tensor(np.asarray(manifest.echo_times_ms, dtype=np.float32))

    net = SliceNet(net_cfg)
    torch.manual_seed(net_cfg.seed)
    for m in net.modules():  # re-init under the config seed for reproducibility
        if hasattr(m, "reset_parameters"):
            m.reset_parameters()
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=cfg.epochs, eta_min=cfg.learning_rate * 0.05)

    n = data["inputs"].shape[0]
    inputs = torch.from_numpy(data["inputs"])
    targets = torch.from_numpy(data["targets"])
    fmaps = torch.from_numpy(data["fmaps"])
    sel = torch.from_numpy(data["sel"])

    report = TrainReport(mode=cfg.mode)
    best_re = np.inf
    best_state = state_to_numpy(net)
    ema = None
    if cfg.ema_decay > 0:
        ema = {k: v.detach().clone() for k, v in net.state_dict().items()}

    def eval_state() -> dict[str, np.ndarray]:
        if ema is not None:
            return {k: v.cpu().numpy().astype(np.float32) for k, v in ema.items()}
        return state_to_numpy(net)

    def to_ckpt(state) -> NetCheckpoint:
        return NetCheckpoint(net_cfg, manifest.echo_times_ms, state,
                             meta={"mode": cfg.mode})

    def dihedral(x: torch.Tensor, k: int, flip: bool,
                 shift: tuple[int, int]) -> torch.Tensor:
        if flip:
            x = torch.flip(x, dims=(-1,))
        if k:
            x = torch.rot90(x, k, dims=(-2, -1))
        if shift != (0, 0):
            x = torch.roll(x, shifts=shift, dims=(-2, -1))
        return x

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            x, y, fm, se = inputs[idx], targets[idx], fmaps[idx], sel[idx]
            if cfg.augment == "dihedral":
                k = int(rng.integers(4))
                flip = bool(rng.integers(2))
                shift = (int(rng.integers(-8, 9)), int(rng.integers(-8, 9)))
                x, y, fm, se = (dihedral(a, k, flip, shift)
                                for a in (x, y, fm, se))
            pred = net(x)
            if cfg.mode == "supervised":
                loss = supervised_loss(pred, y, se)
            else:
                loss = measurement_loss(pred, y, fm, t, se)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    for k, v in net.state_dict().items():
                        if v.dtype.is_floating_point:
                            ema[k].mul_(cfg.ema_decay).add_(v, alpha=1 - cfg.ema_decay)
                        else:
                            ema[k].copy_(v)
            total += float(loss.detach())
            batches += 1
        report.epoch_losses.append(total / batches)
        if sched is not None:
            sched.step()

        if (epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1:
            net.eval()
            state = eval_state()
            re = _validation_re(to_ckpt(state), manifest, root)
            net.train()
            report.val_re_percent.append((epoch, re))
            if re < best_re:
                best_re = re
                best_state = state

    ckpt = NetCheckpoint(net_cfg, manifest.echo_times_ms, best_state,
                         meta={"mode": cfg.mode, "best_val_re": best_re,
                               "epochs": cfg.epochs})
    report.wall_seconds = time.perf_counter() - t0

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        from .network import save_checkpoint
        ckpt_path = out / f"{cfg.mode}.ckpt"
        save_checkpoint(ckpt_path, ckpt)
        report.checkpoint_path = str(ckpt_path)
        (out / f"{cfg.mode}_report.json").write_text(report.to_json())
        report.write_csv(out / f"{cfg.mode}_report.csv")
    return ckpt, report
