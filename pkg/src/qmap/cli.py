"""Command-line entry point.

Subcommands: synth, add-noise, fit-nlls, train, infer, eval, compare.
Nontrivial parameters live in a JSON config; flags cover seed, threads,
determinism and output paths. Exit codes: 0 success, 1 runtime failure,
2 config/validation error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, network, nlls, phantom, training, volumes


class ConfigError(Exception):
    pass


def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON config: {exc}") from exc


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("QMAP_THREADS")
    return int(env) if env else 1


def _out_dir(args) -> Path:
    if args.out_dir is None:
        raise ConfigError("--out-dir is required")
    return Path(args.out_dir)


def _fit_config(d: dict) -> nlls.FitConfig:
    return nlls.FitConfig(**{k: d[k] for k in
                             ("max_iters", "grad_tol", "lm_lambda0", "lambda_up",
                              "lambda_down", "r2_max", "fixed_iters") if k in d})


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    spec = phantom.PhantomSpec(
        dims=tuple(cfg.get("dims", (96, 96, 12))),
        n_regions=cfg.get("n_regions", 6),
        r2_range=tuple(cfg.get("r2_range", (0.010, 0.060))),
        s0_range=tuple(cfg.get("s0_range", (0.5, 1.5))),
        texture_amplitude=cfg.get("texture_amplitude", 0.1),
        g_range=tuple(cfg.get("g_range", (0.0, 0.06))),
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
    )
    manifest = phantom.build_dataset(
        n_subjects=cfg.get("n_subjects", 8),
        spec_template=spec,
        copies=cfg.get("copies", 4),
        snr_interval=tuple(cfg.get("snr_interval", (5.0, 20.0))),
        split_counts=tuple(cfg.get("split_counts", (5, 1, 2))),
        out_dir=out,
        echo_times_ms=cfg.get("echo_times_ms", list(phantom.DEFAULT_ECHO_TIMES_MS)),
    )
    print(f"wrote {len(manifest.entries)} subjects to {out}")
    return 0


def cmd_add_noise(args) -> int:
    cfg = _load_config(args.config)
    stack = volumes.read_qvol(cfg["stack"])
    truth = volumes.read_qvol(cfg["truth"])
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    noisy = phantom.add_noise(stack, truth, phantom.NoiseSpec(cfg["snr"], seed))
    volumes.write_qvol(cfg["out"], noisy)
    print(f"wrote {cfg['out']} (SNR={cfg['snr']})")
    return 0


def cmd_fit_nlls(args) -> int:
    cfg = _load_config(args.config)
    stack = volumes.read_qvol(cfg["stack"])
    fmap = volumes.read_qvol(cfg["fmap"])
    mask = volumes.read_qvol(cfg["mask"])
    if mask.n_true == 0:
        raise ConfigError("empty mask")
    fit_cfg = _fit_config(cfg.get("fit", {}))
    if args.fixed_iters:
        fit_cfg = nlls.FitConfig(max_iters=args.fixed_iters, fixed_iters=True,
                                 grad_tol=fit_cfg.grad_tol,
                                 lm_lambda0=fit_cfg.lm_lambda0,
                                 lambda_up=fit_cfg.lambda_up,
                                 lambda_down=fit_cfg.lambda_down,
                                 r2_max=fit_cfg.r2_max)
    result = nlls.fit_volume(stack, fmap, mask, fit_cfg, n_workers=_threads(args))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    volumes.write_qvol(out / "nlls_params.qvol", result.pmap)
    summary = {
        "masked_voxels": mask.n_true,
        "mean_residual_norm": float(result.residual_norm[mask.values].mean()),
        "mean_iters": float(result.iters_used[mask.values].mean()),
    }
    if "truth" in cfg:
        truth = volumes.read_qvol(cfg["truth"])
        summary["re_r2star_percent"] = evaluation.relative_error(result.pmap, truth, mask)
        print(f"RE(r2star) = {summary['re_r2star_percent']:.4f} %")
    (out / "nlls_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {out / 'nlls_params.qvol'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    root = Path(cfg["manifest"]).parent
    manifest = phantom.DatasetManifest.load(cfg["manifest"])
    net_cfg = network.NetConfig(**cfg.get("net", {}))
    tdict = dict(cfg.get("train", {}))
    if "adam_betas" in tdict:
        tdict["adam_betas"] = tuple(tdict["adam_betas"])
    if args.seed is not None:
        tdict["seed"] = args.seed
    if args.deterministic:
        tdict["deterministic"] = True
    train_cfg = training.TrainConfig(**tdict)
    out = _out_dir(args)
    ckpt, report = training.train(manifest, net_cfg, train_cfg, root, out_dir=out)
    print(f"final train loss {report.epoch_losses[-1]:.6g}, "
          f"best val RE {ckpt.meta.get('best_val_re', float('nan')):.2f} %")
    print(f"wrote {report.checkpoint_path}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    stack = volumes.read_qvol(cfg["stack"])
    ckpt = network.load_checkpoint(cfg["checkpoint"])
    mask = volumes.read_qvol(cfg["mask"]) if "mask" in cfg else None
    if mask is not None:
        norm = volumes.compute_norm_factor(stack, mask)
    else:
        norm = volumes.compute_norm_factor(stack, volumes.Mask(np.ones(stack.dims, bool)))
    pmap = network.net_infer_volume(ckpt, stack, norm, mask)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    volumes.write_qvol(out / "net_params.qvol", pmap)
    if cfg.get("denormalize_s0", True):
        volumes.write_qvol(out / "net_params_raw_s0.qvol",
                           volumes.denormalize_s0(pmap, norm))
    print(f"wrote {out / 'net_params.qvol'} (norm_factor={norm.norm_factor:.6g})")
    return 0


def _eval_methods(cfg: dict) -> tuple[list[dict], list[str]]:
    methods, skipped = [], []
    for m in cfg.get("methods", [{"name": "nlls", "kind": "nlls"}]):
        if m["kind"] == "net":
            path = Path(m["checkpoint"])
            if not path.exists():
                skipped.append(m["name"])
                continue
            methods.append({"name": m["name"], "kind": "net",
                            "checkpoint": network.load_checkpoint(path)})
        else:
            methods.append({"name": m["name"], "kind": "nlls"})
    return methods, skipped


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    manifest = phantom.DatasetManifest.load(cfg["manifest"])
    root = Path(cfg["manifest"]).parent
    methods, skipped = _eval_methods(cfg)
    for name in skipped:
        print(f"warning: checkpoint missing for method {name!r}, skipped", file=sys.stderr)
    report = evaluation.benchmark_table(
        manifest, methods, root,
        snr_sets=tuple(cfg.get("snr_sets", (5.0, 10.0, 15.0))),
        fit_cfg=_fit_config(cfg.get("fit", {})),
        n_workers=_threads(args))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "re_report.csv")
    table = report.format_table()
    (out / "re_table.txt").write_text(table)
    print(table)
    if cfg.get("export_png", False):
        _export_eval_pngs(manifest, root, out)
    return 0


def _export_eval_pngs(manifest, root, out):
    # r2star rendered in 1/s with a [0, 60] 1/s window
    for entry in manifest.split("test"):
        truth = volumes.read_qvol(root / entry["truth"])
        z = truth.dims[2] // 2
        evaluation.export_png(truth.r2star[:, :, z] * 1000.0, (0.0, 60.0),
                              out / f"{entry['id']}_truth_r2star.png")


def cmd_compare(args) -> int:
    rc = cmd_eval(args)
    if rc != 0:
        return rc
    cfg = _load_config(args.config)
    manifest = phantom.DatasetManifest.load(cfg["manifest"])
    root = Path(cfg["manifest"]).parent
    methods, _ = _eval_methods(cfg)
    nets = [m for m in methods if m["kind"] == "net"]
    if not nets:
        print("no network method configured; skipping timing", file=sys.stderr)
        return 0
    entry = manifest.split("test")[0]
    stack = volumes.read_qvol(root / entry["noisy"][0]["path"])
    fmap = volumes.read_qvol(root / entry["fmap"])
    mask = volumes.read_qvol(root / entry["mask"])
    timing = evaluation.timing_benchmark(stack, fmap, mask, nets[0]["checkpoint"],
                                         _fit_config(cfg.get("fit", {})),
                                         n_workers=_threads(args))
    out = _out_dir(args)
    (out / "timing.json").write_text(json.dumps(timing, indent=2))
    print(f"NLLS {timing['nlls_seconds']:.2f} s  vs  net {timing['net_seconds']:.2f} s  "
          f"(speedup {timing['speedup']:.1f}x)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmap",
                                description="R2* mapping: NLLS baseline and CNN estimator")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker count (fallback: QMAP_THREADS env var, then 1)")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out-dir", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, needs_cfg in (
        ("synth", cmd_synth, True),
        ("add-noise", cmd_add_noise, True),
        ("fit-nlls", cmd_fit_nlls, True),
        ("train", cmd_train, True),
        ("infer", cmd_infer, True),
        ("eval", cmd_eval, True),
        ("compare", cmd_compare, True),
    ):
        sp = sub.add_parser(name)
        if needs_cfg:
            sp.add_argument("config", help="JSON config path")
        if name == "fit-nlls":
            sp.add_argument("--fixed-iters", type=int, default=None,
                            help="run exactly this many LM iterations per voxel")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
