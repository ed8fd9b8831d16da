"""Command-line entry point.

Commands: gen-data, train, sample, eval, gradcheck, bench.  Every config
key is exposed as ``--key value``; a run manifest sufficient to re-run the
command is written atomically next to the artifacts.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from . import _kernels, config, serial
from . import data as D
from . import schedule as S
from . import train as TR
from .audits import run_audits


def _add_config_flags(p: argparse.ArgumentParser):
    for key, default in config.DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, dest=key, action="store_true", default=None)
        else:
            p.add_argument(flag, dest=key, type=str, default=None, metavar="V")


def _resolve(args) -> dict:
    file_kv = config.read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {k: getattr(args, k) for k in config.DEFAULTS if getattr(args, k, None) is not None}
    return config.resolve(file_kv, overrides)


def _hash_inputs(cfg: dict, paths: list[str]) -> str:
    h = hashlib.sha256()
    h.update(config.config_text(cfg).encode())
    for p in sorted(paths):
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as f:
            h.update(f.read())
    return "sha256:" + h.hexdigest()


def write_manifest(outdir, command: str, cfg: dict, input_paths: list[str],
                   artifacts: list[str], started: float) -> str:
    """Atomic run manifest: command, resolved config, hash, artifact paths."""
    lines = [f"command = {command}",
             f"seed = {cfg['seed']}",
             f"wall_clock_s = {time.time() - started:.3f}",
             f"content_hash = {_hash_inputs(cfg, input_paths)}"]
    lines += [f"artifact = {a}" for a in artifacts]
    lines += ["", "# resolved configuration", config.config_text(cfg).rstrip()]
    path = os.path.join(outdir, "run_manifest.txt")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def _dataset_input_paths(datadir) -> list[str]:
    manifest = os.path.join(datadir, "manifest.txt")
    paths = [manifest]
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            paths += [os.path.join(datadir, p) for p in parts[3:]]
    return paths


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    spec = config.dataset_spec(cfg)
    samples, split = D.make_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    manifest = D.save_dataset(args.out, samples, split)
    artifacts = [manifest, os.path.join(args.out, "split.txt")]
    write_manifest(args.out, "gen-data", cfg, [], artifacts, started)
    print(f"wrote {len(samples)} samples to {args.out} "
          f"(corrupted {sum(not s.consistent for s in samples)}, checksum {D.corpus_checksum(samples)[:16]})")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    samples, split = D.load_dataset(args.data)
    train_idx = split.get("train", np.arange(len(samples)))
    tcfg = config.train_config(cfg)
    net = TR.build_network(tcfg.net, seed=tcfg.seed)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.txt")
    with open(log_path, "w") as logf:
        def log(line):
            print(line)
            logf.write(line + "\n")

        history, opt = TR.train(net, samples, train_idx, tcfg, log=log, ckpt_dir=args.out)
        if history:
            log(f"final {TR.log_line(len(history), history[-1])}")
    ckpt = os.path.join(args.out, "ckpt.dpack")
    TR.save_checkpoint(ckpt, net, opt, tcfg.steps)
    write_manifest(args.out, "train", cfg, _dataset_input_paths(args.data),
                   [ckpt, ckpt + ".cfg", log_path], started)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_sample(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    net, _, _ = TR.load_checkpoint(args.ckpt)
    vessel = serial.read_tensor(args.vessel)
    nuclei = serial.read_tensor(args.nuclei) if args.nuclei else None
    yv = vessel.data.reshape(1, 1, *vessel.data.shape[-2:])
    yn = nuclei.data.reshape(1, 1, *nuclei.data.shape[-2:]) if nuclei is not None else None
    sched = S.respace(S.linear_schedule(cfg["timesteps"], cfg["beta_start"], cfg["beta_end"]),
                      cfg["sample_steps"])
    rng = np.random.default_rng(cfg["seed"])
    mode = args.mode if yn is not None else "uni"
    img, stats = TR.sample(net, yv, yn, sched, config.gate_config(cfg), rng, mode=mode)
    os.makedirs(args.out, exist_ok=True)
    out_t = os.path.join(args.out, "generated.dtnsr")
    out_png = os.path.join(args.out, "generated.png")
    serial.write_tensor(out_t, img[0])
    serial.write_png(out_png, img[0, 0])
    inputs = [args.ckpt, args.ckpt + ".cfg", args.vessel] + ([args.nuclei] if args.nuclei else [])
    write_manifest(args.out, "sample", cfg, inputs, [out_t, out_png], started)
    if mode != "uni":
        print(f"generated {out_png} (mean divergence {float(stats.mean_d[0]):.4f})")
    else:
        print(f"generated {out_png} (uni-modal)")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    net, _, _ = TR.load_checkpoint(args.ckpt)
    samples, split = D.load_dataset(args.data)
    idx = split.get(args.split, np.arange(len(samples)))
    if cfg["max_samples"]:
        idx = np.asarray(idx)[: cfg["max_samples"]]
    sched = S.linear_schedule(cfg["timesteps"], cfg["beta_start"], cfg["beta_end"])
    mode = {"dammp": "gated", "uni": "uni", "multi": "multi"}[args.mode]
    report = TR.evaluate(net, samples, idx, config.gate_config(cfg), sched,
                         cfg["sample_steps"], mode=mode, seed=cfg["seed"],
                         batch_size=cfg["eval_batch"])
    os.makedirs(args.out, exist_ok=True)
    txt = os.path.join(args.out, f"report_{args.mode}.txt")
    csv = os.path.join(args.out, f"report_{args.mode}.csv")
    body = report.to_text()
    with open(txt, "w") as f:
        f.write(body)
    with open(csv, "w") as f:
        f.write(report.to_csv())
    write_manifest(args.out, f"eval --mode {args.mode}", cfg,
                   [args.ckpt, args.ckpt + ".cfg"] + _dataset_input_paths(args.data),
                   [txt, csv], started)
    print(body, end="")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    dtype = np.float64 if args.dtype == "float64" else np.float32
    tol = args.tolerance if args.tolerance is not None else (1e-3 if dtype is np.float32 else 1e-5)
    report = run_audits(seed=cfg["seed"], tolerance=tol, dtype=dtype)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_bench(args) -> int:
    from .bench import run_benchmark
    run_benchmark(repeats=args.repeats)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="divgate",
                                     description="two-modality diffusion with divergence-gated fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic two-modality corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate one image from condition tensors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vessel", required=True)
    p.add_argument("--nuclei", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["gated", "uni", "multi"], default="gated")
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score generated images against held-out targets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["dammp", "uni", "multi"], default="dammp")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all layers")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help=f"kernel benchmark (active backend: {_kernels.BACKEND})")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, serial.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
