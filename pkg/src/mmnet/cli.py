"""Command-line entry point: synth / train / track / eval / verify.

Every command writes a manifest next to its output (config echo, seed,
version string) and returns a stable exit code:

    0  success
    1  verification failure
    2  usage or configuration error
    3  I/O or data-format error
    4  numerical divergence during training
    5  checkpoint format error
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, dataio, evalkit, tracker, trainer, verify
from .config import CliConfig, load_cli_config
from .errors import (CheckpointError, ConfigError, DivergenceError,
                     FormatError, InputError)


def version_string() -> str:
    """Package version, decorated git-describe-style when inside a repo."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=here, capture_output=True, text=True,
                             timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except OSError:
        pass
    return __version__


def write_manifest(path: str, command: str, seed, config: dict) -> None:
    payload = {"command": command, "seed": seed, "config": config,
               "version": version_string()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args) -> CliConfig:
    if getattr(args, "config", None):
        return load_cli_config(args.config)
    return CliConfig()


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = dataio.SynthSpec(frames=args.frames, size=args.size,
                            n_distractors=args.distractors)
    record = dataio.synth_sequence(spec, seed=args.seed)
    dataio.save_sequence(record, args.out)
    write_manifest(os.path.join(args.out, "manifest.json"), "synth",
                   args.seed, {"synth": vars(spec)})
    print(f"wrote {len(record)} frames to {args.out}")
    return 0


def load_dataset(path: str) -> list:
    """A dataset directory holds sequence subdirectories (or is itself one)."""
    if os.path.isdir(os.path.join(path, "frames")):
        return [dataio.load_sequence(path)]
    records = []
    for name in sorted(os.listdir(path)):
        sub = os.path.join(path, name)
        if os.path.isdir(os.path.join(sub, "frames")):
            records.append(dataio.load_sequence(sub))
    if not records:
        raise InputError(f"{path}: no sequence directories found")
    return records


def cmd_train(args) -> int:
    cli_cfg = _load_config(args)
    if args.strategy:
        cli_cfg.train["strategy"] = args.strategy
    train_cfg = cli_cfg.train_config()
    net_cfg = cli_cfg.net_config()

    stages = trainer.apply_strategy(train_cfg.strategy)
    used = set()
    for stage in stages:
        used.update(("grayscale", "tir") if stage.data == "mix"
                    else (stage.data,))
    datasets = {}
    for domain, flag, path in (("grayscale", "--data-gray", args.data_gray),
                               ("tir", "--data-tir", args.data_tir)):
        if path is None:
            continue
        if domain not in used:
            warnings.warn(f"strategy {train_cfg.strategy!r} never reads "
                          f"{flag}; ignoring {path}")
            continue
        datasets[domain] = load_dataset(path)
    for domain in sorted(used):
        if domain not in datasets:
            flag = "--data-gray" if domain == "grayscale" else "--data-tir"
            raise ConfigError(
                f"strategy {train_cfg.strategy!r} needs {flag}")

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    ckpt, rows = trainer.train(train_cfg, datasets, out_dir=out_dir,
                               net_cfg=net_cfg)
    latest = os.path.join(out_dir, "checkpoint.mmn")
    if os.path.abspath(args.out) != os.path.abspath(latest):
        os.replace(latest, args.out)
    write_manifest(args.out + ".manifest.json", "train", train_cfg.seed,
                   cli_cfg.echo())
    print(f"trained {len(rows)} batches; final loss {rows[-1][5]:.6g}; "
          f"checkpoint at {args.out}")
    return 0


def cmd_track(args) -> int:
    ckpt = trainer.load_checkpoint(args.model)
    record = dataio.load_sequence(args.sequence)
    cli_cfg = _load_config(args)
    if args.template_mode:
        cli_cfg.tracker["template_mode"] = args.template_mode
    if args.beta is not None:
        cli_cfg.tracker["beta"] = args.beta
    cfg = cli_cfg.tracker_config()
    boxes, scores, fps = tracker.track_sequence(ckpt, record.frames,
                                                record.boxes[0], cfg)
    tracker.write_trajectory(boxes, scores, args.out)
    write_manifest(args.out + ".manifest.json", "track", None,
                   cli_cfg.echo())
    print(f"tracked {len(boxes)} frames at {fps:.1f} fps; "
          f"trajectory at {args.out}")
    return 0


def _eval_ptb(args, workers: int) -> evalkit.MetricReport:
    if len(args.pred) != len(args.gt):
        raise ConfigError(f"{len(args.pred)} --pred files for "
                          f"{len(args.gt)} --gt directories")

    def one(pair):
        pred_path, gt_dir = pair
        boxes, _ = tracker.read_trajectory(pred_path)
        record = dataio.load_sequence(gt_dir)
        return evalkit.evaluate_ptb(boxes, record.boxes, record.name)

    report = evalkit.MetricReport(protocol="ptb")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        report.rows = list(pool.map(one, zip(args.pred, args.gt)))
    return report


def _eval_vot_lite(args, cfg: CliConfig, workers: int) -> evalkit.MetricReport:
    if args.pred:
        raise ConfigError("the vot-lite protocol reruns the tracker; "
                          "pass --model, not --pred")
    if not args.model:
        raise ConfigError("the vot-lite protocol needs --model")
    ckpt = trainer.load_checkpoint(args.model)
    tracker_cfg = cfg.tracker_config()

    def runner(record, start):
        boxes, _, _ = tracker.track_sequence(ckpt, record.frames[start:],
                                             record.boxes[start], tracker_cfg)
        return boxes

    def one(gt_dir):
        record = dataio.load_sequence(gt_dir)
        return evalkit.evaluate_vot_lite(runner, record,
                                         reinit_skip=cfg.eval["reinit_skip"],
                                         burnin=cfg.eval["burnin"])

    report = evalkit.MetricReport(protocol="vot-lite")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        report.rows = list(pool.map(one, args.gt))
    return report


def cmd_eval(args) -> int:
    cli_cfg = _load_config(args)
    if args.protocol:
        cli_cfg.eval["protocol"] = args.protocol
    protocol = cli_cfg.eval["protocol"]
    workers = args.workers or cli_cfg.eval["workers"] or os.cpu_count() or 1
    if protocol == "ptb":
        report = _eval_ptb(args, workers)
    elif protocol == "vot-lite":
        report = _eval_vot_lite(args, cli_cfg, workers)
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    written = evalkit.write_report(report, args.out, figures=not args.no_figures)
    write_manifest(os.path.join(args.out, "manifest.json"), "eval", None,
                   cli_cfg.echo())
    agg = report.aggregate()
    summary = ", ".join(f"{k}={agg[k]:.4f}" for k in evalkit.SCALAR_COLUMNS
                        if not np.isnan(agg[k]))
    print(f"{len(report.rows)} sequences ({protocol}): {summary}")
    print(f"report in {args.out} ({len(written)} files)")
    return 0


def cmd_verify(args) -> int:
    results = verify.run_suites(args.suite)
    print(verify.format_table(results))
    return 0 if all(r.passed for r in results) else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmnet",
        description="multi-task matching network tracker: synthetic data, "
                    "training, tracking, evaluation and self-checks")
    parser.add_argument("--version", action="version",
                        version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with a multi-domain strategy")
    p.add_argument("--config", help="ini file ([backbone]/[train]/...)")
    p.add_argument("--strategy", choices=trainer.STRATEGIES,
                   help="overrides the [train] section")
    p.add_argument("--data-gray", help="grayscale-video dataset directory")
    p.add_argument("--data-tir", help="thermal-infrared dataset directory")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over a sequence")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="trajectory CSV to write")
    p.add_argument("--config", help="ini file ([tracker] section)")
    p.add_argument("--template-mode", choices=("first", "previous", "ema"))
    p.add_argument("--beta", type=float,
                   help="discriminative weight in the fused response")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score trajectories against ground truth")
    p.add_argument("--pred", nargs="*", default=[],
                   help="trajectory CSVs (ptb protocol)")
    p.add_argument("--gt", nargs="+", required=True,
                   help="ground-truth sequence directories")
    p.add_argument("--protocol", choices=("ptb", "vot-lite"))
    p.add_argument("--model", help="checkpoint (vot-lite protocol)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--config", help="ini file ([eval] section)")
    p.add_argument("--workers", type=int,
                   help="parallel sequences (default: logical cores)")
    p.add_argument("--no-figures", action="store_true",
                   help="skip the SVG curve plots")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", default="all",
                   choices=tuple(verify.SUITES) + ("all",))
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 5
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 4
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
