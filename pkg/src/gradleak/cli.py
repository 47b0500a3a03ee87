"""Command-line entry point: simulate, attack, lab, eval."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import lab
from .attack import align_gradients, dlg_attack, tgias_ro
from .config import load_config
from .data_io import read_image, read_log, write_image, write_log, write_metrics_csv
from .errors import ConfigError, GradLeakError
from .fl_sim import evaluation_batch, evaluation_batch_tag, run_fedsgd
from .autodiff import forward_loss
from .metrics import match_batch, psnr_for_csv
from .robust import AggregatorKind

log = logging.getLogger("gradleak")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BOUND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.model()
    fed = cfg.federation()
    data = cfg.client_data(spec)
    final, observations = run_fedsgd(fed, spec, data)
    write_log(args.out, observations, spec)
    losses = [forward_loss(spec, final, d.x, d.y) for d in data]
    print(f"model {spec}  rounds {fed.rounds}  records {len(observations)}  "
          f"final mean loss {float(np.mean(losses)):.6f}  log {args.out}")
    return EXIT_OK


def _parse_batch_tag(text: str):
    client, _, tag = text.partition(":")
    if not tag:
        return 0, int(client)
    return int(client), int(tag)


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    spec, observations = read_log(args.log)
    if spec != cfg.model():
        raise ConfigError(f"log was written for {spec}, config describes {cfg.model()}")
    fed = cfg.federation()
    config = cfg.attack(workers=args.workers)
    if args.method in ("dlg", "cosine"):
        config = replace(config, T=1, aggregator=AggregatorKind("mean"), alpha=None)
    if args.method == "cosine":
        config = replace(config, loss="cosine")
    if args.batch_tag is not None:
        client, tag = _parse_batch_tag(args.batch_tag)
        cluster = [i for i, o in enumerate(observations)
                   if o.client == client and evaluation_batch_tag(o) == tag]
        if len(cluster) < config.T:
            raise ConfigError(f"batch {client}:{tag} has {len(cluster)} observations, need T={config.T}")
    else:
        clusters = align_gradients(observations, spec, cfg.cos_threshold, config.batch_size,
                                   config.label_steps, config.seed)
        big = [c for c in clusters if len(c) >= config.T]
        if not big:
            sizes = ", ".join(str(len(c)) for c in clusters)
            raise ConfigError(f"no cluster has T={config.T} members; cluster sizes: [{sizes}]")
        cluster = big[0]
    chosen = sorted(cluster, key=lambda i: (observations[i].round, i))[: config.T]
    obs = [observations[i] for i in chosen]
    start = time.perf_counter()
    if config.T == 1:
        result = dlg_attack(obs[0], spec, config)
    else:
        result = tgias_ro(obs, spec, config)
    wall = time.perf_counter() - start

    out = Path(args.out)
    (out / "recon").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    shape = spec.image_shape()
    x_true, _ = evaluation_batch(obs[0], fed, cfg.client_data(spec))  # evaluation only
    b = config.batch_size
    report = match_batch(result.x.reshape((b,) + shape), x_true.reshape((b,) + shape))
    ext = ".pgm" if shape[0] == 1 else ".ppm"
    for i in range(b):
        rec = result.x[report.permutation[i]].reshape(shape)
        tru = x_true[i].reshape(shape)
        write_image(out / "recon" / f"b0_{i}{ext}", rec)
        write_image(out / "truth" / f"b0_{i}{ext}", tru)
        write_image(out / "pairs" / f"b0_{i}{ext}", np.concatenate([tru, rec], axis=2))
    row = {
        "run_id": cfg.get("output", "run_id", Path(args.config).stem),
        "method": args.method,
        "dataset": cfg.get("output", "dataset", cfg.get("data", "source", "synth")),
        "model": str(spec),
        "batch_size": b,
        "T": config.T,
        "aggregator": str(config.aggregator),
        "dp_sigma": fed.dp_sigma,
        "sparsify_p": fed.sparsify_p,
        "seed": config.seed,
        "mse": report.mean_mse,
        "psnr_db": psnr_for_csv(report.mean_psnr),
        "ssim": report.mean_ssim,
        "wall_time_s": round(wall, 3),
    }
    csv_path = args.csv or cfg.get("output", "csv") or out / "metrics.csv"
    write_metrics_csv(csv_path, [row])
    print(f"{args.method}: observations {chosen}  labels {result.labels.tolist()}  "
          f"psnr {row['psnr_db']:.2f} dB  ssim {row['ssim']:.4f}  -> {out}")
    return EXIT_OK


def cmd_lab(args) -> int:
    if args.sweep != "default":
        raise UsageError(f"unknown sweep {args.sweep!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    thm, claim = lab.theorem1_sweep(families=args.families, seed=args.seed, out_dir=out)
    thm2 = lab.theorem2_sweep(seeds=args.seeds, seed=args.seed)
    with (out / "summary.csv").open("w") as fh:
        fh.write("check,passed,total,worst_margin\n")
        for res in (thm, claim, thm2):
            fh.write(f"{res.label},{res.passed},{res.total},{res.worst_margin!r}\n")
            print(f"{res.label:9s} {res.passed}/{res.total}  worst margin {res.worst_margin:.4g}  "
                  f"{'PASS' if res.ok else 'FAIL'}")
    return EXIT_OK if all(r.ok for r in (thm, claim, thm2)) else EXIT_BOUND


def cmd_eval(args) -> int:
    recon_dir, truth_dir = Path(args.recon), Path(args.truth)
    for d in (recon_dir, truth_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    truth_files = sorted(p for p in truth_dir.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not truth_files:
        raise ConfigError(f"no images in {truth_dir}")
    batches: dict[str, list[Path]] = {}
    for p in truth_files:
        batches.setdefault(p.stem.split("_")[0], []).append(p)
    rows = []
    for batch, files in sorted(batches.items()):
        missing = [p.name for p in files if not (recon_dir / p.name).exists()]
        if missing:
            raise ConfigError(f"reconstruction missing for {', '.join(missing)}")
        truth = np.stack([read_image(p) for p in files])
        recon = np.stack([read_image(recon_dir / p.name) for p in files])
        report = match_batch(recon, truth)
        for i, p in enumerate(files):
            rows.append((batch, p.name, files[report.permutation[i]].name, report.mse[i],
                         psnr_for_csv(report.psnr[i]), report.ssim[i]))
    with Path(args.out).open("w") as fh:
        fh.write("batch,truth_file,recon_file,mse,psnr_db,ssim\n")
        for r in rows:
            fh.write(",".join(map(lambda v: repr(v) if isinstance(v, float) else str(v), r)) + "\n")
    mean = lambda k: float(np.mean([r[k] for r in rows]))
    print(f"{len(rows)} images  mse {mean(3):.6g}  psnr {mean(4):.2f} dB  ssim {mean(5):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradleak", description="Federated gradient-leakage simulation and attacks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run FedSGD and write the server's gradient log")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="gradient log to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="reconstruct a batch from a gradient log")
    p.add_argument("--config", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--method", choices=("dlg", "cosine", "tgias"), default="tgias")
    p.add_argument("--out", required=True, help="output directory for images and metrics")
    p.add_argument("--csv", default=None, help="metrics CSV (default: [output] csv or OUT/metrics.csv)")
    p.add_argument("--batch-tag", default=None,
                   help="evaluation only: attack the batch CLIENT:TAG instead of running alignment")
    p.add_argument("--workers", type=int, default=int(os.environ.get("GRADLEAK_WORKERS", "1")))
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("lab", help="numerical check of the robust-aggregation convergence bounds")
    p.add_argument("--sweep", default="default")
    p.add_argument("--out", required=True)
    p.add_argument("--families", type=int, default=100)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_lab)

    p = sub.add_parser("eval", help="score reconstructed images against ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gradleak: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GradLeakError, OSError) as exc:
        print(f"gradleak: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
