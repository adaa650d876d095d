"""Command-line front end.

Exit codes: 0 ok, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import shutil
import sys
import urllib.request
from pathlib import Path

import numpy as np

from . import __version__, algorithms, data, experiments, fedsim, oracles, privacy
from .core import LDPFLError, PreconditionError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ calibrate

def cmd_calibrate(args) -> int:
    u = args.unsafe_allow
    need = lambda *names: _require_flags(args, names)
    kind = args.kind
    if kind == "mbsgd":
        need("L", "n", "eps", "delta", "R")
        plan = privacy.mbsgd_noise_plan(args.L, args.n, args.eps, args.delta, args.R, unsafe=u)
    elif kind == "onepass":
        need("L", "K", "eps", "delta")
        plan = privacy.onepass_noise_plan(args.L, args.K, args.eps, args.delta, args.n, unsafe=u)
    elif kind == "experiment":
        need("L", "n", "eps", "delta", "R")
        plan = privacy.experiment_noise_plan(args.L, args.n, args.eps, args.delta, args.R)
    elif kind == "sdp":
        need("L", "n", "N", "M", "eps", "delta", "R")
        plan = privacy.sdp_noise_plan(args.L, args.n, args.N, args.M, args.eps, args.delta, args.R, unsafe=u)
    elif kind == "shuffle":
        need("eps0", "n", "N", "delta")
        eps_r, delta_t = privacy.shuffle_amplify_round(args.eps0, args.delta0 or 0.0, args.n, args.N, args.delta,
                                                       unsafe=u)
        print(f"eps_r={eps_r!r}")
        print(f"delta_tilde_r={delta_t!r}")
        return EXIT_OK
    else:
        raise UsageError(f"unknown calibration {kind!r}")
    print("\n".join(plan.as_lines()))
    return EXIT_OK


def _require_flags(args, names):
    missing = [f"--{n}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.kind} needs {' '.join(missing)}")


# ------------------------------------------------------------------ config

def load_config(args) -> experiments.ExperimentConfig:
    overrides = {}
    if getattr(args, "config", None):
        try:
            overrides.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config}: {exc}") from None
    flag_map = {"dataset": "dataset", "trials": "trials", "seed": "seed", "workers": "workers", "R": "R",
                "N": "N", "M": "M", "reps": "reps", "local_steps": "local_steps", "delta_rule": "delta_rule"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "eps_grid", None):
        overrides["eps_grid"] = [float(x) for x in args.eps_grid.split(",")]
    if getattr(args, "runs", None):
        overrides["runs"] = args.runs.split(",")
    preset = overrides.get("dataset", "mnist-pairs")
    try:
        return experiments.ExperimentConfig.from_dict(overrides, base=experiments.ExperimentConfig.preset(preset))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ------------------------------------------------------------------ sweep

def cmd_sweep(args) -> int:
    cfg = load_config(args)
    if args.show_config:
        print(json.dumps(json.loads(cfg.to_json()), indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    per_trial = experiments.run_sweep(cfg)
    rows = experiments.summarize(cfg, per_trial)
    text = experiments.sweep_csv(cfg, rows)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    if not args.no_plot:
        plot = Path(args.plot) if args.plot else out.with_suffix(".svg")
        experiments.plot_sweep(rows, plot, title=cfg.dataset, ylabel=experiments.ylabel_for(cfg))
        print(f"wrote {out} and {plot}")
    else:
        print(f"wrote {out}")
    return EXIT_OK


# -------------------------------------------------------------------- run

def cmd_run(args) -> int:
    cfg = load_config(args)
    if args.show_config:
        print(json.dumps(json.loads(cfg.to_json()), indent=2, sort_keys=True))
        return EXIT_OK
    split = experiments.build_split(cfg, 0)
    loss = experiments._loss_for(cfg, split, args.clip)
    fed = split.train
    avail = fedsim.AvailabilityModel.fixed(cfg.M)
    eps = args.eps if args.eps is not None else cfg.eps_grid[-1]
    rule = lambda n: privacy.delta_rule(cfg.delta_rule, n)
    if args.algorithm == "onepass":
        res = algorithms.onepass_run(fed, loss, eps, rule(fed.n_min), args.K, cfg.seed, availability=avail,
                                     unsafe=args.unsafe_allow)
    elif args.algorithm == "local-sgd":
        plan = privacy.experiment_noise_plan(loss.L, fed.n_min, eps, rule(fed.n_min), cfg.R * cfg.local_steps)
        res = algorithms.local_sgd_run(fed, loss, None if args.nonprivate else plan, cfg.local_steps, args.eta,
                                       avail, cfg.seed, R=cfg.R, K=plan.K_min)
    else:
        if args.privacy == "theory":
            plan = privacy.mbsgd_noise_plan(loss.L, fed.n_min, eps, rule(fed.n_min), cfg.R, unsafe=args.unsafe_allow)
        else:
            plan = privacy.experiment_noise_plan(loss.L, fed.n_min, eps, rule(fed.n_min), cfg.R)
        K = args.K or plan.K_min
        use = None if args.nonprivate else plan
        if args.algorithm == "acsa":
            sched = algorithms.acsa_schedule(cfg.R, 1.0 / (2.0 * args.eta))
            res = algorithms.acsa_run(fed, loss, use, sched, 0.0, avail, cfg.seed, K=K)
        else:
            res = algorithms.mbsgd_run(fed, loss, use, algorithms.constant_schedule(cfg.R, args.eta), avail,
                                       cfg.seed, K=K)
    if args.metrics_out:
        Path(args.metrics_out).write_text(res.metrics_csv(), encoding="utf-8")
    if args.transcript_out:
        fedsim.write_transcript(args.transcript_out, res.transcripts)
    print(f"train_loss={algorithms.empirical_loss(fed, loss, res.w_hat)!r}")
    print(f"test_error={experiments.test_error(cfg, split, res.w_hat)!r}")
    return EXIT_OK


# ------------------------------------------------------------------ ingest

def _fetch(url: str, dest: Path) -> None:
    with urllib.request.urlopen(url, timeout=60) as resp, dest.open("wb") as fh:
        shutil.copyfileobj(resp, fh)


def cmd_ingest(args) -> int:
    target = Path(args.data_dir or os.environ.get(data.DATA_DIR_ENV) or ".")
    target.mkdir(parents=True, exist_ok=True)
    jobs = [(args.mnist_images, data.MNIST_IMAGES), (args.mnist_labels, data.MNIST_LABELS),
            (args.insurance, data.INSURANCE_CSV)]
    if not any(src for src, _ in jobs):
        raise UsageError("nothing to ingest; pass --mnist-images/--mnist-labels/--insurance")
    for src, name in jobs:
        if not src:
            continue
        dest = target / name
        if src.startswith(("http://", "https://")):
            _fetch(src, dest)
        else:
            shutil.copyfile(src, dest)
        if name == data.INSURANCE_CSV:
            tab = data.load_insurance(dest)
            print(f"{dest}: {len(tab.target)} rows, features {', '.join(tab.feature_names)}")
        else:
            arr = data.parse_idx(dest.read_bytes())
            print(f"{dest}: shape {arr.shape}")
    return EXIT_OK


# ------------------------------------------------------------------ verify

def cmd_verify(args) -> int:
    reports = oracles.run_suite(only=args.only, fault=args.fault, quick=not args.full)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(oracles.REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    if args.csv:
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
    width = max(len(r.name) for r in reports)
    for r in reports:
        rel = "<=" if r.one_sided else "=="
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.measured:.6g} {rel} "
              f"{r.reference:.6g} +/- {r.tolerance:.3g}  {r.detail}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


# ------------------------------------------------------------------ hetero

def cmd_hetero(args) -> int:
    from .losses import logistic_loss, squared_loss

    if args.dataset.startswith("mnist"):
        raw = data.load_mnist()
        mode = "pairs" if args.dataset == "mnist-pairs" else "shuffled"
        fed = data.partition_mnist_pairs(raw, 25, mode, args.seed, subsample=args.subsample).train
        X = np.vstack([c.features for c in fed.clients])
        loss = logistic_loss(X, args.D)
    elif args.dataset == "insurance":
        fed = data.insurance_split(args.N, args.seed).train
        X = np.vstack([c.features for c in fed.clients])
        loss = squared_loss(X, np.concatenate([c.labels for c in fed.clients]), args.D)
    else:
        raise UsageError(f"unknown dataset {args.dataset!r}")
    ups_star, ups = data.estimate_hetero(fed, loss, samples=args.samples, seed=args.seed)
    print(f"upsilon_star_sq={ups_star!r}")
    print(f"upsilon_sq_sampled={ups!r}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", choices=experiments.DATASETS)
    p.add_argument("--trials", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--local-steps", dest="local_steps", type=int)
    p.add_argument("--delta-rule", dest="delta_rule", help="formula in n, e.g. 1/n^2")
    p.add_argument("--eps-grid", dest="eps_grid", help="comma-separated ascending epsilons")
    p.add_argument("--runs", help="comma-separated <algorithm>:<ldp|nonprivate>")
    p.add_argument("--show-config", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ldpfl", description="Locally private federated learning toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="noise plans and shuffle amplification")
    p.add_argument("kind", choices=("mbsgd", "onepass", "experiment", "sdp", "shuffle"))
    for name, typ in (("L", float), ("n", int), ("N", int), ("M", int), ("K", int), ("R", int), ("eps", float),
                      ("eps0", float), ("delta", float), ("delta0", float)):
        p.add_argument(f"--{name}", type=typ)
    p.add_argument("--unsafe-allow", action="store_true", help="warn instead of failing on range checks")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="a single training run")
    _add_config_flags(p)
    p.add_argument("--algorithm", choices=("mbsgd", "acsa", "onepass", "local-sgd"), default="mbsgd")
    p.add_argument("--privacy", choices=("experiment", "theory"), default="experiment",
                   help="noise calibration: benchmark-grade or advanced composition")
    p.add_argument("--nonprivate", action="store_true")
    p.add_argument("--eps", type=float)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--K", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--metrics-out", dest="metrics_out")
    p.add_argument("--transcript-out", dest="transcript_out")
    p.add_argument("--unsafe-allow", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="epsilon sweep with tuning; writes CSV and SVG")
    _add_config_flags(p)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--plot", help="SVG path (default: next to the CSV)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ingest", help="copy or fetch dataset files into the data directory")
    p.add_argument("--data-dir", dest="data_dir", help=f"destination (default ${data.DATA_DIR_ENV} or .)")
    p.add_argument("--mnist-images", dest="mnist_images", help="IDX image file path or URL")
    p.add_argument("--mnist-labels", dest="mnist_labels", help="IDX label file path or URL")
    p.add_argument("--insurance", help="insurance CSV path or URL")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--only", choices=oracles.SUITE_NAMES)
    p.add_argument("--fault", choices=("sigma-half",), help="inject a known fault")
    p.add_argument("--full", action="store_true", help="full draw counts")
    p.add_argument("--csv", help="write the report table as CSV")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("hetero", help="heterogeneity estimates for a dataset")
    p.add_argument("--dataset", choices=("mnist-pairs", "mnist-shuffled", "insurance"), default="mnist-pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--N", type=int, default=5)
    p.add_argument("--D", type=float, default=100.0)
    p.add_argument("--subsample", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_hetero)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ldpfl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DatasetMissing, OSError) as exc:
        print(f"ldpfl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except data.ParseError as exc:
        print(f"ldpfl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PreconditionError, LDPFLError, ValueError) as exc:
        print(f"ldpfl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
