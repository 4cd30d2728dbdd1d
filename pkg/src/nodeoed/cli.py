"""Command line entry point: ``nodeoed <subcommand> [flags]``.

Exit status is 0 on success, 1 on configuration or usage errors and 2 on
runtime failures.  Runs are written below ``--out`` or, by default, below
``$NODE_OUTPUT_ROOT`` (falling back to ``./runs``).  Every run directory echoes
its resolved ``config.json``; passing it back with ``--config`` reproduces the
run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import io as nio
from .analytic import oracle_table
from .autodiff import ContractError
from .trainer import TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
OUTPUT_ROOT_ENV = "NODE_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text):
    """``"1,10,50"`` or ranges like ``"2-50"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


# flag name -> (TrainConfig field, type, help)
_TRAIN_FLAGS = {
    "--epochs": ("epochs", int, "training epochs (steps for the exponential benchmark)"),
    "--batch": ("batch_size", int, "batch size"),
    "--lr-theta": ("lr_theta", float, "network learning rate"),
    "--lr-design": ("lr_design", float, "design learning rate"),
    "--gamma": ("gamma", float, "data-consistency weight"),
    "--noise": ("noise_sigma", float, "noise level"),
    "--noise-kind": ("noise_kind", str, "additive | log | relative | relative-norm"),
    "--loss": ("loss", str, "mse | max | cce"),
    "--init": ("init", str, "variance | uniform | random | explicit"),
    "--seed": ("seed", int, "random seed"),
    "--hidden": ("hidden", lambda s: tuple(_int_list(s)), "hidden layer widths, comma separated"),
    "--log-every": ("log_every", int, "trace logging interval in steps"),
}


def _add_common(p, experiment, extra=(), adaptive=False):
    from .experiments import default_config

    desk = default_config(experiment, adaptive=adaptive)
    p.add_argument("--config", type=Path, help="JSON config (e.g. an echoed config.json); flags override it")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--paper-scale", action="store_true", help="use the full-scale settings (all data, long schedules) instead of desk scale")
    for flag, (name, typ, text) in {**_TRAIN_FLAGS, **dict(extra)}.items():
        default = getattr(desk, name)
        p.add_argument(flag, dest=name, type=typ, default=None, help=f"{text} (default: {default})")


def _resolve(args, experiment, adaptive=False, **forced):
    from .experiments import default_config

    if args.config is not None:
        try:
            base = TrainConfig.from_dict(json.loads(args.config.read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as err:
            raise ContractError(f"cannot read config {args.config}: {err}") from None
        if base.experiment != experiment:
            raise ContractError(f"config is for {base.experiment!r}, not {experiment!r}")
        values = base.to_dict()
    else:
        values = default_config(experiment, args.paper_scale, adaptive).to_dict()
    fields = {f for f in TrainConfig.__dataclass_fields__}
    for key, val in vars(args).items():
        if key in fields and val is not None:
            values[key] = val
    values.update({k: v for k, v in forced.items() if v is not None})
    return TrainConfig.from_dict(values).validate()


def _out(args, name):
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


# -- subcommands ---------------------------------------------------------------------------


def cmd_exp_single(args):
    from .experiments import run_exponential

    cfg = _resolve(args, "exponential", budget=args.m)
    out = _out(args, f"exp-single-m{cfg.budget}-seed{cfg.seed}")
    _, summary = run_exponential(cfg, out)
    print(f"k0={summary['k0']} k1={summary['k1']} max_boundary_distance={summary['max_boundary_distance']:.4g}")
    print(f"wrote {out}")


def cmd_exp_sweep(args):
    from .experiments import run_sweep

    cfg = _resolve(args, "exponential")
    out = _out(args, f"exp-sweep-seed{cfg.seed}")
    rows = run_sweep(cfg, args.m_list, out)
    for r in rows:
        print(f"m={r['m']} k1/m={r['k1_fraction']:.4f}")
    print(f"wrote {out}")


def cmd_image(args):
    from .experiments import image_data, run_image

    cfg = _resolve(args, "image", data_dir=args.mnist_dir)
    out = _out(args, f"image-{cfg.loss}-seed{cfg.seed}")
    data = image_data(cfg)
    overview = {}
    for M in args.budgets:
        c = cfg.replace(budget=M)
        res = run_image(c, out / f"M{M:03d}", data=data)
        overview[str(M)] = {
            "node": res["node"].mean,
            "variance": res["variance"].mean,
            "random": [r.mean for r in res["random"]],
        }
        print(f"M={M}: node {res['node'].mean:.5f} variance {res['variance'].mean:.5f} "
              f"random {min(overview[str(M)]['random']):.5f}..{max(overview[str(M)]['random']):.5f}")
    nio.write_json(out / "summary.json", {"experiment": "image", "metric_means": overview, "config": cfg.to_dict()})
    print(f"wrote {out}")


def cmd_ct(args):
    from .experiments import run_ct

    cfg = _resolve(args, "ct")
    out = _out(args, f"ct-seed{cfg.seed}")
    res = run_ct(cfg, out)
    print(f"median mse: node {res['node']['median_mse']:.6f} equidistant {res['equidistant']['median_mse']:.6f}")
    print(f"wrote {out}")


def cmd_ct_adaptive(args):
    from .experiments import run_ct_adaptive

    cfg = _resolve(args, "ct", adaptive=True)
    out = _out(args, f"ct-adaptive-seed{cfg.seed}")
    state = run_ct_adaptive(cfg, args.objects, out)
    print("median mse per round: " + ", ".join(f"{v:.6f}" for v in state.medians))
    print(f"wrote {out}")


def cmd_oracle_table(args):
    rows = oracle_table(range(2, args.m_max + 1), args.sigma2)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        nio.write_csv(args.out, rows)
        print(f"wrote {args.out}")
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:32s} err={r.error:.2e} tol={r.tol:.0e}")
    failed = [r for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"{len(failed)} gradient check(s) exceeded tolerance")


def cmd_fetch_mnist(args):
    d = nio.fetch_mnist(args.dir)
    print(f"MNIST files verified in {d}")


def cmd_plot(args):
    run = args.run
    rows = nio.read_csv(run / "trace.csv")
    if not rows:
        raise ContractError(f"{run / 'trace.csv'} is empty")
    cols = [k for k in rows[0] if k.startswith("w")]
    steps = [int(r["step"]) for r in rows]
    nio.svg_lines(run / "trace_loss.svg", steps, [[float(r["loss"])] for r in rows], ylabel="loss")
    nio.svg_lines(run / "trace_design.svg", steps, [[float(r[c]) for c in cols] for r in rows], ylabel="design")
    print(f"wrote {run / 'trace_loss.svg'} and {run / 'trace_design.svg'}")


def build_parser():
    p = _Parser(prog="nodeoed", description="Joint training of reconstruction networks and measurement designs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("exp-single", help="one NODE run on the exponential benchmark")
    s.add_argument("--m", type=int, default=None, help="number of sampling times (default: 3)")
    _add_common(s, "exponential")
    s.set_defaults(func=cmd_exp_single)

    s = sub.add_parser("exp-sweep", help="NODE runs over a list of m (seed = base seed + m)")
    s.add_argument("--m-list", type=_int_list, default=list(range(2, 51)), help="values of m, e.g. 10,20,30 or 2-50 (default: 2-50)")
    _add_common(s, "exponential")
    s.set_defaults(func=cmd_exp_sweep)

    s = sub.add_parser("image", help="pixel selection on MNIST with variance and random baselines")
    s.add_argument("--budgets", type=_int_list, default=[1, 10, 50], help="numbers of pixels (default: 1,10,50)")
    s.add_argument("--mnist-dir", default=None, help="directory with the IDX files (default: bundled sample)")
    _add_common(s, "image", {
        "--subset": ("subset", int, "training subset size"),
        "--repeats": ("repeats", int, "random-baseline repeats"),
    })
    s.set_defaults(func=cmd_image)

    ct_flags = {
        "--budget": ("budget", int, "number of angles"),
        "--n": ("n", int, "phantom side length"),
        "--rho": ("rho", int, "detector count"),
        "--n-train": ("n_train", int, "training phantoms"),
        "--n-val": ("n_val", int, "validation phantoms"),
        "--tau": ("tau", float, "initial angles fill (0, tau]"),
    }
    s = sub.add_parser("ct", help="sparse-view CT angles against the equidistant baseline")
    _add_common(s, "ct", ct_flags)
    s.set_defaults(func=cmd_ct)

    s = sub.add_parser("ct-adaptive", help="adaptive CT rounds")
    s.add_argument("--objects", type=int, default=5, help="number of fixed true objects (default: 5)")
    _add_common(s, "ct", {
        **ct_flags,
        "--increment": ("increment", int, "new angles per round"),
        "--rounds": ("rounds", int, "number of rounds"),
    }, adaptive=True)
    s.set_defaults(func=cmd_ct_adaptive)

    s = sub.add_parser("oracle-table", help="analytic optimal splits (m, k*, F(k*))")
    s.add_argument("--m-max", type=int, default=50, help="largest m (default: 50)")
    s.add_argument("--sigma2", type=float, default=1.0, help="noise variance (default: 1.0)")
    s.add_argument("--out", type=Path, default=None, help="CSV path (default: print to stdout)")
    s.set_defaults(func=cmd_oracle_table)

    s = sub.add_parser("gradcheck", help="finite-difference check of all derivatives")
    s.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("fetch-mnist", help="download MNIST and verify checksums")
    s.add_argument("--dir", type=Path, default=Path("data/mnist"), help="target directory (default: data/mnist)")
    s.set_defaults(func=cmd_fetch_mnist)

    s = sub.add_parser("plot", help="render SVG plots of a run directory")
    s.add_argument("run", type=Path, help="run directory containing trace.csv")
    s.set_defaults(func=cmd_plot)
    return p


def run(argv=None):
    """Parse ``argv`` and execute; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        args.func(args)
    except (ContractError, UsageError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
