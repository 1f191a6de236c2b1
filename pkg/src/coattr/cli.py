"""Command-line entry point: ``coattr <subcommand> ...``.

Exit codes: 0 success, 2 configuration/schema error, 3 missing upstream artifact.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import runner
from .errors import ConfigError, SchemaError, UpstreamMissingError

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM = 0, 2, 3

# flag -> RunConfig field
OVERRIDES = {
    "eps": "eps", "delta": "delta", "kmax": "kmax", "shots": "shots", "rho": "rho", "sigma": "sigma",
    "aggregation": "aggregation", "norm": "norm", "dim_normalize": "dim_normalize", "workers": "workers",
    "B": "B", "T": "T", "master_seed": "master_seed", "train_episodes": "train_episodes",
    "time_limit": "time_limit", "resamples": "resamples",
}


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p):
    g = p.add_argument_group("configuration (flags override the JSON config)")
    g.add_argument("--config", help="JSON config file or an existing manifest.json")
    g.add_argument("--problems", type=lambda s: s.split(","), help="comma-separated, e.g. CVRPTW,OP")
    g.add_argument("--seeds", "--seed", dest="seeds", type=_int_list, help="comma-separated seeds")
    g.add_argument("--B", type=int, help="instances per seed")
    g.add_argument("--T", type=int, help="decoding steps per instance")
    g.add_argument("--master-seed", dest="master_seed", type=int)
    g.add_argument("--train-episodes", dest="train_episodes", type=int)
    g.add_argument("--eps", type=float, help="PAC tolerance")
    g.add_argument("--delta", type=float, help="PAC confidence parameter")
    g.add_argument("--kmax", type=int, help="largest subset size tested")
    g.add_argument("--sigma", type=float, help="PAC neighbourhood standard deviation")
    g.add_argument("--shots", type=int, help="counterfactual sampling budget per cell")
    g.add_argument("--rho", type=float, help="counterfactual box half-width as a multiple of each key's sigma")
    g.add_argument("--time-limit", dest="time_limit", type=float, help="feasibility search limit (s)")
    g.add_argument("--aggregation", choices=("mean", "sum", "max"))
    g.add_argument("--backend", action="append", choices=("lp", "subgrad", "proxy"),
                   help="repeat to select several (default: all)")
    g.add_argument("--norm", choices=("l1", "l2", "linf"))
    g.add_argument("--dim-normalize", dest="dim_normalize", type=_bool, metavar="{true,false}")
    g.add_argument("--resamples", type=int, help="bootstrap resamples")
    g.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")


def build_config(args) -> runner.RunConfig:
    cfg = runner.RunConfig.load(args.config) if getattr(args, "config", None) else runner.RunConfig()
    updates = {field: getattr(args, flag) for flag, field in OVERRIDES.items()
               if getattr(args, flag, None) is not None}
    if getattr(args, "problems", None):
        updates["problems"] = args.problems
    if getattr(args, "seeds", None):
        updates["seeds"] = args.seeds
    if getattr(args, "backend", None):
        updates["backends"] = args.backend
    return replace(cfg, **updates).validate()


def _run_dir(args):
    return Path(args.run_dir) if args.run_dir else runner.output_root() / "run"


def cmd_generate(args):
    cfg = build_config(args)
    runner.stage_generate(cfg, _run_dir(args))
    print(f"wrote instances to {_run_dir(args) / 'instances'}")


def _manifest_config(args):
    _, cfg = runner.load_manifest(_run_dir(args))
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    return cfg


def cmd_train(args):
    cfg = _manifest_config(args)
    if args.episodes is not None:
        cfg = replace(cfg, train_episodes=args.episodes)
        runner.write_manifest(_run_dir(args), cfg)
    runner.stage_train(cfg, _run_dir(args))
    print(f"wrote policies to {_run_dir(args)}")


def _stage(name):
    def cmd(args):
        runner.stage_cells(_manifest_config(args), _run_dir(args), name)
        print(f"wrote {_run_dir(args) / runner.STAGES[name][0]}")
    return cmd


def cmd_adjudicate(args):
    dirs = args.run_dirs or [str(_run_dir(args))]
    report = runner.adjudicate(dirs, args.out, args.backend or ("lp", "subgrad", "proxy"), args.resamples)
    out = Path(args.out or dirs[0])
    print(f"wrote {out / 'stats.json'} and {out / 'fig_agreement.csv'}")
    for name, p in report["problems"].items():
        print(f"{name}: n_cert={p['n_cert']}")


def cmd_report(args):
    import json
    path = _run_dir(args) / "stats.json"
    if not path.exists():
        raise UpstreamMissingError(f"expected file {path} is missing (run `adjudicate` first)")
    text = runner.render_report(json.loads(path.read_text()))
    (_run_dir(args) / "report.md").write_text(text + "\n")
    print(text)


def cmd_run(args):
    cfg = build_config(args)
    d = runner.run(cfg, _run_dir(args))
    print((d / "report.md").read_text())
    print(f"run directory: {d}")


def make_parser():
    parser = argparse.ArgumentParser(prog="coattr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=False, workers=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--run-dir", help=f"run directory (default: ${runner.OUTPUT_ROOT_ENV}/run or ./runs/run)")
        if config:
            _add_config_flags(p)
        elif workers:
            p.add_argument("--workers", type=int)
        p.set_defaults(fn=fn)
        return p

    add("generate", cmd_generate, "write the manifest and instance files", config=True)
    p = add("train", cmd_train, "REINFORCE-train one policy per (problem, seed)")
    p.add_argument("--episodes", type=int, help="override the manifest's train_episodes")
    add("attribute", _stage("attribute"), "per-cell attribution under every backend")
    add("counterfactual", _stage("counterfactual"), "per-cell certified counterfactual search")
    add("pac-subset", _stage("pac-subset"), "per-cell PAC sufficient subsets (needs attribution.csv)")
    p = add("adjudicate", cmd_adjudicate, "statistics over cells.csv of one or more run dirs", workers=False)
    p.add_argument("run_dirs", nargs="*", help="run directories (default: --run-dir)")
    p.add_argument("--out", help="directory for stats.json (default: first run dir)")
    p.add_argument("--backend", action="append", choices=("lp", "subgrad", "proxy"))
    p.add_argument("--resamples", type=int, default=10_000)
    add("report", cmd_report, "render stats.json as tables", workers=False)
    add("run", cmd_run, "the whole pipeline", config=True)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except UpstreamMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
