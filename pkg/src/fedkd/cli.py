"""Command-line entry point: ``fedkd {generate-data,run,compare,gradcheck,diagnose}``.

Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 data
error, 4 numerical failure. Errors print one line to stderr::

    fedkd: error kind=<check|config|data|numerical> reason="<message>"

Any config key can be overridden with a ``FEDKD_<KEY>`` environment
variable (e.g. ``FEDKD_ROUNDS=3``); ``--seed``/``--out`` flags win over both.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__, config, data, nn, runner
from .diagnostics import CONSTANT_NAMES, LogisticSurrogate, QuadraticSurrogate, check_descent, check_rate
from .exceptions import ConfigError, DatasetFormatError, NonFiniteError, PartitionError

EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3, 4
BUILTIN = ("desk", "full")


class CheckFailed(Exception):
    pass


def _fail(kind, msg, code):
    print(f"fedkd: error kind={kind} reason={json.dumps(' '.join(str(msg).split()))}", file=sys.stderr)
    return code


def _config_path(value):
    if value is None:
        return None
    if value in BUILTIN and not Path(value).exists():
        return config.builtin_path(value)
    return value


def _load(args, **extra):
    return config.load_config(_config_path(args.config), seed=args.seed, **extra)


# ---------------------------------------------------------------- subcommands

def cmd_generate_data(args):
    cfg = _load(args)
    n = args.n if args.n is not None else cfg.n_train
    pool, public, private, test = runner.generate_pool(
        n, args.rate if args.rate is not None else cfg.hotspot_rate,
        args.n_test if args.n_test is not None else cfg.n_test,
        args.test_rate if args.test_rate is not None else cfg.test_hotspot_rate,
        args.public_fraction if args.public_fraction is not None else cfg.public_fraction, cfg.seed)
    out = runner.write_datasets(args.out or cfg.out, public, private, test)
    print(data.stats_block([("train", pool), ("public", public), ("private", private), ("test", test)]))
    print(f"wrote {', '.join(f'{n}.lhd' for n in runner.DATA_FILES)} to {out}")
    return 0


def cmd_run(args):
    extra = {}
    if args.algorithm:
        extra["algorithm"] = args.algorithm
    if args.data_dir:
        extra["data_dir"] = args.data_dir
    if args.out:
        extra["out"] = args.out
    cfg = _load(args, **extra)
    start = time.perf_counter()
    run = runner.run_experiment(cfg)
    out = runner.write_run(run, cfg.out)
    last = run.records[-1]
    print(f"{cfg.algorithm} seed={cfg.seed} rounds={len(run.records)} accuracy={runner._fmt(last.accuracy)} "
          f"tpr={runner._fmt(last.tpr)} fpr={runner._fmt(last.fpr)} "
          f"time={time.perf_counter() - start:.1f}s -> {out}")
    return 0


def cmd_compare(args):
    manifests = runner.find_manifests(args.runs)
    if not manifests:
        raise DatasetFormatError(f"no manifest.json found under {args.runs}")
    rows = runner.summarize(manifests)
    print(runner.format_summary(rows))
    if args.out:
        runner.write_summary(rows, args.out)
    return 0


def cmd_gradcheck(args):
    spec = nn.ARCHITECTURES[args.arch]()
    params = runner.jittered_params(spec, args.seed)
    x, y, target = runner.gradcheck_batch(spec, args.seed, args.batch)
    start = time.perf_counter()
    report = nn.gradcheck(spec, params, x, y, lam=args.lam, target_logits=target, seed=args.seed)
    elapsed = time.perf_counter() - start
    for line in report.lines():
        print(line)
    print(f"elapsed {elapsed:.1f}s")
    if args.out:
        Path(args.out).write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    if not report.passed:
        raise CheckFailed(f"gradcheck failed for layers {', '.join(report.failing_layers)}")
    return 0


def _descent_block(report):
    worst = max((s.lhs - s.rhs for s in report.steps), default=0.0)
    return {"passed": report.passed, "steps": len(report.steps), "eta": report.eta, "L": report.L,
            "first_violation": report.first_violation, "max_lhs_minus_rhs": worst}


def diagnostics_report(cfg):
    """Descent and rate checks on convex surrogates plus the CNN's sampled constants."""
    out = {"version": f"fedkd {__version__}", "config_hash": cfg.config_hash, "seed": cfg.seed}

    eq = check_descent(QuadraticSurrogate([[1.0]], w0=[1.0]), 0.1, 1, L=1.0, rtol=0.0)
    s = eq.steps[0]
    descent = {"equality_case": {"F": "0.5*w^2", "eta": 0.1, "w0": 1.0, "lhs": s.lhs, "rhs": s.rhs,
                               "expected": 0.405, "exact": s.lhs == s.rhs == 0.405}}
    for dim in (1, 5):
        q = QuadraticSurrogate.random(dim, cfg.seed)
        descent[f"quadratic_{dim}d"] = _descent_block(check_descent(q, 0.1 / q.smoothness, 100))
    d = runner.prepare_data(cfg)
    logistic = LogisticSurrogate.from_dataset(d.public)
    descent["logistic"] = _descent_block(check_descent(logistic, 0.5 / logistic.smoothness, 50))
    out["descent"] = descent

    th = check_rate(QuadraticSurrogate([[1.0]], w0=[1.0]), 0.1, [50, 100, 200])
    out["rate"] = {
        "problem": "0.5*w^2", "eta": 0.1, "passed": th.passed, "bound_holds": th.bound_holds,
        "rate_holds": th.rate_holds, "max_ratio": th.max_ratio,
        "checkpoints": [{"T": c.T, "gap": c.gap, "bound": c.bound, "holds": c.holds} for c in th.checkpoints],
        "ratios": {str(k): v for k, v in th.ratios.items()},
    }

    clients = runner.build_clients(cfg)
    c0 = clients[0]
    constants = runner.model_constants(cfg, c0.spec, c0.params, d.public, d.shards[0], cfg.seed)
    out["constants"] = constants.as_dict()
    failed = [name for name, ok in (
        ("descent.equality_case", descent["equality_case"]["exact"]),
        *((f"descent.{k}", v["passed"]) for k, v in descent.items() if k != "equality_case"),
        ("rate", th.passed),
    ) if not ok]
    out["failed_checks"] = failed
    return out


def cmd_diagnose(args):
    extra = {"out": args.out} if args.out else {}
    cfg = _load(args, **extra)
    report = diagnostics_report(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnostics.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    eq = report["descent"]["equality_case"]
    print(f"descent equality case: lhs={eq['lhs']!r} rhs={eq['rhs']!r} exact={eq['exact']}")
    for k, v in report["descent"].items():
        if k != "equality_case":
            print(f"descent {k}: passed={v['passed']} steps={v['steps']}")
    th = report["rate"]
    print(f"rate: bound_holds={th['bound_holds']} rate_holds={th['rate_holds']} ratios={th['ratios']}")
    print("constants: " + " ".join(f"{k}={report['constants'][k]:.4g}" for k in CONSTANT_NAMES))
    print(f"wrote {out / 'diagnostics.json'}")
    if report["failed_checks"]:
        raise CheckFailed(f"failed checks: {', '.join(report['failed_checks'])}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="fedkd", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"fedkd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file, or 'desk' / 'full' for the shipped ones")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    g = sub.add_parser("generate-data", help="write public/private/test .lhd files")
    common(g)
    g.add_argument("--n", type=int, default=None, help="training pool size")
    g.add_argument("--rate", type=float, default=None, help="training hotspot fraction")
    g.add_argument("--n-test", type=int, default=None)
    g.add_argument("--test-rate", type=float, default=None)
    g.add_argument("--public-fraction", type=float, default=None)
    g.set_defaults(func=cmd_generate_data)

    r = sub.add_parser("run", help="run one algorithm and write metrics.csv + manifest.json")
    common(r)
    r.add_argument("--algorithm", default=None)
    r.add_argument("--data-dir", default=None, help="directory with public/private/test .lhd files")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="median final-round metrics per algorithm over seeds")
    c.add_argument("runs", help="directory searched recursively for manifest.json")
    c.add_argument("--out", default=None, help="also write the table as CSV")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("gradcheck", help="finite-difference check of every layer's gradient")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--arch", default="full", choices=sorted(nn.ARCHITECTURES))
    k.add_argument("--batch", type=int, default=2)
    k.add_argument("--lam", type=float, default=0.5)
    k.add_argument("--out", default=None, help="write the report to this file")
    k.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("diagnose", help="descent/rate checks and constants -> diagnostics.json")
    common(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckFailed as e:
        return _fail("check", e, EXIT_CHECK)
    except ConfigError as e:
        return _fail("config", e, EXIT_CONFIG)
    except (DatasetFormatError, PartitionError, OSError) as e:
        return _fail("data", e, EXIT_DATA)
    except NonFiniteError as e:
        return _fail("numerical", e, EXIT_NUMERICAL)
    except ValueError as e:
        return _fail("config", e, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
