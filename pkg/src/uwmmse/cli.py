"""Command-line entry point: ``uwmmse {generate,train,eval,bench,robustness}``.

Every flag can also be given in a JSON config file (``--config``) whose keys
are the flag names with dashes or underscores; flags on the command line win.
Path flags additionally fall back to ``UWMMSE_<NAME>`` environment variables,
which take precedence over the config file.

Exit codes: 0 success, 2 usage error, 1 runtime error. On failure a single
JSON line ``{"error": ..., "kind": ..., "exit_code": ...}`` is written to
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .channels import ChannelSpec, Family, generate, read_dataset, write_dataset
from .errors import ConfigurationError, UwmmseError
from .neural import init_params, parameter_census
from .training import (
    GradientMethod,
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train_state,
    write_history,
)
from .wmmse import InterferenceMode, ProblemConfig

log = logging.getLogger("uwmmse")

ENV_PREFIX = "UWMMSE_"

TRAIN_DEFAULTS = {
    "k": 4,
    "hidden": 5,
    "batch_size": 64,
    "lr": 1e-2,
    "max_iters": 15000,
    "sigma": 2.6e-5,
    "p_max": 1.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _path(sub, *flags, **kw):
    """Register a path option; remembered so env-var fallbacks apply to it."""
    action = sub.add_argument(*flags, **kw)
    sub._path_dests = getattr(sub, "_path_dests", []) + [action.dest]
    return action


def _problem_flags(p, sigma=TRAIN_DEFAULTS["sigma"], mode=InterferenceMode.PAPER_EXCLUDE_SELF.value):
    p.add_argument("--d", type=int, default=1, help="streams per user")
    p.add_argument("--sigma", type=float, default=sigma, help="noise standard deviation")
    p.add_argument("--p-max", type=float, default=TRAIN_DEFAULTS["p_max"], help="per-user power budget")
    p.add_argument(
        "--interference-mode",
        default=mode,
        help="exclude-self (network default) or include-self (classical WMMSE)",
    )


def _channel_flags(p, required=True):
    p.add_argument("--family", default="rayleigh", help="rayleigh, rician or geometric")
    p.add_argument("--m", type=int, required=required, help="number of users")
    p.add_argument("--t", type=int, required=required, help="transmit antennas")
    p.add_argument("--r", type=int, required=required, help="receive antennas")
    p.add_argument("--rician-k-db", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="uwmmse", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = subs.add_parser("generate", help="write a random channel dataset")
    _channel_flags(g)
    g.add_argument("--n", type=int, required=True, help="number of samples")
    _path(g, "--out", required=True)
    _path(g, "--config")

    t = subs.add_parser("train", help="train the unfolded network")
    _path(t, "--train-data", required=True)
    _path(t, "--val-data", required=True)
    _path(t, "--out", required=True, help="checkpoint path")
    _path(t, "--history", help="history CSV path")
    _path(t, "--resume", help="continue from this checkpoint")
    t.add_argument("--k", type=int, default=TRAIN_DEFAULTS["k"], help="unfolded layers")
    t.add_argument("--hidden", type=int, default=TRAIN_DEFAULTS["hidden"])
    t.add_argument("--a-max", type=float, default=2.0)
    t.add_argument("--b-max", type=float, default=2.0)
    t.add_argument("--batch-size", type=int, default=TRAIN_DEFAULTS["batch_size"])
    t.add_argument("--lr", type=float, default=TRAIN_DEFAULTS["lr"])
    t.add_argument("--max-iters", type=int, default=TRAIN_DEFAULTS["max_iters"])
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--seed", type=int, default=0, help="batch shuffling seed")
    t.add_argument("--init-seed", type=int, default=0, help="parameter initialization seed")
    t.add_argument("--gradient-method", default="analytic", help="analytic or fd")
    t.add_argument("--fd-step", type=float, default=1e-6)
    t.add_argument("--dry-run", action="store_true", help="print the resolved settings and exit")
    _problem_flags(t)
    _path(t, "--config")

    e = subs.add_parser("eval", help="compare WMMSE, truncated WMMSE and the network")
    _path(e, "--checkpoint", required=True)
    _path(e, "--data", required=True)
    _path(e, "--results", required=True, help="per-sample results CSV")
    _path(e, "--summary", required=True, help="per-method summary CSV")
    e.add_argument("--family", default="", help="family label written to the CSV")
    e.add_argument("--wmmse-iters", type=int, default=100)
    e.add_argument("--trunc-iters", type=int, default=4)
    e.add_argument("--tol", type=float, default=1e-6)
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--sigma", type=float, default=None, help="override the checkpoint's noise level")
    e.add_argument("--p-max", type=float, default=None)
    _path(e, "--config")

    b = subs.add_parser("bench", help="time the three methods on fresh channels")
    _channel_flags(b, required=False)
    b.set_defaults(m=20, t=5, r=3)
    b.add_argument("--n", type=int, default=20)
    b.add_argument("--wmmse-iters", type=int, default=100)
    b.add_argument("--trunc-iters", type=int, default=4)
    b.add_argument("--k", type=int, default=4)
    b.add_argument("--hidden", type=int, default=5)
    b.add_argument("--threads", type=int, default=1)
    _problem_flags(b)
    b.set_defaults(d=2)
    _path(b, "--checkpoint", help="use trained weights instead of a fresh initialization")
    _path(b, "--results")
    _path(b, "--summary")
    _path(b, "--config")

    r = subs.add_parser("robustness", help="cross-distribution and size-sweep evaluation")
    _path(r, "--sweep-config", required=True)
    _path(r, "--out-dir", required=True)
    r.add_argument("--threads", type=int, default=1)
    _path(r, "--config")
    return parser


def _config_defaults(sub, path):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    known = {a.dest for a in sub._actions}
    out = {}
    for key, val in doc.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        out[dest] = val
    return out


def parse_args(argv):
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subs), None)
    if command is not None:
        sub = subs[command]
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        overrides = {}
        if known.config:
            overrides.update(_config_defaults(sub, known.config))
        for dest in getattr(sub, "_path_dests", []):
            env = os.environ.get(ENV_PREFIX + dest.upper())
            if env:
                overrides[dest] = env
        # file and environment values become defaults, so explicit flags win
        for action in sub._actions:
            if action.dest in overrides:
                action.required = False
        sub.set_defaults(**overrides)
    return parser.parse_args(argv)


# -- subcommands -------------------------------------------------------------


def _problem(args, d=None):
    return ProblemConfig(
        d=args.d if d is None else d,
        sigma=args.sigma,
        p_max=args.p_max,
        interference_mode=InterferenceMode.parse(args.interference_mode),
    )


def cmd_generate(args):
    spec = ChannelSpec(Family.parse(args.family), args.m, args.t, args.r, rician_k_db=args.rician_k_db, seed=args.seed)
    if args.n < 0:
        raise ConfigurationError("--n must be non-negative")
    return lambda: _do_generate(spec, args)


def _do_generate(spec, args):
    data = generate(spec, args.n)
    write_dataset(args.out, data, dims=(spec.M, spec.R, spec.T))
    print(f"wrote {args.out} family={spec.family.value} M={spec.M} R={spec.R} T={spec.T} n={args.n} seed={spec.seed}")


def cmd_train(args):
    pcfg = _problem(args)
    tcfg = TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        max_iters=args.max_iters,
        patience=args.patience,
        eval_every=args.eval_every,
        seed=args.seed,
        gradient_method=GradientMethod.parse(args.gradient_method),
        fd_step=args.fd_step,
    )
    if args.k < 1 or args.hidden < 1:
        raise ConfigurationError("--k and --hidden must be at least 1")
    return lambda: _do_train(args, pcfg, tcfg)


def _print_settings(params, pcfg, tcfg):
    print(
        "hyperparameters: "
        f"K={params.K} hidden={params.hidden} batch_size={tcfg.batch_size} "
        f"lr={tcfg.learning_rate:g} max_iters={tcfg.max_iters} sigma={pcfg.sigma:g} p_max={pcfg.p_max:g} "
        f"d={pcfg.d} interference_mode={pcfg.interference_mode.value} "
        f"gradient_method={tcfg.gradient_method.value} patience={tcfg.patience} eval_every={tcfg.eval_every}"
    )


def _print_census(params):
    census = parameter_census(params)
    print(f"trainable parameters: {census['total']} (12h+RT+6 would give {census['paper_formula']})")


def _do_train(args, pcfg, tcfg):
    if args.dry_run:
        _print_settings(init_params(1, 1, args.hidden, args.k, a_max=args.a_max, b_max=args.b_max), pcfg, tcfg)
        return
    (M, R, T), train_set = read_dataset(args.train_data)
    (Mv, Rv, Tv), val_set = read_dataset(args.val_data)
    if (Rv, Tv) != (R, T):
        raise ConfigurationError(f"train data (R, T)={(R, T)} but validation data (R, T)={(Rv, Tv)}")
    if args.resume:
        state = load_checkpoint(args.resume)
        pcfg = state.pcfg
    else:
        params = init_params(R, T, args.hidden, args.k, args.init_seed, a_max=args.a_max, b_max=args.b_max)
        state = TrainState(params, pcfg)
    _print_settings(state.params, pcfg, tcfg)
    _print_census(state.params)
    print(f"train samples={len(train_set)} (M={M}) val samples={len(val_set)} (M={Mv})")
    train_state(train_set, val_set, state, tcfg, checkpoint_path=args.out)
    save_checkpoint(state, args.out)
    if args.history:
        write_history(state.history, args.history)
    best = state.best_val if state.history else float("nan")
    print(f"done iterations={state.iteration} best_val_sum_rate={best:.6g} checkpoint={args.out}")


def _loaded_model(path, sigma=None, p_max=None):
    state = load_checkpoint(path)
    pcfg = state.pcfg
    if sigma is not None or p_max is not None:
        pcfg = ProblemConfig(
            d=pcfg.d,
            sigma=pcfg.sigma if sigma is None else sigma,
            p_max=pcfg.p_max if p_max is None else p_max,
            interference_mode=pcfg.interference_mode,
        )
    return state.best_params, pcfg


def _report(records, results=None, summary=None):
    stats = ex.summarize(records)
    for s in stats:
        print(f"{s.method:8s} mean_sum_rate={s.mean:.6g} median={s.median:.6g} mean_time_s={s.mean_time:.6g} n={s.n}")
    if any(s.method == ex.Method.UWMMSE.value for s in stats):
        print(f"speedup WMMSE/UWMMSE={ex.speedup(records):.4g}")
    if results:
        ex.write_results(records, results)
    if summary:
        ex.write_summary(stats, summary)


def cmd_eval(args):
    if args.threads < 1:
        raise ConfigurationError("--threads must be at least 1")

    def run():
        params, pcfg = _loaded_model(args.checkpoint, args.sigma, args.p_max)
        (M, R, T), data = read_dataset(args.data)
        if params.omega.dims != (R, T):
            raise ConfigurationError(
                f"checkpoint (R, T)={params.omega.dims} does not match data {args.data} (R, T)={(R, T)}"
            )
        records = ex.compare_methods(
            data,
            params,
            pcfg,
            wmmse_iters=args.wmmse_iters,
            trunc_iters=args.trunc_iters,
            family=args.family,
            tol=args.tol,
            threads=args.threads,
        )
        _report(records, args.results, args.summary)

    return run


def cmd_bench(args):
    spec = ChannelSpec(Family.parse(args.family), args.m, args.t, args.r, rician_k_db=args.rician_k_db, seed=args.seed)
    pcfg = _problem(args)
    if args.n < 1 or args.threads < 1:
        raise ConfigurationError("--n and --threads must be at least 1")

    def run():
        if args.checkpoint:
            params, _ = _loaded_model(args.checkpoint)
        else:
            params = init_params(spec.R, spec.T, args.hidden, args.k, seed=args.seed)
        if args.threads > 1:
            log.warning("timing with %d threads; wall times include contention", args.threads)
        data = generate(spec, args.n)
        records = ex.compare_methods(
            data,
            params,
            pcfg,
            wmmse_iters=args.wmmse_iters,
            trunc_iters=args.trunc_iters,
            family=spec.family,
            threads=args.threads,
        )
        _report(records, args.results, args.summary)

    return run


SWEEP_KEYS = {"problem", "cross", "size_sweep", "wmmse_iters", "trunc_iters"}


def _sweep_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read sweep config {path}: {exc}") from None
    unknown = set(doc) - SWEEP_KEYS
    if unknown:
        raise UsageError(f"unknown sweep config keys {sorted(unknown)}")
    return doc


def cmd_robustness(args):
    doc = _sweep_config(args.sweep_config)
    base = Path(args.sweep_config).parent
    prob = doc.get("problem", {})
    pcfg = ProblemConfig(
        d=int(prob.get("d", 1)),
        sigma=float(prob.get("sigma", TRAIN_DEFAULTS["sigma"])),
        p_max=float(prob.get("p_max", TRAIN_DEFAULTS["p_max"])),
        interference_mode=InterferenceMode.parse(prob.get("interference_mode", "exclude-self")),
    )
    kw = {"wmmse_iters": int(doc.get("wmmse_iters", 100)), "trunc_iters": int(doc.get("trunc_iters", 4))}

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    def models(section):
        return {label: load_checkpoint(resolve(p)).best_params for label, p in section["models"].items()}

    def run():
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if "cross" in doc:
            tests = {}
            for fam, p in doc["cross"]["test_data"].items():
                tests[Family.parse(fam)] = read_dataset(resolve(p))[1]
            groups = ex.robustness_cross_distribution(models(doc["cross"]), tests, pcfg, threads=args.threads, **kw)
            for (label, fam), recs in groups.items():
                stem = out / f"cross_{label}_on_{fam}"
                _write_group(recs, stem)
                print(f"cross model={label} test={fam} " + _means(recs))
        if "size_sweep" in doc:
            sw = dict(doc["size_sweep"])
            mdl = models(sw)
            spec = ex.SweepSpec(
                sizes=sw["sizes"],
                train_sizes=sw.get("train_sizes", ()),
                train_families=sw.get("train_families", ("geometric",)),
                test_families=sw.get("test_families", ("geometric",)),
                T=int(sw.get("T", 3)),
                R=int(sw.get("R", 3)),
                n_samples=int(sw.get("n_samples", 64)),
                seed=int(sw.get("seed", 1000)),
            )
            groups = ex.size_sweep(mdl, spec, pcfg, threads=args.threads, **kw)
            for (label, fam, M), recs in groups.items():
                _write_group(recs, out / f"size_{label}_{fam}_M{M}")
                print(f"size model={label} test={fam} M={M} " + _means(recs))

    return run


def _write_group(records, stem):
    ex.write_results(records, f"{stem}_results.csv")
    ex.write_summary(ex.summarize(records), f"{stem}_summary.csv")


def _means(records):
    return " ".join(f"{k}={v:.6g}" for k, v in ex.group_means(records).items())


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "robustness": cmd_robustness,
}


def _fail(exc, code):
    line = {"error": str(exc), "kind": type(exc).__name__, "exit_code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        run = COMMANDS[args.command](args)  # validation only; usage errors surface here
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigurationError, KeyError, TypeError) as exc:
        return _fail(exc, 2)
    try:
        run()
    except (UwmmseError, OSError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
