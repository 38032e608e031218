"""Command-line entry point.

Subcommands: ``flow``, ``train``, ``experiment``, ``stein``, ``hermite``.
Exit status 0 on success, 2 on usage or configuration errors, 1 on runtime
failures.  Options come from built-in defaults, then ``--config`` (JSON),
then ``--set key=value`` overrides, then explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

OUTPUT_ENV = "SPIKEDSIM_OUTPUT_DIR"
log = logging.getLogger("spikedsim")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ option handling


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, pairs, allowed=None) -> dict:
    """Apply ``a.b=c`` assignments in place; ``allowed`` restricts top-level keys."""
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"override {pair!r} is not of the form key=value")
        parts = key.split(".")
        if allowed is not None and parts[0] not in allowed:
            raise UsageError(f"unknown option {parts[0]!r} in override {pair!r}")
        node = doc
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise UsageError(f"override {pair!r}: {p!r} is not a mapping")
            node = nxt
        node[parts[-1]] = parse_value(raw)
    return doc


def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def resolve_options(args, defaults: dict) -> dict:
    opts = dict(defaults)
    cfg = load_config(args.config)
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
    opts.update(cfg)
    apply_overrides(opts, args.set, allowed=set(defaults))
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    return opts


def output_dir(args) -> str:
    out = args.output_dir or os.environ.get(OUTPUT_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return out


# ------------------------------------------------------------------ subcommands

FLOW_DEFAULTS = {"kind": "pop_normalized", "link": "hermite:2", "phi": "match", "d": 64, "m0": 0.1,
                 "eps": 0.01, "dt": None, "t_max": None, "kappa": 0.0, "r1": 0.0, "r2": None,
                 "integrator": "euler", "n": 4000, "n_prime_mode": "squared", "n_prime_cap": 200000,
                 "sigma": 0.0, "record_stride": 1, "seed": 0}


def _flow_init(kind, task, m0, seed):
    """Initial raw weight whose tracked alignment equals ``m0``.

    Spherical kinds track ``<w, u>``; the others track ``<w_bar, u_bar>``.
    """
    from .covmodel import random_unit
    from .rng import make_rng

    d = task.d
    ref = task.u if kind == "pop_spherical" else task.u_bar
    v = random_unit(make_rng(seed, "cli-init"), d)
    v -= (v @ ref) * ref
    v /= np.linalg.norm(v)
    target = m0 * ref + math.sqrt(max(1 - m0 * m0, 0.0)) * v
    if kind == "pop_spherical":
        return target
    return task.covariance.apply(-0.5, target)


def cmd_flow(args) -> int:
    from .covmodel import (SingleIndexTask, SpikedCovariance, construct_geometry, dataset_covariance,
                           init_first_layer, resolve_n_prime, sample_dataset)
    from .flows import EMPIRICAL_KINDS, KINDS, FlowConfig, integrate_flow
    from .hermite import get_link

    o = resolve_options(args, FLOW_DEFAULTS)
    if o["kind"] not in KINDS:
        raise UsageError(f"unknown flow kind {o['kind']!r}; choose from {KINDS}")
    empirical = o["kind"] in EMPIRICAL_KINDS
    link = get_link(o["link"])
    phi = o["phi"]
    if phi == "match":
        phi = "relu" if o["kind"] == "pop_spherical" or empirical else o["link"]
    u, theta, kappa = construct_geometry(int(o["d"]), float(o["r1"]), float(o["r2"] or 0.0), o["seed"])
    if o["r2"] is None:
        kappa = float(o["kappa"])
    task = SingleIndexTask(u, link, float(o["sigma"]), SpikedCovariance(int(o["d"]), kappa, theta))
    dt = o["dt"] if o["dt"] is not None else (0.05 if empirical else 1e-3)
    cfg = FlowConfig(dt=float(dt), t_max=o["t_max"], eps_target=float(o["eps"]),
                     record_stride=int(o["record_stride"]), integrator=o["integrator"])
    if empirical:
        n = int(o["n"])
        ds = sample_dataset(task, n, resolve_n_prime(o["n_prime_mode"], n, cap=int(o["n_prime_cap"])),
                            ("cli", o["seed"]))
        cov_hat = dataset_covariance(ds)
        from dataclasses import replace
        cfg = replace(cfg, dt=cfg.dt / cov_hat.lambda_max)
        w0 = init_first_layer(task.d, o["seed"], True, cov_hat, task.u_bar)
        trace = integrate_flow(o["kind"], w0, ds, cfg, phi=phi, cov_hat=cov_hat, task=task, seed=o["seed"])
    else:
        w0 = _flow_init(o["kind"], task, float(o["m0"]), o["seed"])
        trace = integrate_flow(o["kind"], w0, task, cfg, phi=phi, seed=o["seed"])
    path = os.path.join(output_dir(args), f"flow_{o['kind']}.csv")
    trace.to_csv(path)
    print(f"trace={path} hit_half={trace.hit_half} hit_eps={trace.hit_eps} "
          f"final_alignment={trace.final_alignment:.6f} sup_alignment={trace.sup_alignment:.6f}")
    return 0


TRAIN_DEFAULTS = {"d": 32, "r1": 0.0, "r2": 1.0, "link": "hermite:2", "sigma": 0.1, "m": 256, "n": 8000,
                  "kind": "emp_precond", "eps": 0.001, "c_lam": 0.1, "lam": None, "Delta": None,
                  "n_prime_mode": "squared", "n_prime_cap": 200000, "n_test": 100000, "seed": 0}


def cmd_train(args) -> int:
    from .covmodel import spiked_task
    from .flows import FlowConfig
    from .hermite import get_link
    from .network import TrainConfig, test_risk, train_algorithm1

    o = resolve_options(args, TRAIN_DEFAULTS)
    task = spiked_task(int(o["d"]), float(o["r1"]), float(o["r2"]), get_link(o["link"]), float(o["sigma"]),
                       o["seed"])
    cfg = TrainConfig(m=int(o["m"]), n=int(o["n"]), seed=o["seed"], stage1_kind=o["kind"], c_lam=float(o["c_lam"]),
                      lam=o["lam"], Delta=o["Delta"], stage1=FlowConfig(dt=0.05, eps_target=float(o["eps"])),
                      n_prime_mode=o["n_prime_mode"], n_prime_cap=int(o["n_prime_cap"]))
    res = train_algorithm1(task, cfg)
    risk = test_risk(res.net, task, int(o["n_test"]), o["seed"])
    out = output_dir(args)
    path = os.path.join(out, "net.json")
    res.net.to_json(path)
    print(f"net={path} alignment={res.alignment:.6f} lambda={res.lam:.6g} Delta={res.Delta:.6g} "
          f"test_risk={risk:.6f}")
    return 0


def cmd_experiment(args) -> int:
    from .lab import ExperimentSpec, run_experiment

    if args.config is None:
        raise UsageError("experiment needs --config <spec.json>")
    doc = load_config(args.config)
    apply_overrides(doc, args.set, allowed={"experiment", "grid", "seeds", "success_prob", "output_path", "options"})
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    spec = ExperimentSpec.from_dict(doc)
    out = args.output_dir or os.environ.get(OUTPUT_ENV) or spec.output_path or "."
    docs = run_experiment(spec, out, workers=args.workers, resume=not args.no_resume)
    for stem, d in docs.items():
        print(f"{stem}: pass={d['summary'].get('pass')} -> {os.path.join(out, stem)}.csv")
    return 0


STEIN_DEFAULTS = {"f": "relu", "g": "hermite:3", "rho": 0.6, "d": 3, "n_mc": 1000000, "k_se": 4.0, "seed": 0}


def cmd_stein(args) -> int:
    from .lab import stein_check

    o = resolve_options(args, STEIN_DEFAULTS)
    d, rho = int(o["d"]), float(o["rho"])
    if d < 2 or not -1 <= rho <= 1:
        raise UsageError("stein needs d >= 2 and rho in [-1, 1]")
    w = np.zeros(d)
    w[0] = 1.0
    u = np.zeros(d)
    u[0], u[1] = rho, math.sqrt(1 - rho * rho)
    res = stein_check(o["f"], o["g"], w, u, int(o["n_mc"]), o["seed"])
    ok = res["max_ratio"] <= float(o["k_se"])
    print(f"max_dev={res['max_dev']:.6g} se={res['se']:.6g} max_ratio={res['max_ratio']:.3f} pass={ok}")
    return 0


HERMITE_DEFAULTS = {"link": "relu", "J": 20, "K": 40}


def cmd_hermite(args) -> int:
    from .hermite import get_link, hermite_coeffs, information_exponent

    o = resolve_options(args, HERMITE_DEFAULTS)
    series = hermite_coeffs(get_link(o["link"]), int(o["J"]), int(o["K"]))
    s = information_exponent(series)
    print(f"link={o['link']}")
    for j, c in enumerate(series.coeffs):
        print(f"alpha_{j}={c:.12g}")
    print(f"information_exponent={s if s is not None else 'none'}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with options (experiment: an ExperimentSpec)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry; dotted keys reach nested entries")
    common.add_argument("--output-dir", help=f"where files are written (default ${OUTPUT_ENV} or .)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spikedsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("flow", parents=[common], help="integrate one flow and write its trace CSV")
    f.add_argument("--kind")
    f.add_argument("--link")
    f.add_argument("--phi", help="activation; 'match' uses the link for population normalized flows")
    f.add_argument("--d", type=int)
    f.add_argument("--m0", type=float, help="initial tracked alignment")
    f.add_argument("--eps", type=float)
    f.add_argument("--dt", type=float)
    f.add_argument("--t-max", dest="t_max", type=float)
    f.add_argument("--kappa", type=float)
    f.add_argument("--r1", type=float)
    f.add_argument("--r2", type=float)
    f.add_argument("--integrator", choices=["euler", "rk4"])
    f.add_argument("--n", type=int)
    f.add_argument("--sigma", type=float)
    f.add_argument("--record-stride", dest="record_stride", type=int)
    f.set_defaults(func=cmd_flow)

    t = sub.add_parser("train", parents=[common], help="run the layer-wise training pipeline once")
    for name, typ in [("d", int), ("r1", float), ("r2", float), ("link", str), ("sigma", float), ("m", int),
                      ("n", int), ("kind", str), ("eps", float), ("lam", float), ("n_test", int)]:
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    t.add_argument("--c-lam", dest="c_lam", type=float)
    t.add_argument("--Delta", dest="Delta", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", parents=[common], help="run an ExperimentSpec sweep")
    e.add_argument("--no-resume", action="store_true", help="ignore rows already in the output CSV")
    e.set_defaults(func=cmd_experiment)

    s = sub.add_parser("stein", parents=[common], help="Monte-Carlo check of the generalized Stein identity")
    s.add_argument("--f")
    s.add_argument("--g")
    s.add_argument("--rho", type=float)
    s.add_argument("--d", type=int)
    s.add_argument("--n-mc", dest="n_mc", type=int)
    s.set_defaults(func=cmd_stein)

    h = sub.add_parser("hermite", parents=[common], help="print Hermite coefficients and information exponent")
    h.add_argument("--link")
    h.add_argument("--J", dest="J", type=int)
    h.add_argument("--K", dest="K", type=int)
    h.set_defaults(func=cmd_hermite)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    from .lab import ConfigError

    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # argument-domain errors raised while building the run are configuration problems
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
