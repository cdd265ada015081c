"""Command-line interface: instance generation, invariant suites, sweeps.

Commands
--------
  gen     write tree / weight / function files from a generator spec
  check   run the invariant battery on seeded random instances (or on
          files named in the config); exit 2 on any mathematical failure
  sweep   run an exponent sweep, writing a deterministic CSV and fit JSON
  fit     re-fit an existing sweep CSV
  report  human-readable summary plus plot-ready points CSV

Options come from a JSON config file (--config) with flag overrides; flags
win. The seed resolution order is: --seed flag, config value, WML_SEED
environment variable, default 7. Exit codes: 0 success, 1 usage or config
error, 2 invariant failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .experiments import (SweepConfig, exponent_fit, leaf_scale_sweep,
                          matrix_target_exponent, power_weight,
                          rotating_weight, run_sweep, scalar_target_exponent)
from .filtration import build_dyadic, build_from_tree
from .io import (load_function_csv, load_tree, load_weight_csv,
                 read_sweep_csv, save_function_csv, save_tree,
                 save_weight_csv, write_fit_json, write_sweep_csv)
from .linalg import ValidationError
from .principal import default_threshold
from .suite import Instance, instance_checks, random_instance
from .weights import as_weight

USAGE_ERROR, CHECK_FAILURE = 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_ERROR)


def _resolve_seed(args, config):
    if args.seed is not None:
        return int(args.seed)
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("WML_SEED")
    if env is not None:
        return int(env)
    return 7


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValidationError("config file must contain a JSON object")
    return cfg


def _merged(config, args, keys):
    out = dict(config)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def cmd_gen(args):
    config = _load_config(args.config)
    opts = _merged(config, args, ("depth", "d", "p", "out"))
    seed = _resolve_seed(args, config)
    out = Path(opts.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    kind = opts.get("kind", "dyadic")
    depth = int(opts.get("depth", 4))
    d = int(opts.get("d", 1))
    rng = np.random.default_rng(seed)

    if kind == "dyadic":
        space = build_dyadic(depth)
    elif kind == "random":
        from .suite import random_tree_spec
        space = build_from_tree(random_tree_spec(rng, depth, 0.55, 3))
    else:
        raise ValidationError(f"unknown space kind {kind!r}")
    save_tree(out / "tree.json", space)
    written = [out / "tree.json"]

    wspec = opts.get("weight")
    if wspec:
        family = wspec.get("family", "power")
        alpha = float(wspec.get("alpha", 0.5))
        eps = float(wspec.get("eps", 2.0 ** -depth))
        if family == "power":
            space, W = power_weight(depth, alpha, eps)
        elif family == "rotating":
            space, W = rotating_weight(depth, d, alpha, eps)
        elif family == "lognormal":
            sigma = float(wspec.get("sigma", 1.0))
            W = as_weight(np.exp(rng.normal(0.0, sigma, space.n_leaves)))
        else:
            raise ValidationError(f"unknown weight family {family!r}")
        save_weight_csv(out / "weight.csv", W)
        written.append(out / "weight.csv")

    fspec = opts.get("function")
    if fspec:
        fd = int(fspec.get("d", d))
        values = rng.standard_normal((space.n_leaves, fd))
        save_function_csv(out / "function.csv", values)
        written.append(out / "function.csv")

    for path in written:
        print(path)
    return 0


def _file_instance(config, seed):
    space = load_tree(config["tree"])
    W = load_weight_csv(config["weight"]) if "weight" in config else \
        as_weight(np.ones(space.n_leaves))
    if "function" in config:
        f = np.asarray(load_function_csv(config["function"]), dtype=float)
        if f.ndim == 1:
            f = f[:, None]
    else:
        f = np.random.default_rng(seed).standard_normal(
            (space.n_leaves, W.dim))
    p = float(config.get("p", 2.0))
    return Instance(index=0, seed=seed, depth=space.depth, d=W.dim, p=p,
                    space=space, weight=W, f=f)


def cmd_check(args):
    config = _load_config(args.config)
    opts = _merged(config, args, ("p", "d", "depth", "cgamma", "out",
                                  "instances", "acceptance", "square_mode"))
    seed = _resolve_seed(args, config)
    out = Path(opts.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    threshold = float(opts["cgamma"]) if opts.get("cgamma") is not None \
        else default_threshold()
    fit_tol = float(opts.get("fit_tol", 2e-2))
    square_mode = opts.get("square_mode", "increments")

    instances = []
    if "tree" in opts:
        instances.append(_file_instance(opts, seed))
    else:
        count = int(opts.get("instances", 24))
        dims = (int(opts["d"]),) if opts.get("d") else (1, 2, 3)
        ps = (float(opts["p"]),) if opts.get("p") else (1.5, 2.0, 3.0, 4.0)
        depth_range = (int(opts["depth"]), int(opts["depth"])) \
            if opts.get("depth") else (4, 12)
        for i in range(count):
            instances.append(random_instance(
                i, seed=seed, depth_range=depth_range, dims=dims, ps=ps))

    summary = {}
    details = []
    for inst in instances:
        results, meta = instance_checks(inst, fit_tol=fit_tol,
                                        threshold=threshold,
                                        square_mode=square_mode)
        details.append({"index": inst.index, "meta": meta,
                        "results": [r.as_dict() for r in results]})
        for r in results:
            agg = summary.setdefault(r.name, {"passed": True, "worst": None,
                                              "bound": r.bound})
            agg["passed"] = agg["passed"] and r.passed
            if agg["worst"] is None or r.measured > agg["worst"]:
                agg["worst"] = r.measured
                agg["bound"] = r.bound

    if opts.get("acceptance"):
        records, fit = leaf_scale_sweep(p=2.0, d=1, seed=seed)
        summary["slope_window_p2"] = {
            "passed": 0.75 <= fit["slope"] <= 1.05,
            "worst": fit["slope"], "bound": scalar_target_exponent(2.0)}

    report = {"seed": seed, "threshold": threshold,
              "instances": len(instances),
              "summary": {k: summary[k] for k in sorted(summary)},
              "details": details}
    with open(out / "check_report.json", "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1, default=float)
        fh.write("\n")

    failed = False
    for name in sorted(summary):
        agg = summary[name]
        status = "PASS" if agg["passed"] else "FAIL"
        failed = failed or not agg["passed"]
        print(f"{status} {name}: measured {agg['worst']:.6g} "
              f"vs bound {agg['bound']:.6g}")
    print(f"report: {out / 'check_report.json'}")
    return CHECK_FAILURE if failed else 0


def cmd_sweep(args):
    config = _load_config(args.config)
    opts = _merged(config, args, ("p", "d", "out", "parallel"))
    seed = _resolve_seed(args, config)
    out = Path(opts.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    cfg = SweepConfig(
        family=opts.get("family", "power"),
        p=float(opts.get("p", 2.0)),
        d=int(opts.get("d", 1)),
        depths=tuple(opts.get("depths", (6, 8, 10))),
        alphas=tuple(opts.get("alphas", (0.4, 0.6, 0.8, 0.95))),
        epss=tuple(opts.get("epss", (0.25, 0.015625))),
        estimator=opts.get("estimator", "auto"),
        restarts=int(opts.get("restarts", 4)),
        seed=seed,
        fit_tol=float(opts.get("fit_tol", 2e-2)))
    records, fit = run_sweep(cfg, parallel=int(opts.get("parallel", 1)))
    write_sweep_csv(out / "sweep.csv", records)
    write_fit_json(out / "fit.json", fit)
    print(f"{len(records)} records -> {out / 'sweep.csv'}")
    print(f"slope {fit['slope']:.4f} (stderr {fit['stderr']:.4f}) "
          f"-> {out / 'fit.json'}")
    return 0


def cmd_fit(args):
    config = _load_config(args.config)
    opts = _merged(config, args, ("csv", "out"))
    if "csv" not in opts:
        raise ValidationError("fit needs --csv pointing at a sweep CSV")
    rows = read_sweep_csv(opts["csv"])
    slope, intercept, stderr = exponent_fit(
        [(r["ap_char"], r["ratio"]) for r in rows])
    fit = {"slope": slope, "intercept": intercept, "stderr": stderr,
           "n": len(rows)}
    out = Path(opts.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    write_fit_json(out / "fit.json", fit)
    print(f"slope {slope:.6f} intercept {intercept:.6f} "
          f"stderr {stderr:.6f} n {len(rows)}")
    return 0


def cmd_report(args):
    config = _load_config(args.config)
    opts = _merged(config, args, ("csv", "out"))
    if "csv" not in opts:
        raise ValidationError("report needs --csv pointing at a sweep CSV")
    rows = read_sweep_csv(opts["csv"])
    slope, intercept, stderr = exponent_fit(
        [(r["ap_char"], r["ratio"]) for r in rows])
    out = Path(opts.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)

    by_family = {}
    for r in rows:
        by_family.setdefault((r["family"], r["p"], r["d"]), []).append(r)

    lines = ["exponent sweep report", "====================="]
    for (family, p, d), rs in sorted(by_family.items()):
        target = scalar_target_exponent(p) if d == 1 else \
            matrix_target_exponent(p)
        kind = "scalar" if d == 1 else "matrix"
        aps = [r["ap_char"] for r in rs]
        lines.append(
            f"family {family} (p={p:g}, d={d}): {len(rs)} points, "
            f"characteristic in [{min(aps):.4g}, {max(aps):.4g}]")
        lines.append(
            f"  {kind} target exponent max bound: {target:.4g}; "
            f"fitted slope {slope:.4g} (stderr {stderr:.4g})")
    lines.append(f"overall: slope {slope:.6g}, intercept {intercept:.6g}, "
                 f"stderr {stderr:.6g}, n {len(rows)}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)

    with open(out / "points.csv", "w") as fh:
        fh.write("log_ap_char,log_ratio\n")
        for r in rows:
            fh.write(f"{repr(float(np.log(r['ap_char'])))},"
                     f"{repr(float(np.log(r['ratio'])))}\n")
    sys.stdout.write(text)
    print(f"points: {out / 'points.csv'}")
    return 0


def build_parser():
    parser = _Parser(prog="wml", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    common = dict(config=(("--config",), {"type": str, "default": None}),
                  seed=(("--seed",), {"type": int, "default": None}),
                  out=(("--out",), {"type": str, "default": None}))

    def add(name, func, extra=()):
        sp = sub.add_parser(name)
        for flag, kw in common.values():
            sp.add_argument(*flag, **kw)
        for flag, kw in extra:
            sp.add_argument(flag, **kw)
        sp.set_defaults(func=func)
        return sp

    add("gen", cmd_gen, extra=[
        ("--depth", {"type": int, "default": None}),
        ("--d", {"type": int, "default": None}),
        ("--p", {"type": float, "default": None}),
    ])
    add("check", cmd_check, extra=[
        ("--p", {"type": float, "default": None}),
        ("--d", {"type": int, "default": None}),
        ("--depth", {"type": int, "default": None}),
        ("--cgamma", {"type": float, "default": None}),
        ("--instances", {"type": int, "default": None}),
        ("--parallel", {"type": int, "default": None}),
        ("--acceptance", {"action": "store_true", "default": None}),
        ("--square-mode", {"type": str, "default": None,
                           "choices": ("increments", "first_value",
                                       "with_mean"),
                           "dest": "square_mode"}),
    ])
    add("sweep", cmd_sweep, extra=[
        ("--p", {"type": float, "default": None}),
        ("--d", {"type": int, "default": None}),
        ("--parallel", {"type": int, "default": None}),
    ])
    add("fit", cmd_fit, extra=[("--csv", {"type": str, "default": None})])
    add("report", cmd_report, extra=[("--csv", {"type": str, "default": None})])
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError,
            KeyError, NotADirectoryError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
