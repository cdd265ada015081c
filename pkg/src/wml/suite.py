"""Seeded random instances and the per-instance invariant check battery.

The CLI ``check`` command and the acceptance tests both run this battery,
so the command-line report and the test suite cannot drift apart. Each
check returns a CheckResult with the measured quantity and the asserted
bound; a check either encodes an identity of the construction or a derived
explicit constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filtration import build_from_tree, cond_expect, lp_norm, martingale_of
from .operators import (sparse_operator, square_fn, weighted_cond_expect,
                        weighted_square_fn, lp_weighted_norm)
from .principal import (build_principal_family, check_properties,
                        default_threshold, fluctuation_table,
                        iteration_check, sparse_domination_check,
                        vanish_checks)
from .weights import (MatrixWeight, ap_characteristic, ap_equivalents,
                      as_weight, build_reducing_pair, conjugate,
                      exchanged_pair, verify_reducing_bounds)

DEPTH_RANGE = (4, 12)
DIMS = (1, 2, 3)
PS = (1.5, 2.0, 3.0, 4.0)
# expected branching per dimension, tuned so the reducer fits stay cheap
SPLIT = {1: (0.6, 3), 2: (0.5, 3), 3: (0.42, 2)}


@dataclass(frozen=True)
class Instance:
    index: int
    seed: int
    depth: int
    d: int
    p: float
    space: object
    weight: MatrixWeight
    f: np.ndarray


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    info: str = ""

    def as_dict(self):
        return {"name": self.name, "passed": self.passed,
                "measured": self.measured, "bound": self.bound,
                "info": self.info}


def random_tree_spec(rng, depth, split_p, max_children):
    """Random refining tree of exactly the given depth with random masses."""

    def node(mass, lvl, force):
        out = {"mass": mass}
        if lvl < depth and (force or rng.random() < split_p):
            k = int(rng.integers(2, max_children + 1))
            fracs = rng.dirichlet(np.ones(k) * 2.0)
            chosen = int(rng.integers(0, k)) if force else -1
            out["children"] = [
                node(mass * fr, lvl + 1, force and i == chosen)
                for i, fr in enumerate(fracs)]
        return out

    return node(1.0, 0, True)


def random_instance(index, seed=7, depth_range=DEPTH_RANGE, dims=DIMS, ps=PS,
                    weight_sigma=1.2, heavy_tail=1.5):
    """Deterministic random instance number ``index`` of the suite."""
    child_seed = np.random.SeedSequence([seed, index])
    rng = np.random.default_rng(child_seed)
    depth = int(rng.integers(depth_range[0], depth_range[1] + 1))
    d = int(dims[index % len(dims)])
    p = float(ps[(index // len(dims)) % len(ps)])
    split_p, max_children = SPLIT[d]
    space = build_from_tree(random_tree_spec(rng, depth, split_p, max_children))
    n = space.n_leaves
    if d == 1:
        weight = as_weight(np.exp(rng.normal(0.0, weight_sigma, n)))
    else:
        q, _ = np.linalg.qr(rng.standard_normal((n, d, d)))
        lam = np.exp(rng.normal(0.0, weight_sigma, (n, d)))
        weight = MatrixWeight(np.einsum("lij,lj,lkj->lik", q, lam, q))
    f = rng.standard_normal((n, d)) * np.exp(rng.normal(0.0, heavy_tail, (n, 1)))
    return Instance(index=index, seed=seed, depth=space.depth, d=d, p=p,
                    space=space, weight=weight, f=f)


def _halving_check_all_atoms(inst, pair, threshold):
    """Worst exceedance fraction over every (level, atom) pair: the event
    {sup_{m>n} ratio > threshold} may carry at most half of each atom.
    Covering atoms covers every level-n measurable set."""
    space, W, p, f = inst.space, inst.weight, inst.p, inst.f
    worst = 0.0
    for n in range(space.depth):
        table = fluctuation_table(space, W, p, pair, f, n)
        sup = table.ratio[n + 1:].max(axis=0)
        exceed = np.add.reduceat(space.leaf_probs * (sup > threshold),
                                 space.offsets[n][:-1])
        frac = exceed / space.atom_probs[n]
        worst = max(worst, float(frac.max()))
    return CheckResult("mass_halving", worst <= 0.5 + 1e-12, worst, 0.5,
                       f"threshold {threshold:g}")


def _holder_check(inst, pair, family, tol=1e-10):
    """Pointwise comparison of the r = 2 sparse operator against r = 1 and
    r = p: interpolation for p > 2, plain embedding for p <= 2."""
    space, W, p, f = inst.space, inst.weight, inst.p, inst.f
    sparse = family.to_sparse_family()
    t2 = sparse_operator(space, W, p, pair, sparse, 2.0, f)
    tp = sparse_operator(space, W, p, pair, sparse, p, f)
    if p <= 2.0:
        gap = float(np.max(t2 - tp, initial=-np.inf))
        return CheckResult("sparse_embedding", gap <= tol, gap, tol,
                           "T_2 <= T_p pointwise")
    t1 = sparse_operator(space, W, p, pair, sparse, 1.0, f)
    theta = p / (2.0 * p - 2.0)
    rhs = t1 ** (1.0 - theta) * tp ** theta
    gap = float(np.max(t2 - rhs * (1.0 + 1e-12), initial=-np.inf))
    return CheckResult("sparse_interpolation", gap <= tol, gap, tol,
                       "T_2 <= T_1^(1-theta) T_p^theta pointwise")


def _scalar_checks(inst, rng, tol_identity=1e-12, tol_conj=1e-10):
    """Tilted conditional expectation identity and the conjugation identity
    linking the weighted square function to the plain one (d = 1 only)."""
    space = inst.space
    n = space.n_leaves
    w = np.exp(rng.normal(0.0, 1.0, n))
    h = rng.standard_normal(n)
    p = inst.p
    out = []
    level = int(rng.integers(0, space.depth + 1))
    lhs = weighted_cond_expect(space, w, h, level)
    rhs = cond_expect(space, w * h, level) / cond_expect(space, w, level)
    err = float(np.max(np.abs(lhs - rhs)))
    out.append(CheckResult("tilted_average_identity", err <= tol_identity,
                           err, tol_identity))
    sw = weighted_square_fn(space, as_weight(w), p, w ** (1.0 / p) * h)
    plain = w ** (1.0 / p) * square_fn(space, martingale_of(space, h))
    err = float(np.max(np.abs(sw - plain)))
    out.append(CheckResult("conjugation_pointwise", err <= tol_conj, err,
                           tol_conj))
    lhs_n = lp_norm(space, sw, p)
    rhs_n = lp_weighted_norm(space, as_weight(w), p,
                             square_fn(space, martingale_of(space, h)))
    err = abs(lhs_n - rhs_n) / max(rhs_n, 1e-300)
    out.append(CheckResult("conjugation_norms", err <= tol_conj, err, tol_conj))
    return out


def instance_checks(inst, fit_tol=2e-2, threshold=None, with_scalar=True,
                    square_mode="increments"):
    """Run the full battery on one instance; returns a list of CheckResult.

    ``square_mode`` only affects the informational square-function norm in
    the returned metadata (the domination check always uses the first-value
    convention it is provable under).
    """
    if threshold is None:
        threshold = default_threshold()
    space, W, p, f = inst.space, inst.weight, inst.p, inst.f
    d = W.dim
    results = []
    pair = build_reducing_pair(space, W, p, tol=fit_tol,
                               seed=inst.seed + inst.index)

    if pair.certificate:
        lo = min(pair.certificate["primal"]["low"],
                 pair.certificate["dual"]["low"])
        hi = max(pair.certificate["primal"]["high"],
                 pair.certificate["dual"]["high"])
        window_lo = 1.0 / ((1.0 + pair.cert_tol) * math.sqrt(d))
        results.append(CheckResult(
            "reducer_certificate", lo >= window_lo and hi <= 1.0 + pair.cert_tol,
            lo, window_lo, f"held-out ratios in [{lo:.4f}, {hi:.4f}]"))

    rep = verify_reducing_bounds(space, W, p, pair)
    results.append(CheckResult(
        "reducer_average_primal", rep["primal_ok"], rep["primal_max"],
        rep["primal_bound"]))
    results.append(CheckResult(
        "reducer_average_dual", rep["dual_ok"], rep["dual_max"],
        rep["dual_bound"]))

    ap = ap_characteristic(space, W, p, pair=pair)
    q1, q2, window = ap_equivalents(space, W, p, pair)
    ok = (1.0 / window <= q1 / ap <= window) and (1.0 / window <= q2 / ap <= window)
    results.append(CheckResult(
        "characteristic_equivalents", ok, max(q1 / ap, ap / q1, q2 / ap, ap / q2),
        window, f"q1/ap={q1 / ap:.3f} q2/ap={q2 / ap:.3f}"))

    q = conjugate(p)
    ap_dual = ap_characteristic(space, None, q, pair=exchanged_pair(pair))
    target = ap ** (q - 1.0)
    rel = abs(ap_dual - target) / max(target, 1e-300)
    results.append(CheckResult("dual_exponent_identity", rel <= 1e-8, rel, 1e-8,
                               f"[V]={ap_dual:.6g} [W]^(q-1)={target:.6g}"))

    results.append(_halving_check_all_atoms(inst, pair, threshold))

    family = build_principal_family(space, W, p, pair, f, threshold)
    rep = check_properties(family, space, W, p, pair, f)
    results.append(CheckResult(
        "principal_properties", rep["ok"],
        max(rep["worst_window_slack"], rep["worst_escape_slack"]), rep["tol"],
        f"max generation {rep['max_generation']}"))

    it = iteration_check(family, space, W, p, pair, f)
    results.append(CheckResult("tail_iteration", it["ok"], it["worst_slack"],
                               it["tol"], f"constant {it['constant']:.4g}"))

    van = vanish_checks(family, space, W, p, pair, f)
    results.append(CheckResult(
        "vanishing", van["ok"],
        max(van["off_first_generation_max"], van["below_stop_max"]),
        van["tol"]))

    dom = sparse_domination_check(space, W, p, pair, f, threshold, family)
    results.append(CheckResult(
        "pointwise_domination", dom["ok"], dom["max_ratio"], dom["bound"],
        "hard fail" if dom["hard_fail"] else ""))

    results.append(_holder_check(inst, pair, family))

    if with_scalar:
        rng = np.random.default_rng(np.random.SeedSequence(
            [inst.seed, inst.index, 1]))
        results.extend(_scalar_checks(inst, rng))

    square_lp = lp_norm(space, weighted_square_fn(
        space, W, p, f, pair=pair, mode=square_mode), p)
    return results, {"ap_char": ap, "max_ratio": dom["max_ratio"],
                     "q1_over_ap": q1 / ap, "q2_over_ap": q2 / ap,
                     "depth": space.depth, "d": d, "p": p,
                     "n_leaves": space.n_leaves,
                     "square_mode": square_mode, "square_lp_norm": square_lp,
                     "generations": len(family.generations)}
