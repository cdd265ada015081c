"""Stopping times, principal sets and the pointwise sparse domination check.

Given (space, W, p, f) with reducing pair, the normalized fluctuation of
g = W^{-1/p} f relative to a base level n is measured by two ratios, both
divided by den = E_n ||dual_n^{-1} g||:

  * diff ratio at m:  (sum_{i=n+1}^{m} ||dual_n^{-1} d_i g||^2)^{1/2} / den
  * avg ratio at m:   ||dual_n^{-1} E_m g|| / den

with the convention that a ratio is 0 wherever den <= 1e-14 (matching the
vanishing-average indicator). Principal sets are produced generation by
generation: the first generation stops at the first level where the
combined ratio becomes positive, later generations at the first exceedance
of the threshold C. Each set P lives at its stopping level kappa2(P), and
its escape part E(P) collects the leaves where no further exceedance
occurs; escape parts carry at least half of the mass, which is what makes
the family sparse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filtration import cond_expect, cond_expect_leaf, martingale_of
from .linalg import ValidationError, matvec, spectral_norm
from .operators import SparseFamily, SparseSet, sparse_operator, weighted_square_fn
from .weights import as_weight

ZERO_DEN = 1e-14
POSITIVITY = 1e-12
INF = np.inf


def default_threshold():
    """Default stopping threshold 8 sqrt(e).

    Tracks the constants of the halving argument: the weak (1,1) constant
    sqrt(e) of the vector square function, a triangle-inequality factor 2,
    and a factor 4 so each of the two exceedance events keeps at most a
    quarter of the mass; the running-average ratio alone would only need 4.
    """
    return 8.0 * math.sqrt(math.e)


def iteration_constant(threshold):
    """Explicit constant K in the iterated tail-energy inequality
    b_1^2 <= b_N^2 + K sum_{m<=N} sum_{P_m} T(P_m) chi_{P_m}.

    One step costs 3 C^2 on the parent term (escape part, the within-window
    accumulation, and the stopping-level backtrack) plus 2 on the child
    term (the split of the stopping-level increment), so K = 3 C^2 + 2,
    with C clamped below by 1 where the backtrack uses plain contractivity.
    """
    c = max(float(threshold), 1.0)
    return 3.0 * c * c + 2.0


def domination_constant(threshold):
    """Pointwise bound for S_W f / T_{W,2} f on the generated family:
    sqrt(iteration_constant + 1), the extra 1 covering the first-generation
    stopping-level term."""
    return math.sqrt(iteration_constant(threshold) + 1.0)


@dataclass(frozen=True)
class FluctuationTable:
    """Numerators and denominator of both fluctuation ratios at one base.

    diff_num[m], avg_num[m] are per-leaf numerators for target level m
    (rows 0..base are zero); den is the per-leaf denominator. ``ratio``
    combines both numerators and applies the vanishing-den convention.
    """

    base: int
    den: np.ndarray        # (L,)
    diff_num: np.ndarray   # (D + 1, L)
    avg_num: np.ndarray    # (D + 1, L)

    @property
    def ratio(self):
        live = self.den > ZERO_DEN
        num = np.maximum(self.diff_num, self.avg_num)
        return np.where(live, num / np.where(live, self.den, 1.0), 0.0)

    def diff_ratio(self, m):
        live = self.den > ZERO_DEN
        return np.where(live, self.diff_num[m] / np.where(live, self.den, 1.0), 0.0)

    def avg_ratio(self, m):
        live = self.den > ZERO_DEN
        return np.where(live, self.avg_num[m] / np.where(live, self.den, 1.0), 0.0)


def fluctuation_table(space, W, p, pair, f, base):
    """FluctuationTable of g = W^{-1/p} f relative to the given base level."""
    if not 0 <= base < space.depth:
        raise ValidationError("base level must satisfy 0 <= base < depth")
    f = np.atleast_2d(np.asarray(f, dtype=float).T).T
    g = matvec(pair.wm, f)
    mart = martingale_of(space, g)
    dual_inv = space.expand(base, pair.dual_inv[base])
    den = cond_expect_leaf(
        space, np.linalg.norm(matvec(dual_inv, g), axis=1), base)

    depth, n_leaves = space.depth, space.n_leaves
    diff_num = np.zeros((depth + 1, n_leaves))
    avg_num = np.zeros((depth + 1, n_leaves))
    acc = np.zeros(n_leaves)
    for m in range(base + 1, depth + 1):
        acc = acc + np.sum(matvec(dual_inv, mart.diff(m)) ** 2, axis=1)
        diff_num[m] = np.sqrt(acc)
        avg_num[m] = np.linalg.norm(matvec(dual_inv, mart.leaf_levels[m]), axis=1)
    return FluctuationTable(base=base, den=den, diff_num=diff_num,
                            avg_num=avg_num)


def halving_check(space, W, p, pair, f, n, threshold, leaves):
    """True iff, inside the level-n measurable set given by ``leaves``, the
    exceedance event {sup_{m>n} ratio > threshold} carries at most the mass
    of its complement."""
    leaves = np.asarray(leaves, dtype=np.intp)
    atoms = np.unique(space.atom_of_leaf[n][leaves])
    covered = np.concatenate([
        np.arange(space.offsets[n][a], space.offsets[n][a + 1]) for a in atoms
    ]) if atoms.size else np.empty(0, dtype=np.intp)
    if not np.array_equal(np.sort(leaves), covered):
        raise ValidationError("set is not a union of level-n atoms")
    if leaves.size == 0 or n >= space.depth:
        return True  # nothing above the base level: empty supremum
    table = fluctuation_table(space, W, p, pair, f, n)
    sup = table.ratio[n + 1:, leaves].max(axis=0)
    probs = space.leaf_probs[leaves]
    return float(probs[sup > threshold].sum()) <= float(
        probs[sup <= threshold].sum()) + 1e-15


@dataclass(frozen=True)
class PrincipalSet:
    """One principal set: stopped at level kappa2, generated at kappa1."""

    generation: int
    kappa1: int
    kappa2: int
    leaves: np.ndarray   # sorted leaf indices
    atoms: np.ndarray    # level-kappa2 atom indices covering the leaves
    tau: np.ndarray      # per entry of ``leaves``: next stopping level or inf
    escape: np.ndarray   # leaf indices with tau == inf (the escape part)
    parent: int          # index into PrincipalFamily.sets, -1 for generation 1

    def probability(self, space):
        return float(space.leaf_probs[self.leaves].sum())

    def escape_probability(self, space):
        return float(space.leaf_probs[self.escape].sum())


@dataclass(frozen=True)
class PrincipalFamily:
    """All generations of principal sets for one (space, W, p, f) instance."""

    space: object
    weight: object
    p: float
    f: np.ndarray
    threshold: float
    sets: tuple

    @property
    def generations(self):
        out = {}
        for s in self.sets:
            out.setdefault(s.generation, []).append(s)
        return [out[g] for g in sorted(out)]

    def generation(self, m):
        return [s for s in self.sets if s.generation == m]

    def first_stop_never(self):
        """Leaves where the first-generation stopping time is infinite."""
        taken = np.concatenate([s.leaves for s in self.generation(1)]) if \
            self.generation(1) else np.empty(0, dtype=np.intp)
        mask = np.ones(self.space.n_leaves, dtype=bool)
        mask[taken] = False
        return np.nonzero(mask)[0]

    def to_sparse_family(self):
        return SparseFamily(self.space, tuple(
            SparseSet(s.generation, s.kappa1, s.kappa2, s.atoms)
            for s in self.sets))


def build_principal_family(space, W, p, pair, f, threshold=None):
    """Generation-by-generation principal sets for (space, W, p, f).

    Generation 1 stops at the first level where the fluctuation ratio
    exceeds the positivity threshold 1e-12; every later generation stops at
    the first exceedance of ``threshold`` (default default_threshold()),
    always restricted to its parent set. Construction terminates because
    each stopping level strictly increases, so there are at most D
    generations.
    """
    W = as_weight(W)
    if threshold is None:
        threshold = default_threshold()
    f = np.asarray(f, dtype=float)
    tables = {}

    def table(base):
        if base not in tables:
            tables[base] = fluctuation_table(space, W, p, pair, f, base)
        return tables[base]

    def stopping(base, leaves, cut):
        """Per leaf: first level > base with ratio > cut, else inf."""
        if base >= space.depth:
            return np.full(leaves.size, INF)
        ratios = table(base).ratio[base + 1:, leaves]
        hit = ratios > cut
        any_hit = hit.any(axis=0)
        first = base + 1 + hit.argmax(axis=0)
        return np.where(any_hit, first.astype(float), INF)

    def make_set(generation, kappa1, kappa2, leaves, parent):
        tau = stopping(kappa2, leaves, threshold)
        return PrincipalSet(
            generation=generation, kappa1=kappa1, kappa2=kappa2,
            leaves=leaves, atoms=np.unique(space.atom_of_leaf[kappa2][leaves]),
            tau=tau, escape=leaves[np.isinf(tau)], parent=parent)

    sets = []
    all_leaves = np.arange(space.n_leaves)
    tau1 = stopping(0, all_leaves, POSITIVITY)
    frontier = []
    for j in range(1, space.depth + 1):
        members = all_leaves[tau1 == j]
        if members.size:
            ps = make_set(1, 0, j, members, -1)
            frontier.append(len(sets))
            sets.append(ps)

    while frontier:
        next_frontier = []
        for idx in frontier:
            parent = sets[idx]
            for j in range(parent.kappa2 + 1, space.depth + 1):
                members = parent.leaves[parent.tau == j]
                if members.size:
                    ps = make_set(parent.generation + 1, parent.kappa2, j,
                                  members, idx)
                    next_frontier.append(len(sets))
                    sets.append(ps)
        frontier = next_frontier

    return PrincipalFamily(space=space, weight=W, p=p, f=f,
                           threshold=float(threshold), sets=tuple(sets))


# ---------------------------------------------------------------------------
# property checks
# ---------------------------------------------------------------------------

def _weighted_diff_norms(space, pair, f, first_value=False):
    """(D, L) array of ||W^{1/p}(l) d_k g(l)|| for k = 1..D."""
    f = np.atleast_2d(np.asarray(f, dtype=float).T).T
    g = matvec(pair.wm, f)
    mart = martingale_of(space, g)
    diffs = mart.first_value_diffs() if first_value else mart.diffs
    return np.linalg.norm(np.einsum("lij,klj->kli", pair.wp, diffs), axis=2)


def _set_term(space, pair, f, s, level_avg):
    """Per-leaf values of ||W^{1/p} dual_{k2}|| E_{k2}||dual_{k2}^{-1} g||
    on the leaves of the sparse or principal set s."""
    atom_of = space.atom_of_leaf[s.kappa2][s.leaves]
    norms = spectral_norm(pair.wp[s.leaves] @ pair.dual[s.kappa2][atom_of])
    return norms * level_avg(s.kappa2)[atom_of]


def _level_average_fn(space, pair, f):
    f2 = np.atleast_2d(np.asarray(f, dtype=float).T).T
    h = matvec(pair.wm, f2)
    cache = {}

    def level(n):
        if n not in cache:
            vals = np.linalg.norm(
                matvec(space.expand(n, pair.dual_inv[n]), h), axis=1)
            cache[n] = cond_expect(space, vals, n)
        return cache[n]

    return level


def check_properties(family, space, W, p, pair, f, tol=1e-10):
    """Structural and quantitative properties of the built family.

    Returns a dict with one boolean per property:
      escape_disjoint     escape parts pairwise disjoint across all sets
      measurable          every set is a union of its level-kappa2 atoms
      window_bounds       on each set of generation >= 2, accumulated
                          fluctuation below the stopping level stays below
                          threshold * den (both ratio flavors)
      escape_bounds       same control beyond the stopping level on escape
                          parts of generation >= 2 sets
      escape_mass         P(P) <= 2 P(E(P)) and, atomwise, the escape part
                          fills at least half of every atom (generation >= 2)
      terminates          no generation index exceeds the depth
    plus measured extremes and the generation-1 values reported
    informationally (the quantitative claims are stated for later
    generations; generation 1 satisfies them by the same construction).
    """
    W = as_weight(W)
    C = family.threshold
    tables = {}

    def table(base):
        if base not in tables:
            tables[base] = fluctuation_table(space, W, p, pair, f, base)
        return tables[base]

    report = {"threshold": C, "tol": tol}
    escapes = [s.escape for s in family.sets]
    all_escape = np.concatenate(escapes) if escapes else np.empty(0, dtype=np.intp)
    report["escape_disjoint"] = bool(
        np.unique(all_escape).size == all_escape.size)

    measurable = True
    for s in family.sets:
        off = space.offsets[s.kappa2]
        covered = np.concatenate([np.arange(off[a], off[a + 1])
                                  for a in s.atoms])
        if not np.array_equal(covered, s.leaves):
            measurable = False
    report["measurable"] = measurable

    def window_values(s):
        t = table(s.kappa1)
        idx = s.leaves
        diff = t.diff_num[s.kappa2 - 1, idx] if s.kappa2 - 1 > s.kappa1 \
            else np.zeros(idx.size)
        if s.kappa1 + 1 <= s.kappa2 - 1:
            avg = t.avg_num[s.kappa1 + 1:s.kappa2, idx].max(axis=0)
        else:
            avg = np.zeros(idx.size)
        return diff - C * t.den[idx], avg - C * t.den[idx]

    def escape_values(s):
        t = table(s.kappa2) if s.kappa2 < space.depth else None
        idx = s.escape
        if t is None or idx.size == 0:
            return np.zeros(idx.size), np.zeros(idx.size)
        diff = t.diff_num[space.depth, idx]
        avg = t.avg_num[s.kappa2 + 1:, idx].max(axis=0)
        return diff - C * t.den[idx], avg - C * t.den[idx]

    worst_window, worst_escape = -np.inf, -np.inf
    gen1_window, gen1_escape = -np.inf, -np.inf
    mass_ok = True
    worst_mass = 1.0
    for s in family.sets:
        dv, av = window_values(s)
        ev1, ev2 = escape_values(s)
        wv = max(dv.max(initial=-np.inf), av.max(initial=-np.inf))
        evv = max(ev1.max(initial=-np.inf), ev2.max(initial=-np.inf))
        if s.generation >= 2:
            worst_window = max(worst_window, wv)
            worst_escape = max(worst_escape, evv)
            prob = s.probability(space)
            eprob = s.escape_probability(space)
            if prob > 2.0 * eprob + tol:
                mass_ok = False
            escape_mask = np.zeros(space.n_leaves, dtype=bool)
            escape_mask[s.escape] = True
            for a in s.atoms:
                lo, hi = space.offsets[s.kappa2][a], space.offsets[s.kappa2][a + 1]
                pa = space.leaf_probs[lo:hi]
                frac = float(pa[escape_mask[lo:hi]].sum() / pa.sum())
                worst_mass = min(worst_mass, frac)
                if frac < 0.5 - tol:
                    mass_ok = False
        else:
            gen1_window = max(gen1_window, wv)
            gen1_escape = max(gen1_escape, evv)

    report["window_bounds"] = bool(worst_window <= tol)
    report["escape_bounds"] = bool(worst_escape <= tol)
    report["escape_mass"] = mass_ok
    report["worst_window_slack"] = float(worst_window)
    report["worst_escape_slack"] = float(worst_escape)
    report["worst_escape_atom_fraction"] = float(worst_mass)
    report["gen1_window_slack"] = float(gen1_window)
    report["gen1_escape_slack"] = float(gen1_escape)
    max_gen = max((s.generation for s in family.sets), default=0)
    report["terminates"] = bool(max_gen <= space.depth)
    report["max_generation"] = int(max_gen)
    report["ok"] = all(report[k] for k in (
        "escape_disjoint", "measurable", "window_bounds", "escape_bounds",
        "escape_mass", "terminates"))
    return report


def tail_energy(family, space, W, p, f, m, pair=None):
    """Per-leaf tail energy of generation m: on each set of generation m,
    (sum_{k > kappa2} ||W^{1/p} d_k g||^2)^{1/2}; zero elsewhere or when the
    generation is empty."""
    W = as_weight(W)
    if pair is None:
        raise ValidationError("tail_energy needs the reducing pair for W^{1/p}")
    if m > space.depth:
        return np.zeros(space.n_leaves)
    wnorm = _weighted_diff_norms(space, pair, f)
    out = np.zeros(space.n_leaves)
    for s in family.generation(m):
        if s.kappa2 < space.depth:
            out[s.leaves] = np.sqrt(
                np.sum(wnorm[s.kappa2:, s.leaves] ** 2, axis=0))
    return out


def iteration_check(family, space, W, p, pair, f, tol=1e-10):
    """Verify the iterated tail-energy inequality pointwise for every cut N:
    b_1^2 <= b_N^2 + K sum_{m<=N} sum_{P_m} T(P_m) chi_{P_m}, with the
    derived K = iteration_constant(threshold); T is the squared sparse term
    of the set. Returns the report with the worst slack."""
    W = as_weight(W)
    k_it = iteration_constant(family.threshold)
    level_avg = _level_average_fn(space, pair, f)
    wnorm = _weighted_diff_norms(space, pair, f)

    def b_squared(m):
        out = np.zeros(space.n_leaves)
        for s in family.generation(m):
            if s.kappa2 < space.depth:
                out[s.leaves] = np.sum(wnorm[s.kappa2:, s.leaves] ** 2, axis=0)
        return out

    b1 = b_squared(1)
    max_gen = max((s.generation for s in family.sets), default=0)
    running = np.zeros(space.n_leaves)
    worst = -np.inf
    for n_cut in range(1, max_gen + 2):
        for s in family.generation(n_cut):
            vals = _set_term(space, pair, f, s, level_avg)
            running[s.leaves] += vals ** 2
        bn = b_squared(n_cut) if n_cut <= max_gen else np.zeros(space.n_leaves)
        slack = b1 - bn - k_it * running
        worst = max(worst, float(slack.max(initial=-np.inf)))
    scale = max(1.0, float(b1.max(initial=0.0)))
    return {"constant": k_it, "worst_slack": worst,
            "ok": bool(worst <= tol * scale), "tol": tol}


def vanish_checks(family, space, W, p, pair, f, tol=1e-10):
    """(i) The weighted square function vanishes off the first generation;
    (ii) on each first-generation set there is no weighted difference energy
    below the stopping level. Returns measured maxima and booleans."""
    W = as_weight(W)
    s_public = weighted_square_fn(space, W, p, f, pair=pair)
    never = family.first_stop_never()
    off_value = float(s_public[never].max(initial=0.0))

    wnorm = _weighted_diff_norms(space, pair, f)
    below = 0.0
    for s in family.generation(1):
        if s.kappa2 >= 2:
            below = max(below, float(
                np.sum(wnorm[:s.kappa2 - 1, s.leaves] ** 2, axis=0).max()))
    return {"off_first_generation_max": off_value,
            "below_stop_max": math.sqrt(below),
            "ok": bool(off_value <= tol and math.sqrt(below) <= tol),
            "tol": tol}


def sparse_domination_check(space, W, p, pair, f, threshold=None, family=None):
    """Pointwise domination of the weighted square function by the r = 2
    sparse operator of the generated family.

    Uses the first-value square-function convention (the level-0 mean jump
    is not counted), under which the domination carries the explicit
    constant domination_constant(threshold). Returns a dict with the max
    ratio, the bound, and the pass flag; a leaf where the square function
    exceeds 1e-10 while the sparse operator is below 1e-14 is a hard fail.
    """
    W = as_weight(W)
    if threshold is None:
        threshold = default_threshold()
    if family is None:
        family = build_principal_family(space, W, p, pair, f, threshold)
    s_fn = weighted_square_fn(space, W, p, f, pair=pair, mode="first_value")
    t_fn = sparse_operator(space, W, p, pair, family.to_sparse_family(), 2.0, f)
    dead = t_fn <= ZERO_DEN
    hard_fail = bool(np.any(dead & (s_fn > 1e-10)))
    ratio = np.where(dead, 0.0, s_fn / np.where(dead, 1.0, t_fn))
    bound = domination_constant(threshold)
    max_ratio = float(ratio.max(initial=0.0))
    return {"max_ratio": max_ratio, "bound": bound,
            "hard_fail": hard_fail, "family": family,
            "ok": bool(not hard_fail and max_ratio <= bound)}
