"""Finite filtered probability spaces and martingales.

A space is a refining sequence of partitions (levels 0..D) of a finite leaf
set. Leaves are ordered so that every atom of every level is a contiguous
leaf range; a level is stored as the array of range offsets. Level 0 is the
trivial partition {Omega}; level D separates all leaves. Atoms may persist
unchanged across several levels (chains), so arbitrary branching trees are
representable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ValidationError

PROB_TOL = 1e-12


@dataclass(frozen=True)
class FilteredSpace:
    """Refining partition tree with atom probabilities.

    Attributes
    ----------
    depth : number of refinement steps D (levels run 0..D).
    leaf_probs : (L,) positive, summing to 1.
    offsets : per level, int array of atom boundaries into the leaf axis;
        level n has ``len(offsets[n]) - 1`` atoms, atom a covering leaves
        ``offsets[n][a]:offsets[n][a + 1]``.
    """

    depth: int
    leaf_probs: np.ndarray
    offsets: tuple

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        probs = np.asarray(self.leaf_probs, dtype=float)
        n_leaves = probs.shape[0]
        if probs.ndim != 1 or n_leaves < 1:
            raise ValidationError("leaf_probs must be a 1-d array")
        if np.any(probs <= 0.0):
            raise ValidationError("every atom must have positive probability")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValidationError(
                f"leaf probabilities sum to {probs.sum()!r}, expected 1")
        if len(self.offsets) != self.depth + 1:
            raise ValidationError("need one offset array per level 0..D")
        prev = None
        for n, off in enumerate(self.offsets):
            off = np.asarray(off)
            if off[0] != 0 or off[-1] != n_leaves or np.any(np.diff(off) <= 0):
                raise ValidationError(f"level {n} offsets malformed")
            if prev is not None and not np.isin(prev, off).all():
                raise ValidationError(f"level {n} does not refine level {n - 1}")
            prev = off
        if len(self.offsets[0]) != 2:
            raise ValidationError("level 0 must be the single atom Omega")
        if len(self.offsets[-1]) != n_leaves + 1:
            raise ValidationError("level D atoms must be the leaves")
        probs.setflags(write=False)
        object.__setattr__(self, "leaf_probs", probs)
        object.__setattr__(self, "offsets", tuple(
            np.asarray(o, dtype=np.intp) for o in self.offsets))
        atom_probs, atom_of_leaf, parent = [], [], []
        for n, off in enumerate(self.offsets):
            ap = np.add.reduceat(probs, off[:-1])
            ap.setflags(write=False)
            atom_probs.append(ap)
            lab = np.repeat(np.arange(len(off) - 1), np.diff(off))
            lab.setflags(write=False)
            atom_of_leaf.append(lab)
            if n == 0:
                parent.append(np.zeros(1, dtype=np.intp))
            else:
                parent.append(atom_of_leaf[n - 1][off[:-1]])
        object.__setattr__(self, "atom_probs", tuple(atom_probs))
        object.__setattr__(self, "atom_of_leaf", tuple(atom_of_leaf))
        object.__setattr__(self, "parent", tuple(parent))

    @property
    def n_leaves(self):
        return self.leaf_probs.shape[0]

    def n_atoms(self, n):
        return len(self.offsets[n]) - 1

    def atom_slices(self, n):
        off = self.offsets[n]
        return [(int(off[a]), int(off[a + 1])) for a in range(len(off) - 1)]

    def expand(self, n, atom_values):
        """Broadcast per-atom values at level n back to the leaf axis."""
        return np.repeat(atom_values, np.diff(self.offsets[n]), axis=0)


def _leaf_array(space, f):
    arr = np.asarray(f, dtype=float)
    if arr.shape[0] != space.n_leaves or arr.ndim > 2:
        raise ValidationError(
            f"leaf function has shape {arr.shape}, expected ({space.n_leaves}, d)")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("leaf function has non-finite entries")
    return arr


def build_dyadic(depth, leaf_probs=None):
    """Binary refining tree of the given depth; uniform unless probs given."""
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    n_leaves = 2 ** depth
    if leaf_probs is None:
        probs = np.full(n_leaves, 1.0 / n_leaves)
    else:
        probs = np.asarray(leaf_probs, dtype=float)
        if probs.shape != (n_leaves,):
            raise ValidationError(
                f"expected {n_leaves} leaf probabilities, got {probs.shape}")
    offsets = [np.arange(2 ** n + 1) * 2 ** (depth - n) for n in range(depth + 1)]
    return FilteredSpace(depth=depth, leaf_probs=probs, offsets=tuple(offsets))


def build_from_tree(spec):
    """FilteredSpace from a nested {"mass": x, "children": [...]} description.

    Internal nodes carry >= 1 children whose masses sum to the parent's;
    a node without children is a leaf and persists through deeper levels.
    """
    seen = set()

    def check(node, depth):
        if id(node) in seen:
            raise ValidationError("tree specification contains a cycle")
        seen.add(id(node))
        if not isinstance(node, dict) or "mass" not in node:
            raise ValidationError("each node must be a dict with a 'mass' key")
        mass = float(node["mass"])
        if mass <= 0.0:
            raise ValidationError("node masses must be positive")
        children = node.get("children") or []
        if children:
            csum = sum(float(c.get("mass", -1.0)) for c in children)
            if abs(csum - mass) > PROB_TOL * max(1.0, abs(mass)):
                raise ValidationError(
                    f"child masses sum to {csum!r}, parent has {mass!r}")
            return max(check(c, depth + 1) for c in children)
        return depth

    depth = check(spec, 0)
    if depth < 1:
        raise ValidationError("tree must branch at least once")

    leaf_probs = []
    node_marks = []  # (tree depth, leaf-range start) of every node

    def walk(node, level):
        node_marks.append((level, len(leaf_probs)))
        children = node.get("children") or []
        if not children:
            leaf_probs.append(float(node["mass"]))
            return
        for child in children:
            walk(child, level + 1)

    walk(spec, 0)
    n_leaves = len(leaf_probs)
    # a level-n atom starts exactly where some node of depth <= n starts
    offsets = tuple(
        np.array(sorted({s for lvl, s in node_marks if lvl <= n} | {n_leaves}),
                 dtype=np.intp)
        for n in range(depth + 1))
    probs = np.asarray(leaf_probs)
    if abs(probs.sum() - 1.0) <= PROB_TOL:
        probs = probs / probs.sum()
    return FilteredSpace(depth=depth, leaf_probs=probs, offsets=offsets)


def cond_expect(space, f, n):
    """Conditional expectation at level n: per-atom probability averages.

    Returns one value per level-n atom, matching the dimensionality of f.
    """
    if n < 0 or n > space.depth:
        raise ValidationError(f"level {n} outside 0..{space.depth}")
    arr = _leaf_array(space, f)
    flat = arr if arr.ndim == 2 else arr[:, None]
    weighted = space.leaf_probs[:, None] * flat
    sums = np.add.reduceat(weighted, space.offsets[n][:-1], axis=0)
    out = sums / space.atom_probs[n][:, None]
    return out if arr.ndim == 2 else out[:, 0]


def cond_expect_leaf(space, f, n):
    """cond_expect broadcast back to the leaf axis."""
    return space.expand(n, cond_expect(space, f, n))


@dataclass(frozen=True)
class Martingale:
    """A leaf function together with all its conditional-expectation levels
    and increments d_k = f_k - f_{k-1}, k = 1..D.

    The level-0 mean is not an increment; ``first_value_diffs`` additionally
    exposes the convention in which the k = 1 term is the full level-1 value
    (used by the stopping-time domination machinery).
    """

    space: FilteredSpace
    leaf_values: np.ndarray          # (L, d)
    levels: tuple                    # per level n: (n_atoms(n), d)
    leaf_levels: np.ndarray          # (D + 1, L, d)
    diffs: np.ndarray                # (D, L, d); diffs[k - 1] = f_k - f_{k-1}

    @property
    def dim(self):
        return self.leaf_values.shape[1]

    def diff(self, k):
        """Increment d_k for k in 1..D."""
        return self.diffs[k - 1]

    def first_value_diffs(self):
        """(D, L, d) difference stack whose k = 1 entry is f_1 itself."""
        out = self.diffs.copy()
        out[0] = self.leaf_levels[1]
        return out


def martingale_of(space, f):
    """Martingale generated by conditioning the leaf function f."""
    arr = _leaf_array(space, f)
    flat = arr if arr.ndim == 2 else arr[:, None]
    levels = tuple(cond_expect(space, flat, n) for n in range(space.depth + 1))
    leaf_levels = np.stack([space.expand(n, levels[n])
                            for n in range(space.depth + 1)])
    diffs = leaf_levels[1:] - leaf_levels[:-1]
    for a in (flat, leaf_levels, diffs):
        a.setflags(write=False)
    return Martingale(space=space, leaf_values=flat, levels=levels,
                      leaf_levels=leaf_levels, diffs=diffs)


def lp_norm(space, f, p):
    """(sum_leaves P(l) |f(l)|^p)^(1/p) with the euclidean vector norm."""
    if p < 1:
        raise ValidationError("p must be >= 1")
    arr = _leaf_array(space, f)
    mag = np.abs(arr) if arr.ndim == 1 else np.linalg.norm(arr, axis=1)
    return float(np.sum(space.leaf_probs * mag ** p) ** (1.0 / p))
