"""Small dense SPD linear algebra and Loewner ellipsoid fitting.

Everything here operates on stacks of small (d <= 6) symmetric matrices.
Eigen-decompositions use a batched cyclic Jacobi sweep so results are
deterministic and identical across BLAS builds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DIRECTION_COUNTS = {1: 1, 2: 720, 3: 2048}
DEFAULT_DIRECTIONS_HIGH_D = 8192
MAX_SUPPORTED_DIM = 6


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class EllipsoidError(RuntimeError):
    """Ellipsoid fit failed; carries the last iterate and achieved ratio.

    Attributes
    ----------
    last_matrix : ndarray or None
        The matrix of the last iterate (shape (d, d)).
    achieved : float
        Worst certification or convergence ratio at abort time.
    """

    def __init__(self, message, last_matrix=None, achieved=np.nan):
        super().__init__(message)
        self.last_matrix = last_matrix
        self.achieved = achieved


def jacobi_eigh(mats, tol=1e-14, max_sweeps=60):
    """Eigen-decomposition of stacked symmetric matrices by cyclic Jacobi.

    Parameters
    ----------
    mats : ndarray, shape (..., d, d)
        Symmetric matrices (symmetrized internally).
    tol : float
        Stop once the off-diagonal Frobenius mass is below ``tol`` times
        the matrix Frobenius norm.

    Returns
    -------
    (vals, vecs) : eigenvalues ascending, orthonormal columns, so that
        ``mats = vecs @ diag(vals) @ vecs.T``.
    """
    a = np.asarray(mats, dtype=float)
    single = a.ndim == 2
    if single:
        a = a[None]
    batch_shape = a.shape[:-2]
    d = a.shape[-1]
    if a.shape[-2] != d:
        raise ValidationError(f"expected square matrices, got {a.shape[-2:]}")
    a = a.reshape(-1, d, d).copy()
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    b = a.shape[0]
    v = np.tile(np.eye(d), (b, 1, 1))

    if d > 1:
        scale = np.sqrt(np.sum(a * a, axis=(1, 2))) + 1e-300
        for _ in range(max_sweeps):
            off = np.sqrt(np.maximum(np.sum(a * a, axis=(1, 2)) - np.sum(
                np.diagonal(a, axis1=1, axis2=2) ** 2, axis=1), 0.0))
            if np.all(off <= tol * scale):
                break
            for p in range(d - 1):
                for q in range(p + 1, d):
                    apq = a[:, p, q]
                    small = np.abs(apq) <= 1e-300
                    theta = (a[:, q, q] - a[:, p, p]) / np.where(small, 1.0, 2.0 * apq)
                    with np.errstate(over="ignore"):
                        t = np.where(theta >= 0.0, 1.0, -1.0) / (
                            np.abs(theta) + np.sqrt(1.0 + theta * theta))
                    t = np.where(small, 0.0, t)
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = (t * c)[:, None]
                    c = c[:, None]
                    col_p, col_q = a[:, :, p].copy(), a[:, :, q].copy()
                    a[:, :, p] = c[:, 0, None] * col_p - s[:, 0, None] * col_q
                    a[:, :, q] = s[:, 0, None] * col_p + c[:, 0, None] * col_q
                    row_p, row_q = a[:, p, :].copy(), a[:, q, :].copy()
                    a[:, p, :] = c * row_p - s * row_q
                    a[:, q, :] = s * row_p + c * row_q
                    vcol_p, vcol_q = v[:, :, p].copy(), v[:, :, q].copy()
                    v[:, :, p] = c * vcol_p - s * vcol_q
                    v[:, :, q] = s * vcol_p + c * vcol_q

    vals = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    vals = vals.reshape(batch_shape + (d,))
    v = v.reshape(batch_shape + (d, d))
    if single:
        return vals[0], v[0]
    return vals, v


def _check_symmetric(mats, tol=1e-12, what="matrix"):
    a = np.asarray(mats, dtype=float)
    scale = np.max(np.abs(a), axis=(-1, -2), keepdims=True) + 1e-300
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)) / scale)
    if asym > tol:
        raise ValidationError(f"{what} not symmetric (relative asymmetry {asym:.3e})")
    return a


def spd_power(mats, alpha):
    """Real power M**alpha of symmetric positive-definite matrices.

    Computed through the Jacobi eigen-decomposition; raises ValidationError
    on asymmetric or non-positive-definite input.
    """
    a = _check_symmetric(mats, what="spd_power input")
    vals, vecs = jacobi_eigh(a)
    if np.any(vals <= 0.0):
        raise ValidationError(
            f"matrix not positive definite (min eigenvalue {np.min(vals):.3e})")
    powered = vals ** alpha
    return np.einsum("...ij,...j,...kj->...ik", vecs, powered, vecs)


def sym_inv(mats):
    """Inverse of symmetric positive-definite matrices (Jacobi based)."""
    return spd_power(mats, -1.0)


def spectral_norm(mats):
    """Largest singular value of (stacked) square matrices."""
    a = np.asarray(mats, dtype=float)
    gram = np.swapaxes(a, -1, -2) @ a
    vals, _ = jacobi_eigh(gram)
    return np.sqrt(np.maximum(vals[..., -1], 0.0))


def matvec(mats, vecs):
    """Apply stacked (d, d) matrices to stacked d-vectors."""
    return np.einsum("...ij,...j->...i", mats, vecs)


# ---------------------------------------------------------------------------
# direction sets
# ---------------------------------------------------------------------------

def direction_set(dim, n=None, seed=0):
    """Unit directions used to sample a norm ball boundary.

    dim 2 uses equispaced angles, dim 3 a Fibonacci sphere, higher dims a
    seeded uniform sample; for a norm only the axis ±u matters, so the sets
    are used as if symmetrized.
    """
    if n is None:
        n = DIRECTION_COUNTS.get(dim, DEFAULT_DIRECTIONS_HIGH_D)
    if dim == 1:
        return np.ones((1, 1))
    if dim == 2:
        ang = 2.0 * np.pi * np.arange(n) / n
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if dim == 3:
        k = np.arange(n) + 0.5
        phi = np.arccos(1.0 - 2.0 * k / n)
        golden = np.pi * (1.0 + np.sqrt(5.0))
        theta = golden * k
        return np.stack([np.sin(phi) * np.cos(theta),
                         np.sin(phi) * np.sin(theta),
                         np.cos(phi)], axis=1)
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, dim))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def holdout_directions(dim, n=1000, seed=1234):
    """Random unit directions kept out of the fit, for certification."""
    if dim == 1:
        return np.ones((1, 1))
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, dim))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


@dataclass(frozen=True)
class NormSampler:
    """Evaluator of a norm on R^dim, plus its sampling configuration.

    ``func`` maps an (N, dim) array of directions to the N norm values.
    Construction spot-checks positive homogeneity and positivity on a few
    seeded random directions.
    """

    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    n_directions: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.dim > MAX_SUPPORTED_DIM:
            raise ValidationError(f"dim {self.dim} outside supported range 1..6")
        if self.n_directions == 0:
            object.__setattr__(
                self, "n_directions",
                DIRECTION_COUNTS.get(self.dim, DEFAULT_DIRECTIONS_HIGH_D))
        rng = np.random.default_rng(self.seed)
        e = rng.standard_normal((8, self.dim))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        vals = self(e)
        if np.any(vals <= 0.0):
            raise ValidationError("norm evaluator not positive on unit directions")
        lam = 1.0 + rng.random(8)
        scaled = self(e * lam[:, None])
        if np.max(np.abs(scaled - lam * vals) / (lam * vals)) > 1e-10:
            raise ValidationError("norm evaluator not positively homogeneous")

    def __call__(self, dirs):
        out = np.asarray(self.func(np.asarray(dirs, dtype=float)), dtype=float)
        if out.shape != (len(dirs),):
            raise ValidationError("norm evaluator returned wrong shape")
        return out

    def directions(self):
        return direction_set(self.dim, self.n_directions, self.seed)


# ---------------------------------------------------------------------------
# minimum-volume enclosing ellipsoid, origin-symmetric case
# ---------------------------------------------------------------------------

def _design_update(xa, ua, d, target, cap):
    """Inner solver for the D-optimal design problem on an active point set.

    Multiplicative updates for bulk progress, then Frank-Wolfe steps with
    away steps for the linear-rate endgame. Returns (u, S, iterations).
    """
    used = 0
    s = np.einsum("bn,bni,bnj->bij", ua, xa, xa)
    bulk = d * max(1.08, 0.5 + 0.5 * target / d)
    for _ in range(min(cap, 200)):
        used += 1
        g = np.einsum("bni,bij,bnj->bn", xa, np.linalg.inv(s), xa)
        if np.all(g.max(axis=1) <= bulk):
            break
        ua = ua * g / d
        ua /= ua.sum(axis=1, keepdims=True)
        s = np.einsum("bn,bni,bnj->bij", ua, xa, xa)

    while used < cap:
        used += 1
        g = np.einsum("bni,bij,bnj->bn", xa, np.linalg.inv(s), xa)
        jmax = g.argmax(axis=1)
        gmax = np.take_along_axis(g, jmax[:, None], axis=1)[:, 0]
        if np.all(gmax <= target):
            break
        gm = np.where(ua > 0.0, g, np.inf)
        jmin = gm.argmin(axis=1)
        gmin = np.take_along_axis(gm, jmin[:, None], axis=1)[:, 0]
        use_add = (gmax - d) >= (d - gmin)
        j = np.where(use_add, jmax, jmin)
        gj = np.where(use_add, gmax, gmin)
        uj = np.take_along_axis(ua, j[:, None], axis=1)[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_add = (gj - d) / (d * (gj - 1.0))
            cap_away = uj / np.maximum(1.0 - uj, 1e-300)
            t_away = np.where(gj > 1.0, np.minimum(
                (d - gj) / (d * (gj - 1.0)), cap_away), cap_away)
        t = np.where(use_add, t_add, t_away)
        t = np.where(gmax <= target, 0.0, t)       # freeze converged clouds
        sign = np.where(use_add, 1.0, -1.0)
        scale = np.where(use_add, 1.0 - t, 1.0 + t)
        ua *= scale[:, None]
        idx = j[:, None]
        np.put_along_axis(
            ua, idx, np.take_along_axis(ua, idx, axis=1) + (sign * t)[:, None],
            axis=1)
        np.clip(ua, 0.0, None, out=ua)
        ua /= ua.sum(axis=1, keepdims=True)
        xj = np.take_along_axis(xa, j[:, None, None], axis=1)[:, 0, :]
        s = scale[:, None, None] * s + (sign * t)[:, None, None] * \
            np.einsum("bi,bj->bij", xj, xj)
        if used % 256 == 0:
            s = np.einsum("bn,bni,bnj->bij", ua, xa, xa)

    s = np.einsum("bn,bni,bnj->bij", ua, xa, xa)
    return ua, s, used


def mvee_central(points, eps=2e-3, max_iter=100_000):
    """MVEE of the symmetric hull conv(±x_i) for stacked point clouds.

    Runs multiplicative design updates plus away-step exchange steps on a
    growing active subset of candidate contact points, verifying against
    the full cloud and promoting the worst violators until
    max_i x_i^T S(u)^{-1} x_i <= d (1 + eps). Clouds are whitened by their
    warm-start second moment for conditioning.

    Parameters
    ----------
    points : ndarray, shape (..., N, d)

    Returns
    -------
    (A, inner) where A has shape (..., d, d) and, per cloud,
      * ||A x_i|| <= 1 for every input point (containment, exact), and
      * gauge(e) <= inner * ||A e|| for the hull gauge,
        inner <= sqrt(d(1+eps)).

    The second bound does not rely on convergence: for any simplex weights u
    over any subset, the ellipsoid {x : x^T S(u)^{-1} x <= 1} sits inside the
    hull, since its support function sqrt(v^T S v) is dominated by
    max_i |x_i . v|.
    """
    x_orig = np.asarray(points, dtype=float)
    single = x_orig.ndim == 2
    if single:
        x_orig = x_orig[None]
    batch_shape = x_orig.shape[:-2]
    n, d = x_orig.shape[-2], x_orig.shape[-1]
    x_orig = x_orig.reshape(-1, n, d)
    b = x_orig.shape[0]

    target = d * (1.0 + eps)
    inner_target = d * (1.0 + 0.5 * eps)
    k = min(n, max(6 * d * (d + 1), 24))
    n_promote = min(n, max(4 * d, 8))

    # warm start on the full cloud, then whiten by the second moment
    u_full = np.full((b, n), 1.0 / n)
    s0 = np.einsum("bn,bni,bnj->bij", u_full, x_orig, x_orig)
    for _ in range(5):
        g_full = np.einsum("bni,bij,bnj->bn", x_orig, np.linalg.inv(s0), x_orig)
        u_full = u_full * g_full / d
        u_full /= u_full.sum(axis=1, keepdims=True)
        s0 = np.einsum("bn,bni,bnj->bij", u_full, x_orig, x_orig)
    vals0, vecs0 = jacobi_eigh(s0)
    vals0 = np.maximum(vals0, 1e-300)
    white = np.einsum("bij,bj,bkj->bik", vecs0, vals0 ** -0.5, vecs0)
    unwhite = np.einsum("bij,bj,bkj->bik", vecs0, vals0 ** 0.5, vecs0)
    x = np.einsum("bij,bnj->bni", white, x_orig)
    g_full = np.einsum("bni,bij,bnj->bn", x_orig, np.linalg.inv(s0), x_orig)

    s_out = np.empty((b, d, d))
    kappa = np.full(b, np.inf)
    order = np.argsort(u_full * g_full, axis=1)
    actives = [order[i, -k:].copy() for i in range(b)]
    weights = [np.take_along_axis(u_full, order, axis=1)[i, -k:].copy()
               for i in range(b)]
    for w in weights:
        w /= w.sum()

    alive = np.arange(b)
    spent = 5
    while alive.size and spent < max_iter:
        k_cur = max(a.size for a in (actives[i] for i in alive))
        act = np.full((alive.size, k_cur), -1, dtype=np.intp)
        ua = np.zeros((alive.size, k_cur))
        for row, i in enumerate(alive):
            m = actives[i].size
            act[row, :m] = actives[i]
            act[row, m:] = actives[i][0]      # pad with a repeated point
            ua[row, :m] = weights[i]
        ua /= ua.sum(axis=1, keepdims=True)
        xa = np.take_along_axis(x[alive], act[:, :, None], axis=1)
        budget = min(4000, max_iter - spent)
        ua, s, used = _design_update(xa, ua, d, inner_target, budget)
        spent += used
        for row, i in enumerate(alive):
            m = actives[i].size
            w = ua[row].copy()
            # fold padded-slot weight back onto the real first point
            w[0] += w[m:].sum()
            weights[i] = w[:m] / w[:m].sum()

        g_alive = np.einsum("bni,bij,bnj->bn", x[alive], np.linalg.inv(s),
                            x[alive])
        kap = g_alive.max(axis=1)
        s_out[alive] = np.einsum("bij,bjk,bkl->bil", unwhite[alive], s,
                                 unwhite[alive])
        kappa[alive] = kap

        done = kap <= target
        still = ~done
        for row, i in enumerate(alive):
            if done[row]:
                continue
            g_row = g_alive[row].copy()
            g_row[actives[i]] = -np.inf
            new = np.argsort(g_row)[-n_promote:]
            new = new[np.isfinite(g_row[new])]
            if new.size == 0:
                continue
            actives[i] = np.concatenate([actives[i], new])
            w_new = np.full(new.size, 1.0 / actives[i].size)
            w = np.concatenate([weights[i], w_new])
            weights[i] = w / w.sum()
        alive = alive[still]

    if alive.size:
        worst = int(alive[np.argmax(kappa[alive])])
        vals, vecs = jacobi_eigh(s_out[worst])
        last = np.einsum("ij,j,kj->ik", vecs, 1.0 / np.sqrt(
            np.maximum(vals, 1e-300) * kappa[worst]), vecs)
        raise EllipsoidError(
            f"ellipsoid fit did not converge within {max_iter} iterations "
            f"(max normalized support {np.max(kappa[alive]) / d:.6f}, "
            f"target {1 + eps})",
            last_matrix=last, achieved=float(np.max(kappa[alive]) / d))

    vals, vecs = jacobi_eigh(s_out)
    vals = np.maximum(vals, 1e-300)
    inv_sqrt = np.einsum("bij,bj,bkj->bik", vecs, 1.0 / np.sqrt(vals), vecs)
    a = inv_sqrt / np.sqrt(kappa)[:, None, None]
    inner = np.sqrt(kappa)
    a = a.reshape(batch_shape + (d, d))
    inner = inner.reshape(batch_shape)
    if single:
        return a[0], float(inner[0])
    return a, inner


def norm_ball_reducing(rho, tol=1e-3, cert_tol=5e-2, max_iter=100_000,
                       n_holdout=1000, holdout_seed=1234):
    """SPD matrix A whose ellipsoid {x: ||Ax|| <= 1} circumscribes the unit
    ball of ``rho`` with minimal volume (approximately).

    Certifies, on a held-out direction set, that
        ||A e|| <= (1 + cert_tol) rho(e)   and
        rho(e) <= (1 + cert_tol) sqrt(d) ||A e||,
    raising EllipsoidError otherwise. ``tol`` controls the Frank-Wolfe
    convergence target d(1+eps) with eps = tol (2 + tol).
    """
    d = rho.dim
    if d == 1:
        val = float(rho(np.ones((1, 1)))[0])
        return np.array([[val]])
    dirs = rho.directions()
    vals = rho(dirs)
    if np.any(vals <= 0.0):
        raise ValidationError("norm vanished on a sampled direction")
    pts = dirs / vals[:, None]
    a, _inner = mvee_central(pts, eps=tol * (2.0 + tol), max_iter=max_iter)

    held = holdout_directions(d, n_holdout, holdout_seed)
    ratio = np.linalg.norm(held @ a.T, axis=1) / rho(held)
    hi, lo = float(np.max(ratio)), float(np.min(ratio))
    if hi > 1.0 + cert_tol or lo < 1.0 / ((1.0 + cert_tol) * np.sqrt(d)):
        raise EllipsoidError(
            f"ellipsoid certification failed: ratio range [{lo:.6f}, {hi:.6f}] "
            f"outside [{1.0 / ((1.0 + cert_tol) * np.sqrt(d)):.6f}, {1.0 + cert_tol:.6f}]",
            last_matrix=a, achieved=hi)
    return a
