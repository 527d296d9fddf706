"""Geometry of the feasible region ``{x >= 0, A x = y}``.

The random-directions sampler works in the coordinates of a column
decomposition ``A[rows] P = [A1 A2]`` with ``A1`` square and invertible:
the free coordinates ``x2`` are unconstrained up to positivity and the basic
coordinates follow as ``x1 = B y - C x2`` with ``B = A1^{-1}`` and
``C = A1^{-1} A2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .network import RoutingMatrix, numeric_rank

# |w_k|, |d_k| below this are treated as exact zeros when bounding a chord
DIRECTION_EPS = 1e-12
POLISH_EVERY = 200  # IPFP sweeps between least-squares polish attempts


class IPFPError(RuntimeError):
    def __init__(self, message: str, violation: float):
        super().__init__(f"{message} (max relative violation {violation:.3e})")
        self.violation = violation


@dataclass(frozen=True)
class PolytopeDecomposition:
    column_perm: np.ndarray   # basic columns first, then free columns
    basic_count: int
    B: np.ndarray             # A1^{-1}, r x r
    C: np.ndarray             # A1^{-1} A2, r x (n_od - r)
    row_basis: np.ndarray     # independent rows of A
    dropped_rows: np.ndarray  # redundant rows, implied by the basis rows
    A: np.ndarray

    @property
    def basic(self) -> np.ndarray:
        return self.column_perm[:self.basic_count]

    @property
    def free(self) -> np.ndarray:
        return self.column_perm[self.basic_count:]

    @property
    def n_free(self) -> int:
        return len(self.column_perm) - self.basic_count

    def complete(self, x2: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Full OD vector(s) from free coordinates ``x2`` and link loads ``y``."""
        x2 = np.asarray(x2, dtype=float)
        x1 = self.B @ np.asarray(y, dtype=float)[self.row_basis] - x2 @ self.C.T
        out = np.empty(x2.shape[:-1] + (len(self.column_perm),))
        out[..., self.basic] = x1
        out[..., self.free] = x2
        return out

    def residual(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.max(np.abs(np.asarray(x) @ self.A.T - y)))


@dataclass(frozen=True)
class FeasiblePoint:
    x: np.ndarray
    slack: float
    violation: float = 0.0
    iterations: int = 0


def _greedy_independent(vectors: np.ndarray, order) -> list[int]:
    """Indices (in ``order``) of rows of ``vectors`` that raise the rank."""
    chosen: list[int] = []
    rank = 0
    for i in order:
        trial = vectors[chosen + [i]]
        r = numeric_rank(trial)
        if r > rank:
            chosen.append(i)
            rank = r
    return chosen


def decompose(A) -> PolytopeDecomposition:
    """Split the columns of ``A`` into an invertible block and the rest.

    Rows are chosen greedily in order until they span the row space; the
    remaining rows are redundant for any ``y`` in the range of ``A``.
    Columns are chosen greedily, sparsest first (ties by index).
    """
    a = A.entries if isinstance(A, RoutingMatrix) else np.atleast_2d(np.asarray(A, float))
    rank = numeric_rank(a)
    if rank == 0:
        raise ValueError("routing matrix has zero rank")
    rows = _greedy_independent(a, range(a.shape[0]))
    sub = a[rows]
    nnz = np.count_nonzero(a, axis=0)
    col_order = sorted(range(a.shape[1]), key=lambda j: (nnz[j], j))
    basic = _greedy_independent(sub.T, col_order)
    free = [j for j in range(a.shape[1]) if j not in set(basic)]
    A1 = sub[:, basic]
    B = np.linalg.inv(A1)
    if np.max(np.abs(A1 @ B - np.eye(rank))) >= 1e-8:
        raise np.linalg.LinAlgError("selected basic block is ill-conditioned")
    C = B @ sub[:, free]
    # entries of B and C are small rationals for 0/1 matrices; strip rounding noise
    B[np.abs(B) < 1e-13] = 0.0
    C[np.abs(C) < 1e-13] = 0.0
    dropped = [i for i in range(a.shape[0]) if i not in set(rows)]
    return PolytopeDecomposition(
        column_perm=np.array(basic + free, dtype=int),
        basic_count=rank,
        B=B,
        C=C,
        row_basis=np.array(rows, dtype=int),
        dropped_rows=np.array(dropped, dtype=int),
        A=a,
    )


def ipfp_project(x0, A, y, tol: float = 1e-10, max_iter: int = 10000) -> FeasiblePoint:
    """Iterative proportional fitting of a positive ``x0`` onto ``A x = y``.

    Each sweep cycles over the links, rescaling the OD flows crossing link
    ``i`` by ``y_i / (A_i x)``.  Flows on links with ``y_i = 0`` are zeroed
    first.  Stops once the largest relative link violation is below ``tol``.

    Raises
    ------
    IPFPError
        If ``y`` cannot be matched (infeasible or degenerate) or the
        iteration does not converge within ``max_iter`` sweeps.
    """
    a = A.entries if isinstance(A, RoutingMatrix) else np.atleast_2d(np.asarray(A, float))
    y = np.asarray(y, dtype=float)
    x = np.array(x0, dtype=float)
    if np.any(x <= 0):
        raise ValueError("ipfp_project needs a strictly positive starting point")
    if np.any(y < 0):
        raise ValueError("link loads must be nonnegative")
    members = [np.flatnonzero(row) for row in a]
    zero_links = y <= 0
    if np.any(zero_links):
        x[np.any(a[zero_links] > 0, axis=0)] = 0.0
    active = [i for i in range(len(y)) if not zero_links[i]]
    scale = np.where(zero_links, 1.0, y)

    def violation():
        return float(np.max(np.abs(a @ x - y) / scale)) if len(y) else 0.0

    viol = violation()
    it = 0
    while viol >= tol:
        if it % POLISH_EVERY == POLISH_EVERY - 1 or it >= max_iter:
            # near-zero coordinates make IPFP sublinear; finish with a
            # minimum-norm correction when it stays nonnegative
            fix = x + np.linalg.lstsq(a, y - a @ x, rcond=None)[0]
            if np.all(fix >= 0) and np.all(fix[x == 0] == 0):
                x_old, x = x, fix
                viol = violation()
                if viol < tol:
                    break
                x = x_old
                viol = violation()
        if it >= max_iter:
            raise IPFPError(f"IPFP did not converge in {max_iter} sweeps", viol)
        for i in active:
            idx = members[i]
            s = x[idx].sum()
            if s <= 0:
                raise IPFPError(f"link {i} has positive load but no feasible flow", viol)
            x[idx] *= y[i] / s
        it += 1
        viol = violation()
    return FeasiblePoint(x=x, slack=float(x.min()), violation=viol, iterations=it)


def feasible_start(A, y, tol: float = 1e-10, max_iter: int = 10000) -> FeasiblePoint:
    """IPFP from the all-ones vector scaled to the total traffic."""
    a = A.entries if isinstance(A, RoutingMatrix) else np.atleast_2d(np.asarray(A, float))
    y = np.asarray(y, dtype=float)
    total = a.sum(axis=0).sum()
    level = y.sum() / total if y.sum() > 0 else 1.0
    return ipfp_project(np.full(a.shape[1], level), a, y, tol=tol, max_iter=max_iter)


def segment_bounds(x1, x2, w, d):
    """Feasible step interval ``[l, h]`` along a null-space direction.

    The chord is ``x2 + u d``, ``x1 - u w``; the returned interval is the
    exact set of ``u`` keeping both nonnegative.  Works on single vectors or
    on batches along the last axis.  ``l <= 0 <= h`` always holds.
    """
    x1, x2, w, d = (np.asarray(v, dtype=float) for v in (x1, x2, w, d))
    wpos, wneg = w > DIRECTION_EPS, w < -DIRECTION_EPS
    dpos, dneg = d > DIRECTION_EPS, d < -DIRECTION_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = x1 / w
        r2 = -x2 / d
    h = np.minimum(np.min(np.where(wpos, r1, np.inf), axis=-1, initial=np.inf),
                   np.min(np.where(dneg, r2, np.inf), axis=-1, initial=np.inf))
    l = np.maximum(np.max(np.where(wneg, r1, -np.inf), axis=-1, initial=-np.inf),
                   np.max(np.where(dpos, r2, -np.inf), axis=-1, initial=-np.inf))
    # rounding can push a boundary coordinate to -1e-17; the current point stays admissible
    return np.minimum(l, 0.0), np.maximum(h, 0.0)


def rda_step(x, decomp: PolytopeDecomposition, log_target: Callable, rng: np.random.Generator,
             logp=None, length_correction: bool = False):
    """One random-directions Metropolis step on the feasible polytope.

    ``x`` is a single feasible point or a batch (``P x n_od``) of independent
    chains.  ``log_target`` maps points (batched along the leading axis) to
    unnormalized log densities.  Returns ``(x_new, logp_new, accepted)``.

    The chord through ``x`` along ``d`` and the chord through the proposal
    along ``d`` are the same segment, so the uniform-on-chord proposal is
    symmetric; ``length_correction`` multiplies in the ratio of the two
    chord lengths anyway (it equals one up to rounding).
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    single = np.ndim(x) == 1
    P = X.shape[0]
    if logp is None:
        logp = np.atleast_1d(log_target(X))
    else:
        logp = np.atleast_1d(np.asarray(logp, dtype=float))
    k = decomp.n_free
    if k == 0:
        acc = np.zeros(P, dtype=bool)
        return (X[0] if single else X), (logp[0] if single else logp), (acc[0] if single else acc)

    basic, free = decomp.basic, decomp.free
    z = rng.standard_normal((P, k))
    d = z / np.linalg.norm(z, axis=1, keepdims=True)
    w = d @ decomp.C.T
    x1, x2 = X[:, basic], X[:, free]
    l, h = segment_bounds(x1, x2, w, d)
    with np.errstate(invalid="ignore"):
        u = l + (h - l) * rng.random(P)
    log_unif = np.log(rng.random(P))
    ok = (h > l) & np.isfinite(h) & np.isfinite(l)
    u = np.where(ok, u, 0.0)

    prop = X.copy()
    prop[:, basic] = x1 - u[:, None] * w
    prop[:, free] = x2 + u[:, None] * d
    logp_prop = np.atleast_1d(log_target(prop))
    log_ratio = logp_prop - logp
    if length_correction:
        l2, h2 = segment_bounds(prop[:, basic], prop[:, free], w, d)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ratio = log_ratio + np.log((h - l) / (h2 - l2))
    accept = ok & (log_unif < log_ratio)
    X_new = np.where(accept[:, None], prop, X)
    logp_new = np.where(accept, logp_prop, logp)
    if single:
        return X_new[0], logp_new[0], bool(accept[0])
    return X_new, logp_new, accept
