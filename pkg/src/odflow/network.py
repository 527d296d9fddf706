"""Network topologies, routing matrices and flow series.

OD-flow conventions
-------------------
``chain3`` excludes origin == destination flows (6 OD pairs over 3 nodes);
the star topologies include them, so ``star(k)`` has ``k**2`` OD flows.
This is the assignment that gives latent dimensions 2, 4 and 9 for
chain3, star(3) and star(4), and 8 links / 16 OD flows for star(4).

OD columns are ordered lexicographically by (origin, destination).  Links
are ordered lexicographically by (endpoint, direction) with ``in`` before
``out``; the inter-router links of ``two_router_star`` come last.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RANK_RTOL = 1e-10


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    """A synthetic topology specification.

    ``kind`` is one of ``"chain3"``, ``"star"`` or ``"two_router_star"``.
    ``k`` is the number of edge nodes of a star; ``k1``/``k2`` the number of
    edge nodes attached to each router of a two-router star.
    """

    kind: str
    k: int = 0
    k1: int = 0
    k2: int = 0

    def __post_init__(self):
        if self.kind == "chain3":
            return
        if self.kind == "star":
            if self.k < 2:
                raise TopologyError(f"star requires k >= 2, got {self.k}")
            return
        if self.kind == "two_router_star":
            if self.k1 < 1 or self.k2 < 1:
                raise TopologyError(
                    f"two_router_star requires k1, k2 >= 1, got ({self.k1}, {self.k2})")
            return
        raise TopologyError(f"unknown topology kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Topology":
        """Parse ``chain3``, ``star3``/``star(3)`` or ``two_router_star(4,8)``."""
        s = text.strip().lower().replace(" ", "")
        if s == "chain3":
            return cls("chain3")
        for prefix, kind in (("two_router_star", "two_router_star"), ("star", "star")):
            if s.startswith(prefix):
                args = s[len(prefix):].strip("()")
                nums = [int(a) for a in args.split(",") if a]
                if kind == "star" and len(nums) == 1:
                    return cls("star", k=nums[0])
                if kind == "two_router_star" and len(nums) == 2:
                    return cls("two_router_star", k1=nums[0], k2=nums[1])
        raise TopologyError(f"cannot parse topology {text!r}")

    @property
    def label(self) -> str:
        if self.kind == "chain3":
            return "chain3"
        if self.kind == "star":
            return f"star{self.k}"
        return f"two_router_star({self.k1},{self.k2})"


def numeric_rank(a: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank from the SVD: singular values below ``rtol * s_max`` count as zero."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass(frozen=True)
class RoutingMatrix:
    """Binary link x OD incidence matrix."""

    entries: np.ndarray
    link_names: tuple[str, ...]
    od_names: tuple[str, ...]
    rank: int = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.entries)
        if a.ndim != 2:
            raise ValueError("routing matrix must be 2-D")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("routing matrix entries must be 0 or 1")
        if np.any(a.sum(axis=0) == 0):
            bad = [self.od_names[j] for j in np.flatnonzero(a.sum(axis=0) == 0)]
            raise ValueError(f"OD flows cross no link: {bad}")
        if len(self.link_names) != a.shape[0] or len(self.od_names) != a.shape[1]:
            raise ValueError("name lists do not match matrix shape")
        a = a.astype(float)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "link_names", tuple(self.link_names))
        object.__setattr__(self, "od_names", tuple(self.od_names))
        object.__setattr__(self, "rank", numeric_rank(a))

    @property
    def n_links(self) -> int:
        return self.entries.shape[0]

    @property
    def n_od(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def from_array(cls, a, link_names=None, od_names=None) -> "RoutingMatrix":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if link_names is None:
            link_names = [f"l{i + 1}" for i in range(a.shape[0])]
        if od_names is None:
            od_names = [f"od{j + 1}" for j in range(a.shape[1])]
        return cls(a, tuple(link_names), tuple(od_names))


@dataclass(frozen=True)
class FlowSeries:
    """T x d nonnegative flow volumes per measurement interval."""

    values: np.ndarray
    names: tuple[str, ...]
    interval_seconds: int = 300

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[1] != len(self.names):
            raise ValueError(
                f"{len(self.names)} names for {v.shape[1]} columns")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("flow values must be finite and nonnegative")
        if self.interval_seconds <= 0:
            raise ValueError("interval_seconds must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def _chain3():
    nodes = ["1", "2", "3"]
    # directed links along the line, keyed by (tail, head)
    links = [("1", "2"), ("2", "1"), ("2", "3"), ("3", "2")]
    ods = [(o, d) for o in nodes for d in nodes if o != d]
    pos = {n: i for i, n in enumerate(nodes)}
    a = np.zeros((len(links), len(ods)))
    for j, (o, d) in enumerate(ods):
        step = 1 if pos[d] > pos[o] else -1
        for p in range(pos[o], pos[d], step):
            a[links.index((nodes[p], nodes[p + step])), j] = 1
    return a, [f"{u}->{v}" for u, v in links], [f"{o}->{d}" for o, d in ods]


def _star(k: int):
    nodes = [f"n{i + 1}" for i in range(k)]
    link_names = []
    for n in nodes:
        link_names += [f"R->{n}", f"{n}->R"]
    a = np.zeros((2 * k, k * k))
    od_names = []
    for i in range(k):
        for j in range(k):
            col = i * k + j
            a[2 * i + 1, col] = 1  # out-link of origin
            a[2 * j, col] = 1      # in-link of destination
            od_names.append(f"{nodes[i]}->{nodes[j]}")
    return a, link_names, od_names


def _two_router_star(k1: int, k2: int):
    k = k1 + k2
    nodes = [f"n{i + 1}" for i in range(k)]
    router = ["R1"] * k1 + ["R2"] * k2
    link_names = []
    for n, r in zip(nodes, router):
        link_names += [f"{r}->{n}", f"{n}->{r}"]
    link_names += ["R1->R2", "R2->R1"]
    a = np.zeros((2 * k + 2, k * k))
    od_names = []
    for i in range(k):
        for j in range(k):
            col = i * k + j
            a[2 * i + 1, col] = 1
            a[2 * j, col] = 1
            if router[i] != router[j]:
                a[2 * k + (0 if router[i] == "R1" else 1), col] = 1
            od_names.append(f"{nodes[i]}->{nodes[j]}")
    return a, link_names, od_names


def build_topology(topology: Topology) -> RoutingMatrix:
    """Routing matrix of a synthetic topology (see module docstring)."""
    if topology.kind == "chain3":
        a, links, ods = _chain3()
    elif topology.kind == "star":
        a, links, ods = _star(topology.k)
    else:
        a, links, ods = _two_router_star(topology.k1, topology.k2)
    return RoutingMatrix(a, tuple(links), tuple(ods))


def aggregate(x: FlowSeries, A: RoutingMatrix) -> FlowSeries:
    """Link loads ``y_t = A x_t`` for every time index."""
    if x.d != A.n_od:
        raise ValueError(f"flow series has {x.d} columns, routing matrix {A.n_od} OD flows")
    y = x.values @ A.entries.T
    return FlowSeries(y, A.link_names, x.interval_seconds)


def latent_dim(A: RoutingMatrix) -> int:
    """Dimension of the feasible polytope: ``n_od - rank(A)``."""
    return A.n_od - A.rank


def pseudo_inverse_estimate(y: np.ndarray, A: RoutingMatrix) -> np.ndarray:
    """Static ``A^+ y_t`` clipped at zero; a crude baseline."""
    return np.clip(np.atleast_2d(y) @ np.linalg.pinv(A.entries).T, 0.0, None)

