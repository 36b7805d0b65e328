"""Sparse matrix-tree marginalization over sentence graphs.

Sentences are nodes of a complete weighted digraph. Edge and root weights come
from ReLU-scored projections plus an additive floor epsilon, so a negative
preactivation pins a weight at exactly epsilon (prunable structure). The
single-root arborescence distribution over that graph is marginalized exactly:

    L[j,j] = sum_{i != j} f[i,j]       L[i,j] = -f[i,j]   (i != j)
    Lhat   = L with row 0 replaced by the root weights
    B      = Lhat^{-1}
    root[j] = f_root[j] * B[j,0]
    adj[i,j] = (j != 0) * f[i,j] * B[j,j] - (i != 0) * f[i,j] * B[j,i]
    log_z  = log det Lhat

Row 0 is the first sentence in document order; the replacement index is
arbitrary but must stay fixed. brute_force_marginals enumerates every
single-root arborescence directly and is the oracle for all of the above.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Var

DEFAULT_EPSILON = 1e-6
MARGINAL_SLACK = 1e-8
BRUTE_FORCE_MAX_NODES = 7
ROOT = -1  # parent marker for the root node in enumerated trees


class SingularLaplacian(RuntimeError):
    """Root-weighted Laplacian could not be inverted despite the epsilon floor."""


class MarginalQualityError(RuntimeError):
    """Computed marginals left [0,1] or broke normalization beyond tolerance."""


class TooLarge(ValueError):
    """Brute-force enumeration requested for more nodes than supported."""


@dataclass(frozen=True)
class SentenceStates:
    """Initial per-sentence representations H^(0), one row per sentence."""

    m: int
    d: int
    h0: np.ndarray

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one sentence")
        if self.h0.shape != (self.m, self.d):
            raise ValueError(f"h0 shape {self.h0.shape} != ({self.m}, {self.d})")
        if not np.isfinite(self.h0).all():
            raise ValueError("sentence states must be finite")

    @classmethod
    def from_array(cls, h0) -> "SentenceStates":
        arr = np.asarray(h0, dtype=np.float64)
        return cls(arr.shape[0], arr.shape[1], arr)


@dataclass(frozen=True)
class ParentChildViews:
    """Parent/child projections of the same sentence states."""

    sp: np.ndarray
    sc: np.ndarray


@dataclass(frozen=True)
class ScoreSet:
    """Non-negative edge matrix and root vector feeding the marginalization.

    Off-diagonal edge weights and root weights are >= epsilon; the diagonal is
    exactly zero (no self-edges in an arborescence).
    """

    f_edge: np.ndarray
    f_root: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        m = self.f_root.shape[0]
        if self.f_edge.shape != (m, m):
            raise ValueError(f"edge matrix {self.f_edge.shape} vs root vector ({m},)")
        if np.any(np.diag(self.f_edge) != 0.0):
            raise ValueError("self-edge weights must be exactly zero")
        off = self.f_edge[~np.eye(m, dtype=bool)]
        if m > 1 and off.min() < self.epsilon:
            raise ValueError("off-diagonal edge weights must be >= epsilon")
        if self.f_root.min() < self.epsilon:
            raise ValueError("root weights must be >= epsilon")

    @property
    def m(self) -> int:
        return self.f_root.shape[0]


@dataclass(frozen=True)
class LatentGraph:
    """Marginal adjacency adj[i,j] = P(edge i->j), root probabilities, log Z."""

    adj: np.ndarray
    root: np.ndarray
    log_z: float

    @property
    def m(self) -> int:
        return self.root.shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "m": self.m,
                "adj": [float(x) for x in self.adj.reshape(-1)],
                "root": [float(x) for x in self.root],
                "log_z": float(self.log_z),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LatentGraph":
        obj = json.loads(text)
        m = int(obj["m"])
        adj = np.array(obj["adj"], dtype=np.float64).reshape(m, m)
        root = np.array(obj["root"], dtype=np.float64)
        return cls(adj, root, float(obj["log_z"]))

    def to_dot(self, threshold: float = 0.05) -> str:
        lines = ["digraph latent {"]
        for i in range(self.m):
            lines.append(f'  n{i} [label="s{i}\\np_root={self.root[i]:.3f}"];')
        for i in range(self.m):
            for j in range(self.m):
                if i != j and self.adj[i, j] >= threshold:
                    lines.append(f'  n{i} -> n{j} [label="{self.adj[i, j]:.3f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _finalize_graph(adj: np.ndarray, root: np.ndarray, log_z: float) -> LatentGraph:
    """Validate bounds/normalization at MARGINAL_SLACK, then clamp into [0,1]."""
    lo = min(adj.min(initial=0.0), root.min())
    hi = max(adj.max(initial=0.0), root.max())
    if lo < -MARGINAL_SLACK or hi > 1.0 + MARGINAL_SLACK:
        raise MarginalQualityError(f"marginals outside [0,1]: min={lo:.3e}, max={hi:.3e}")
    root_sum = root.sum()
    if abs(root_sum - 1.0) > MARGINAL_SLACK:
        raise MarginalQualityError(f"root probabilities sum to {root_sum!r}")
    parent_mass = root + adj.sum(axis=0)
    worst = np.abs(parent_mass - 1.0).max()
    if worst > MARGINAL_SLACK:
        raise MarginalQualityError(f"parent normalization off by {worst:.3e}")
    return LatentGraph(np.clip(adj, 0.0, 1.0), np.clip(root, 0.0, 1.0), log_z)


@dataclass(frozen=True)
class ScoringParams:
    """Affine/bilinear weights for parent-child projection and scoring."""

    wp: np.ndarray
    bp: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    wr: np.ndarray  # (d, 1)
    br: np.ndarray  # (1,)
    wbi: np.ndarray  # (d, d)

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, scale: float = 0.08) -> "ScoringParams":
        u = lambda *s: rng.uniform(-scale, scale, size=s)
        return cls(u(d, d), np.zeros(d), u(d, d), np.zeros(d), u(d, 1), np.zeros(1), u(d, d))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "wp": self.wp, "bp": self.bp, "wc": self.wc, "bc": self.bc,
            "wr": self.wr, "br": self.br, "wbi": self.wbi,
        }


def project_parent_child(h: SentenceStates, params: ScoringParams) -> ParentChildViews:
    """sp_i = ReLU(W_p s_i + b_p), sc_i = ReLU(W_c s_i + b_c)."""
    if params.wp.shape != (h.d, h.d) or params.wc.shape != (h.d, h.d):
        raise ad.ShapeMismatch("projection weights do not match state width")
    sp = np.maximum(h.h0 @ params.wp + params.bp, 0.0)
    sc = np.maximum(h.h0 @ params.wc + params.bc, 0.0)
    return ParentChildViews(sp, sc)


def score(views: ParentChildViews, params: ScoringParams, epsilon: float = DEFAULT_EPSILON) -> ScoreSet:
    """Root scores ReLU(W_r sp + b_r) + eps; edges ReLU(sp_i' W_bi sc_j) + eps, diag 0."""
    f_root = np.maximum(views.sp @ params.wr + params.br, 0.0)[:, 0] + epsilon
    pre = views.sp @ params.wbi @ views.sc.T
    f_edge = np.maximum(pre, 0.0) + epsilon
    np.fill_diagonal(f_edge, 0.0)
    return ScoreSet(f_edge, f_root, epsilon)


def marginalize(s: ScoreSet) -> LatentGraph:
    """Exact edge/root marginals of the single-root arborescence distribution."""
    m = s.m
    if m == 1:
        return LatentGraph(np.zeros((1, 1)), np.ones(1), math.log(s.f_root[0]))
    f = s.f_edge
    lap = np.diag(f.sum(axis=0)) - f
    lhat = lap.copy()
    lhat[0, :] = s.f_root
    try:
        factors = linalg.lu_decompose(linalg.matrix(lhat))
    except linalg.SingularMatrix as exc:
        raise SingularLaplacian(str(exc)) from exc
    sign, log_z = linalg.slogdet(factors)
    if sign <= 0.0:
        raise SingularLaplacian(f"non-positive partition determinant (sign {sign})")
    b = linalg.inverse(factors).data
    root = s.f_root * b[:, 0]
    term1 = f * np.diag(b)[None, :]
    term1[:, 0] = 0.0
    term2 = f * b.T
    term2[0, :] = 0.0
    return _finalize_graph(term1 - term2, root, log_z)


def _valid_trees(m: int) -> list[tuple[int, tuple[int, ...]]]:
    """All (root, parents) single-root arborescences on m labeled nodes."""
    trees = []
    choice_sets = [[ROOT] + [i for i in range(m) if i != j] for j in range(m)]
    for parents in itertools.product(*choice_sets):
        root_nodes = [j for j, p in enumerate(parents) if p == ROOT]
        if len(root_nodes) != 1:
            continue
        ok = True
        for j in range(m):
            node, steps = j, 0
            while parents[node] != ROOT:
                node = parents[node]
                steps += 1
                if steps > m:  # cycle
                    ok = False
                    break
            if not ok:
                break
        if ok:
            trees.append((root_nodes[0], parents))
    return trees


_TREE_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _tree_arrays(m: int) -> tuple[np.ndarray, np.ndarray]:
    """(roots (T,), parents (T,m)) for all arborescences on m nodes, cached."""
    if m not in _TREE_CACHE:
        trees = _valid_trees(m)
        roots = np.array([r for r, _ in trees], dtype=np.intp)
        parents = np.array([p for _, p in trees], dtype=np.intp)
        _TREE_CACHE[m] = (roots, parents)
    return _TREE_CACHE[m]


def brute_force_marginals(s: ScoreSet) -> LatentGraph:
    """Oracle: enumerate every single-root arborescence and tally weighted counts."""
    m = s.m
    if m > BRUTE_FORCE_MAX_NODES:
        raise TooLarge(f"brute force supports m <= {BRUTE_FORCE_MAX_NODES}, got {m}")
    roots, parents = _tree_arrays(m)
    cols = np.arange(m)
    has_parent = parents != ROOT
    safe = np.where(has_parent, parents, 0)
    factors = np.where(has_parent, s.f_edge[safe, cols[None, :]], 1.0)
    weights = s.f_root[roots] * factors.prod(axis=1)
    z = float(weights.sum())
    root_mass = np.bincount(roots, weights=weights, minlength=m)
    edge_mass = np.zeros((m, m))
    wrep = np.broadcast_to(weights[:, None], parents.shape)[has_parent]
    np.add.at(edge_mass, (safe[has_parent], np.broadcast_to(cols, parents.shape)[has_parent]), wrep)
    return LatentGraph(edge_mass / z, root_mass / z, math.log(z))


def induce(h: SentenceStates, params: ScoringParams, epsilon: float = DEFAULT_EPSILON) -> LatentGraph:
    """project -> score -> marginalize on plain arrays (no gradients)."""
    return marginalize(score(project_parent_child(h, params), params, epsilon))


# ---------------------------------------------------------------------------
# traced variant: same formulas recorded on a CompGraph so gradients flow
# through the marginalization via the matrix-inverse and logdet rules
# ---------------------------------------------------------------------------


def trace_scores(g, h: Var, p: dict[str, Var], epsilon: float, m: int) -> tuple[Var, Var]:
    """Record scoring on the graph; returns (f_edge (m,m), f_root row (1,m))."""
    sp = ad.relu(h @ p["wp"] + p["bp"])
    sc = ad.relu(h @ p["wc"] + p["bc"])
    f_root = ad.transpose(ad.relu(sp @ p["wr"] + p["br"])) + epsilon  # (1, m)
    pre = sp @ p["wbi"] @ ad.transpose(sc)
    hollow = g.constant(1.0 - np.eye(m))
    f_edge = (ad.relu(pre) + epsilon) * hollow
    return f_edge, f_root


def trace_marginals(g, f_edge: Var, f_root: Var, m: int) -> tuple[Var, Var, Var]:
    """Record marginalization; returns (adj (m,m), root (1,m), log_z scalar)."""
    if m == 1:
        # a single node is the root with probability 1; only log_z carries gradient
        root = ad.scale(f_root, 0.0) + 1.0
        log_z = ad.log(ad.reduce_sum(f_root))
        adj = ad.scale(f_root, 0.0)
        return adj, root, log_z
    eye = g.constant(np.eye(m))
    col_sums = ad.reduce_sum(f_edge, axis=0, keepdims=True)  # (1, m)
    lap = eye * col_sums - f_edge
    lhat = ad.concat([f_root, lap[1:, :]], axis=0)
    binv = ad.mat_inverse(lhat)
    log_z = ad.logdet(lhat)
    root = f_root * ad.transpose(binv[:, 0:1])  # (1, m)
    diag_b = ad.reduce_sum(binv * eye, axis=0, keepdims=True)  # (1, m)
    col_mask = g.constant(np.concatenate([[0.0], np.ones(m - 1)])[None, :])
    row_mask = g.constant(np.concatenate([[0.0], np.ones(m - 1)])[:, None])
    adj = f_edge * diag_b * col_mask - f_edge * ad.transpose(binv) * row_mask
    return adj, root, log_z


def trace_induction(g, h: Var, p: dict[str, Var], epsilon: float, m: int) -> tuple[Var, Var, Var]:
    f_edge, f_root = trace_scores(g, h, p, epsilon, m)
    return trace_marginals(g, f_edge, f_root, m)
