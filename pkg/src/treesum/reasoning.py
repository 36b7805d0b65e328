"""Hierarchy-aware message passing over a latent sentence graph.

One block updates node i by mixing a self transform with marginal-weighted
aggregation from all other nodes, gated and layer-normalized:

    u_i    = (1 - root_i) * F_r(h_i) + root_i * sum_k adj[i,k] * F_n(h_k)
    gate_i = sigmoid(F_g([u_i; h_i]))
    h_i'   = LN(gate_i * phi(u_i) + (1 - gate_i) * h_i)

The aggregation runs over all nodes (the learned graph is complete with soft
weights). Stacks either reuse one graph for every block (LSR) or induce a
fresh graph from the entering states before each block (LIR). A fusion layer
concatenates all per-layer outputs, projects back to width d, and adds the
initial states as a residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mtc
from .autodiff import ShapeMismatch, Var
from .mtc import LatentGraph, ScoringParams, SentenceStates

PHI_CHOICES = ("tanh", "relu", "identity")


def _phi_numeric(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "identity":
        return x
    raise ValueError(f"unknown nonlinearity {name!r}")


def _phi_traced(name: str, v: Var) -> Var:
    if name == "tanh":
        return ad.tanh(v)
    if name == "relu":
        return ad.relu(v)
    if name == "identity":
        return v
    raise ValueError(f"unknown nonlinearity {name!r}")


@dataclass(frozen=True)
class BlockParams:
    """Affine maps F_r, F_n (d->d), F_g (2d->d), LN gain/bias, and phi."""

    fr_w: np.ndarray
    fr_b: np.ndarray
    fn_w: np.ndarray
    fn_b: np.ndarray
    fg_w: np.ndarray
    fg_b: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    phi: str = "tanh"

    def __post_init__(self):
        d = self.fr_b.shape[0]
        if self.fr_w.shape != (d, d) or self.fn_w.shape != (d, d) or self.fg_w.shape != (2 * d, d):
            raise ShapeMismatch("block parameter shapes inconsistent with width d")
        if self.phi not in PHI_CHOICES:
            raise ValueError(f"phi must be one of {PHI_CHOICES}")

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, phi: str = "tanh", scale: float = 0.08) -> "BlockParams":
        u = lambda *s: rng.uniform(-scale, scale, size=s)
        return cls(u(d, d), np.zeros(d), u(d, d), np.zeros(d), u(2 * d, d), np.zeros(d),
                   np.ones(d), np.zeros(d), phi)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "fr_w": self.fr_w, "fr_b": self.fr_b, "fn_w": self.fn_w, "fn_b": self.fn_b,
            "fg_w": self.fg_w, "fg_b": self.fg_b, "ln_gain": self.ln_gain, "ln_bias": self.ln_bias,
        }


@dataclass(frozen=True)
class StackConfig:
    layers: int
    mode: str  # "lsr" | "lir"
    d: int
    epsilon: float = mtc.DEFAULT_EPSILON
    share_scoring: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one reasoning layer")
        if self.mode not in ("lsr", "lir"):
            raise ValueError(f"mode must be 'lsr' or 'lir', got {self.mode!r}")


@dataclass
class NodeStates:
    """Per-layer states h^(1..L), fused output h^(G), and the induced graph(s)."""

    per_layer: list[np.ndarray]
    fused: np.ndarray | None
    graphs: list[LatentGraph]
    scores: list[mtc.ScoreSet] = field(default_factory=list)


def node_update(h_l: np.ndarray, g: LatentGraph, p: BlockParams) -> np.ndarray:
    if h_l.shape[0] != g.m:
        raise ShapeMismatch(f"{h_l.shape[0]} states vs graph over {g.m} nodes")
    self_term = h_l @ p.fr_w + p.fr_b
    neighbor = g.adj @ (h_l @ p.fn_w + p.fn_b)
    r = g.root[:, None]
    return (1.0 - r) * self_term + r * neighbor


def gated_merge(u: np.ndarray, h_l: np.ndarray, p: BlockParams) -> np.ndarray:
    if u.shape != h_l.shape:
        raise ShapeMismatch(f"update {u.shape} vs state {h_l.shape}")
    gate = 1.0 / (1.0 + np.exp(-(np.concatenate([u, h_l], axis=1) @ p.fg_w + p.fg_b)))
    mixed = gate * _phi_numeric(p.phi, u) + (1.0 - gate) * h_l
    mu = mixed.mean(axis=1, keepdims=True)
    xc = mixed - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    xhat = xc / np.sqrt(var + ad.LN_VARIANCE_EPS)
    return xhat * p.ln_gain + p.ln_bias


def stack_forward(
    h0: SentenceStates,
    cfg: StackConfig,
    blocks: list[BlockParams],
    scoring: list[ScoringParams],
) -> NodeStates:
    """Run L blocks; LSR induces one graph from h^(0), LIR one per entering state."""
    if len(blocks) != cfg.layers:
        raise ValueError(f"{len(blocks)} block params for {cfg.layers} layers")

    def induce_from(states: SentenceStates, layer: int):
        sp = _pick_scoring(scoring, cfg, layer)
        score_set = mtc.score(mtc.project_parent_child(states, sp), sp, cfg.epsilon)
        return mtc.marginalize(score_set), score_set

    graphs: list[LatentGraph] = []
    score_sets: list[mtc.ScoreSet] = []
    per_layer: list[np.ndarray] = []
    h = h0.h0
    shared = None
    if cfg.mode == "lsr":
        shared, s = induce_from(h0, 0)
        graphs.append(shared)
        score_sets.append(s)
    for layer, block in enumerate(blocks):
        if cfg.mode == "lir":
            g, s = induce_from(SentenceStates.from_array(h), layer)
            graphs.append(g)
            score_sets.append(s)
        else:
            g = shared
        h = gated_merge(node_update(h, g, block), h, block)
        per_layer.append(h)
    return NodeStates(per_layer, None, graphs, score_sets)


def _pick_scoring(scoring: list[ScoringParams], cfg: StackConfig, layer: int) -> ScoringParams:
    if cfg.share_scoring or cfg.mode == "lsr":
        return scoring[0]
    if len(scoring) != cfg.layers:
        raise ValueError(f"{len(scoring)} scoring sets for {cfg.layers} independent layers")
    return scoring[layer]


def fuse_layers(ns: NodeStates, h0: np.ndarray, fuse_w: np.ndarray, fuse_b: np.ndarray) -> np.ndarray:
    """h^(G) = W_g [h^(1); ...; h^(L)] + b_g + h^(0) (residual)."""
    if not ns.per_layer:
        raise ValueError("no layer outputs to fuse")
    stacked = np.concatenate(ns.per_layer, axis=1)
    if stacked.shape[1] != fuse_w.shape[0]:
        raise ShapeMismatch(f"fusion weight expects {fuse_w.shape[0]} columns, got {stacked.shape[1]}")
    fused = stacked @ fuse_w + fuse_b + h0
    ns.fused = fused
    return fused


# ---------------------------------------------------------------------------
# traced variants (same formulas recorded on a CompGraph)
# ---------------------------------------------------------------------------


def trace_node_update(h: Var, adj: Var, root: Var, p: dict[str, Var]) -> Var:
    """root arrives as a (1, m) row; adj as (m, m)."""
    self_term = h @ p["fr_w"] + p["fr_b"]
    neighbor = adj @ (h @ p["fn_w"] + p["fn_b"])
    r = ad.transpose(root)  # (m, 1)
    return (1.0 - r) * self_term + r * neighbor


def trace_gated_merge(u: Var, h: Var, p: dict[str, Var], phi: str) -> Var:
    gate = ad.sigmoid(ad.concat([u, h], axis=1) @ p["fg_w"] + p["fg_b"])
    mixed = gate * _phi_traced(phi, u) + (1.0 - gate) * h
    return ad.layer_norm(mixed, p["ln_gain"], p["ln_bias"])


def trace_stack(
    g,
    h0: Var,
    cfg: StackConfig,
    block_vars: list[dict[str, Var]],
    scoring_vars: list[dict[str, Var]],
    phi: str,
    m: int,
) -> tuple[list[Var], list[tuple[Var, Var, Var]]]:
    """Returns per-layer state Vars and the (adj, root, log_z) triple per graph."""
    graphs: list[tuple[Var, Var, Var]] = []
    per_layer: list[Var] = []
    h = h0
    adj = root = None
    for layer in range(cfg.layers):
        if cfg.mode == "lir" or layer == 0:
            svars = scoring_vars[0] if (cfg.share_scoring or cfg.mode == "lsr") else scoring_vars[layer]
            adj, root, log_z = mtc.trace_induction(g, h if cfg.mode == "lir" else h0, svars, cfg.epsilon, m)
            graphs.append((adj, root, log_z))
        u = trace_node_update(h, adj, root, block_vars[layer])
        h = trace_gated_merge(u, h, block_vars[layer], phi)
        per_layer.append(h)
    return per_layer, graphs


def trace_fusion(per_layer: list[Var], h0: Var, fuse_w: Var, fuse_b: Var) -> Var:
    return ad.concat(per_layer, axis=1) @ fuse_w + fuse_b + h0
