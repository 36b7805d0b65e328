"""Desk-scale sequence-to-sequence summarizer around the latent-tree stack.

Pipeline: token embedding + sinusoidal positions -> one bidirectional tanh
recurrence -> per-sentence mean pooling -> latent-tree reasoning stack ->
recurrent decoder whose token attention is conditioned on a graph context
vector (graph-selection attention), with the two contexts fused per step.

Every piece exists twice with identical arithmetic: plain numpy functions
(used for decoding and as direct-recomputation references) and traced
builders on a CompGraph (used for training and gradient checks). Tests pin
the two paths against each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus, mtc, reasoning
from .autodiff import CompGraph, ShapeMismatch, Var
from .corpus import BOS_ID, EOS_ID, Example
from .mtc import LatentGraph, ScoringParams, SentenceStates
from .reasoning import BlockParams, StackConfig


class EmptyInput(ValueError):
    """Document with no tokens."""


class EmptySpan(ValueError):
    """Sentence span covering no tokens."""


class UnknownToken(ValueError):
    """Token id outside the configured vocabulary."""


class NonFiniteLoss(RuntimeError):
    """Training loss or gradients left the finite range."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 32
    layers: int = 2
    mode: str = "lsr"
    epsilon: float = mtc.DEFAULT_EPSILON
    seed: int = 0
    share_scoring: bool = False
    gsa_source: str = "last_layer"  # or "fused"
    graph_enabled: bool = True
    context_mode: str = "fused"  # or "token_only"
    phi: str = "tanh"
    max_decode_len: int = 32

    def __post_init__(self):
        if self.vocab_size <= corpus.FIRST_WORD_ID:
            raise ValueError("vocab_size must exceed the reserved ids")
        if self.mode not in ("lsr", "lir"):
            raise ValueError(f"mode must be 'lsr' or 'lir', got {self.mode!r}")
        if self.gsa_source not in ("last_layer", "fused"):
            raise ValueError(f"gsa_source must be 'last_layer' or 'fused'")
        if self.context_mode not in ("fused", "token_only"):
            raise ValueError(f"context_mode must be 'fused' or 'token_only'")

    def stack_config(self) -> StackConfig:
        return StackConfig(self.layers, self.mode, self.d, self.epsilon, self.share_scoring)

    @property
    def n_scoring(self) -> int:
        return 1 if (self.mode == "lsr" or self.share_scoring) else self.layers


@dataclass(frozen=True)
class TokenStates:
    """Contextual token encodings with per-sentence [start, end) spans."""

    n: int
    d: int
    henc: np.ndarray
    sent_spans: list[tuple[int, int]]


@dataclass(frozen=True)
class DecoderStep:
    z: np.ndarray
    a_graph: np.ndarray | None
    c_graph: np.ndarray | None
    a_token: np.ndarray
    c_token: np.ndarray
    c_fused: np.ndarray
    vocab_dist: np.ndarray


@dataclass(frozen=True)
class TrainBatch:
    """Documents plus EOS-terminated targets, validated against |V|."""

    examples: list[Example]
    vocab_size: int
    targets: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        object.__setattr__(
            self, "targets", [ex.summary + [EOS_ID] for ex in self.examples]
        )
        for ex in self.examples:
            ids = [t for s in ex.sentences for t in s] + ex.summary
            bad = [t for t in ids if not (0 <= t < self.vocab_size)]
            if bad:
                raise UnknownToken(f"doc {ex.doc_id!r}: ids {bad[:5]} outside vocab {self.vocab_size}")


@dataclass
class TrainState:
    lr: float
    clip: float = 2.0
    step: int = 0


def _sinusoid_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _mean_matrix(spans: list[tuple[int, int]], n: int) -> np.ndarray:
    mat = np.zeros((len(spans), n))
    for i, (s, e) in enumerate(spans):
        if e <= s:
            raise EmptySpan(f"sentence {i} covers [{s}, {e})")
        mat[i, s:e] = 1.0 / (e - s)
    return mat


class Summarizer:
    """Parameter store plus config; forward logic lives in module functions."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._build_params()

    # parameters are created in a fixed order from one seeded generator, so a
    # given (config, seed) always produces the same initialization
    def _build_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, v = cfg.d, cfg.vocab_size
        u = lambda *s: rng.uniform(-0.08, 0.08, size=s)
        p = self.params
        p["emb"] = u(v, d)
        for direction in ("fw", "bw"):
            p[f"enc.{direction}_w"] = u(d, d)
            p[f"enc.{direction}_u"] = u(d, d)
            p[f"enc.{direction}_b"] = np.zeros(d)
        p["enc.mix_w"] = u(2 * d, d)
        p["enc.mix_b"] = np.zeros(d)
        if cfg.graph_enabled:
            p["pool.w"] = u(d, d)
            p["pool.b"] = np.zeros(d)
            for i in range(cfg.n_scoring):
                p[f"score{i}.wp"] = u(d, d)
                p[f"score{i}.bp"] = np.full(d, 0.05)  # keep init ReLUs live
                p[f"score{i}.wc"] = u(d, d)
                p[f"score{i}.bc"] = np.full(d, 0.05)
                p[f"score{i}.wr"] = u(d, 1)
                p[f"score{i}.br"] = np.full(1, 0.05)
                p[f"score{i}.wbi"] = u(d, d)
            for i in range(cfg.layers):
                p[f"block{i}.fr_w"] = u(d, d)
                p[f"block{i}.fr_b"] = np.zeros(d)
                p[f"block{i}.fn_w"] = u(d, d)
                p[f"block{i}.fn_b"] = np.zeros(d)
                p[f"block{i}.fg_w"] = u(2 * d, d)
                p[f"block{i}.fg_b"] = np.zeros(d)
                p[f"block{i}.ln_gain"] = np.ones(d)
                p[f"block{i}.ln_bias"] = np.zeros(d)
            p["fuse.w"] = u(cfg.layers * d, d)
            p["fuse.b"] = np.zeros(d)
        p["dec.init_w"] = u(d, d)
        p["dec.init_b"] = np.zeros(d)
        p["dec.w"] = u(d, d)
        p["dec.u"] = u(d, d)
        p["dec.b"] = np.zeros(d)
        if cfg.graph_enabled:
            p["gsa.w1"] = u(d, d)
            p["gsa.w2"] = u(d, d)
            p["gsa.v"] = u(d, 1)
        p["tok.w1"] = u(d, d)
        p["tok.w2"] = u(d, d)
        if cfg.graph_enabled:
            p["tok.w3"] = u(d, d)
        p["tok.v"] = u(d, 1)
        if cfg.graph_enabled:
            p["ctx.w"] = u(2 * d, d)
            p["ctx.b"] = np.zeros(d)
        p["out.w"] = u(2 * d, v)
        p["out.b"] = np.zeros(v)

    def scoring_params(self, i: int) -> ScoringParams:
        p = self.params
        return ScoringParams(p[f"score{i}.wp"], p[f"score{i}.bp"], p[f"score{i}.wc"],
                             p[f"score{i}.bc"], p[f"score{i}.wr"], p[f"score{i}.br"],
                             p[f"score{i}.wbi"])

    def block_params(self, i: int) -> BlockParams:
        p = self.params
        return BlockParams(p[f"block{i}.fr_w"], p[f"block{i}.fr_b"], p[f"block{i}.fn_w"],
                           p[f"block{i}.fn_b"], p[f"block{i}.fg_w"], p[f"block{i}.fg_b"],
                           p[f"block{i}.ln_gain"], p[f"block{i}.ln_bias"], self.config.phi)


def build_model(config: ModelConfig) -> Summarizer:
    return Summarizer(config)


def randomize_parameters(model: Summarizer, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Re-draw parameters at a larger scale, in place.

    Gradient checks need parameter gradients well above the central-difference
    roundoff floor; the conservative training init leaves some of them at 1e-8.
    Layer-norm gains stay near 1 and scoring biases stay positive so every
    ReLU path carries signal.
    """
    for name, p in model.params.items():
        if name.endswith("ln_gain"):
            p[:] = rng.uniform(0.8, 1.2, size=p.shape)
        elif name.endswith((".bp", ".bc", ".br")):
            p[:] = rng.uniform(0.05, 0.3, size=p.shape)
        else:
            p[:] = rng.uniform(-scale, scale, size=p.shape)


# ---------------------------------------------------------------------------
# numeric forward path
# ---------------------------------------------------------------------------


def encode_tokens(model: Summarizer, sentences: list[list[int]]) -> TokenStates:
    """Embedding + position signal + one bidirectional tanh recurrence."""
    ids = [t for s in sentences for t in s]
    if not ids:
        raise EmptyInput("document has no tokens")
    if any(not (0 <= t < model.config.vocab_size) for t in ids):
        raise UnknownToken("token id outside vocabulary")
    spans = []
    start = 0
    for s in sentences:
        spans.append((start, start + len(s)))
        start += len(s)
    p = model.params
    d = model.config.d
    n = len(ids)
    x = p["emb"][np.array(ids)] + _sinusoid_positions(n, d)
    fwd = np.zeros((n, d))
    h = np.zeros((1, d))
    for t in range(n):
        h = np.tanh(x[t : t + 1] @ p["enc.fw_w"] + h @ p["enc.fw_u"] + p["enc.fw_b"])
        fwd[t] = h[0]
    bwd = np.zeros((n, d))
    h = np.zeros((1, d))
    for t in range(n - 1, -1, -1):
        h = np.tanh(x[t : t + 1] @ p["enc.bw_w"] + h @ p["enc.bw_u"] + p["enc.bw_b"])
        bwd[t] = h[0]
    henc = np.concatenate([fwd, bwd], axis=1) @ p["enc.mix_w"] + p["enc.mix_b"]
    return TokenStates(n, d, henc, spans)


def pool_sentences(model: Summarizer, ts: TokenStates) -> SentenceStates:
    """Affine map of each span's mean token state; yields H^(0)."""
    pool = _mean_matrix(ts.sent_spans, ts.n)
    s = (pool @ ts.henc) @ model.params["pool.w"] + model.params["pool.b"]
    return SentenceStates.from_array(s)


def run_stack(model: Summarizer, states: SentenceStates) -> reasoning.NodeStates:
    cfg = model.config
    scoring = [model.scoring_params(i) for i in range(cfg.n_scoring)]
    blocks = [model.block_params(i) for i in range(cfg.layers)]
    ns = reasoning.stack_forward(states, cfg.stack_config(), blocks, scoring)
    reasoning.fuse_layers(ns, states.h0, model.params["fuse.w"], model.params["fuse.b"])
    return ns


def graph_attention(model: Summarizer, nodes: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Additive attention over sentence nodes; returns (a_G (m,), c_G (1,d))."""
    p = model.params
    if nodes.shape[1] != z.shape[1]:
        raise ShapeMismatch(f"nodes width {nodes.shape[1]} vs state width {z.shape[1]}")
    e = np.tanh(nodes @ p["gsa.w1"] + z @ p["gsa.w2"]) @ p["gsa.v"]
    a = stable_softmax(e.T)
    return a[0], a @ nodes


def token_attention_with_graph(
    model: Summarizer, ts: TokenStates, z: np.ndarray, c_graph: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Token attention whose scores also see the graph context (when present)."""
    p = model.params
    pre = ts.henc @ p["tok.w1"] + z @ p["tok.w2"]
    if c_graph is not None:
        pre = pre + c_graph @ p["tok.w3"]
    e = np.tanh(pre) @ p["tok.v"]
    a = stable_softmax(e.T)
    return a[0], a @ ts.henc


def fuse_contexts(model: Summarizer, c_graph: np.ndarray, c_token: np.ndarray) -> np.ndarray:
    p = model.params
    return np.tanh(np.concatenate([c_graph, c_token], axis=1) @ p["ctx.w"] + p["ctx.b"])


@dataclass(frozen=True)
class DecodeContext:
    """Everything a decode step attends over."""

    token_states: TokenStates
    nodes: np.ndarray | None  # attention targets from the reasoning stack


def initial_state(model: Summarizer, ts: TokenStates) -> np.ndarray:
    p = model.params
    mean = np.full((1, ts.n), 1.0 / ts.n) @ ts.henc
    return np.tanh(mean @ p["dec.init_w"] + p["dec.init_b"])


def decode_step(
    model: Summarizer, prev_id: int, z: np.ndarray, ctx: DecodeContext
) -> tuple[DecoderStep, np.ndarray]:
    cfg = model.config
    if not (0 <= prev_id < cfg.vocab_size):
        raise UnknownToken(f"token id {prev_id} outside vocabulary {cfg.vocab_size}")
    p = model.params
    emb = p["emb"][prev_id : prev_id + 1]
    z_next = np.tanh(emb @ p["dec.w"] + z @ p["dec.u"] + p["dec.b"])
    if cfg.graph_enabled:
        a_g, c_g = graph_attention(model, ctx.nodes, z_next)
        a_t, c_t = token_attention_with_graph(model, ctx.token_states, z_next, c_g)
        c_f = fuse_contexts(model, c_g, c_t) if cfg.context_mode == "fused" else c_t
    else:
        a_g, c_g = None, None
        a_t, c_t = token_attention_with_graph(model, ctx.token_states, z_next, None)
        c_f = c_t
    logits = np.concatenate([z_next, c_f], axis=1) @ p["out.w"] + p["out.b"]
    dist = stable_softmax(logits)[0]
    step = DecoderStep(z_next, a_g, c_g, a_t, c_t, c_f, dist)
    return step, z_next


def make_context(model: Summarizer, ex: Example) -> tuple[DecodeContext, LatentGraph | None]:
    ts = encode_tokens(model, ex.sentences)
    if not model.config.graph_enabled:
        return DecodeContext(ts, None), None
    states = pool_sentences(model, ts)
    ns = run_stack(model, states)
    nodes = ns.per_layer[-1] if model.config.gsa_source == "last_layer" else ns.fused
    return DecodeContext(ts, nodes), ns.graphs[0]


def teacher_forced_nll(model: Summarizer, ex: Example) -> tuple[float, list[DecoderStep]]:
    """Mean per-token negative log-likelihood under teacher forcing."""
    ctx, _ = make_context(model, ex)
    targets = ex.summary + [EOS_ID]
    z = initial_state(model, ctx.token_states)
    prev = BOS_ID
    total = 0.0
    steps = []
    for y in targets:
        step, z = decode_step(model, prev, z, ctx)
        total -= np.log(step.vocab_dist[y])
        steps.append(step)
        prev = y
    return total / len(targets), steps


@dataclass(frozen=True)
class DecodeResult:
    tokens: list[int]
    steps: list[DecoderStep]
    graph: LatentGraph | None


def greedy_decode(model: Summarizer, ex: Example, max_len: int | None = None) -> DecodeResult:
    """Deterministic argmax decoding until EOS or the length cap."""
    ctx, graph = make_context(model, ex)
    z = initial_state(model, ctx.token_states)
    prev = BOS_ID
    out: list[int] = []
    steps: list[DecoderStep] = []
    for _ in range(max_len or model.config.max_decode_len):
        step, z = decode_step(model, prev, z, ctx)
        steps.append(step)
        nxt = int(np.argmax(step.vocab_dist))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        prev = nxt
    return DecodeResult(out, steps, graph)


def induce_graph(model: Summarizer, ex: Example) -> LatentGraph:
    """Latent graph over the document's initial sentence states."""
    ts = encode_tokens(model, ex.sentences)
    states = pool_sentences(model, ts)
    return mtc.induce(states, model.scoring_params(0), model.config.epsilon)


def decode_to_jsonl(model: Summarizer, examples: list[Example], path: str | Path) -> None:
    """One record per doc: tokens, first latent graph, per-step graph attention."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            res = greedy_decode(model, ex)
            record = {
                "doc_id": ex.doc_id,
                "summary_tokens": res.tokens,
                "graph": json.loads(res.graph.to_json()) if res.graph else None,
                "graph_attention_trace": [
                    None if s.a_graph is None else [float(x) for x in s.a_graph]
                    for s in res.steps
                ],
            }
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# traced loss graph (training / gradient checks)
# ---------------------------------------------------------------------------


def build_loss_graph(model: Summarizer, ex: Example) -> CompGraph:
    """Teacher-forced total-NLL graph; output "loss" plus token count metadata."""
    cfg = model.config
    d = cfg.d
    ids = [t for s in ex.sentences for t in s]
    if not ids:
        raise EmptyInput("document has no tokens")
    spans = []
    start = 0
    for s in ex.sentences:
        spans.append((start, start + len(s)))
        start += len(s)
    n = len(ids)
    m = len(ex.sentences)
    targets = ex.summary + [EOS_ID]
    prev_ids = [BOS_ID] + targets[:-1]

    g = CompGraph()
    P = {name: g.parameter(name, arr) for name, arr in model.params.items()}

    x = ad.gather_rows(P["emb"], np.array(ids)) + g.constant(_sinusoid_positions(n, d))
    zero_row = g.constant(np.zeros((1, d)))
    fwd_rows = []
    h = zero_row
    for t in range(n):
        h = ad.tanh(x[t : t + 1] @ P["enc.fw_w"] + h @ P["enc.fw_u"] + P["enc.fw_b"])
        fwd_rows.append(h)
    bwd_rows: list[Var] = []
    h = zero_row
    for t in range(n - 1, -1, -1):
        h = ad.tanh(x[t : t + 1] @ P["enc.bw_w"] + h @ P["enc.bw_u"] + P["enc.bw_b"])
        bwd_rows.append(h)
    bwd_rows.reverse()
    fwd = ad.concat(fwd_rows, axis=0) if n > 1 else fwd_rows[0]
    bwd = ad.concat(bwd_rows, axis=0) if n > 1 else bwd_rows[0]
    henc = ad.concat([fwd, bwd], axis=1) @ P["enc.mix_w"] + P["enc.mix_b"]

    nodes = None
    if cfg.graph_enabled:
        pool = g.constant(_mean_matrix(spans, n))
        s0 = (pool @ henc) @ P["pool.w"] + P["pool.b"]
        block_vars = [
            {k: P[f"block{i}.{k}"] for k in ("fr_w", "fr_b", "fn_w", "fn_b",
                                             "fg_w", "fg_b", "ln_gain", "ln_bias")}
            for i in range(cfg.layers)
        ]
        scoring_vars = [
            {k: P[f"score{i}.{k}"] for k in ("wp", "bp", "wc", "bc", "wr", "br", "wbi")}
            for i in range(cfg.n_scoring)
        ]
        per_layer, graph_vars = reasoning.trace_stack(
            g, s0, cfg.stack_config(), block_vars, scoring_vars, cfg.phi, m
        )
        fused = reasoning.trace_fusion(per_layer, s0, P["fuse.w"], P["fuse.b"])
        nodes = per_layer[-1] if cfg.gsa_source == "last_layer" else fused
        adj0, root0, logz0 = graph_vars[0]
        g.set_output("adj", adj0)
        g.set_output("root", root0)
        g.set_output("log_z", logz0)

    mean = g.constant(np.full((1, n), 1.0 / n))
    z = ad.tanh((mean @ henc) @ P["dec.init_w"] + P["dec.init_b"])
    prev_emb = ad.gather_rows(P["emb"], np.array(prev_ids))
    rows = []
    for t in range(len(targets)):
        z = ad.tanh(prev_emb[t : t + 1] @ P["dec.w"] + z @ P["dec.u"] + P["dec.b"])
        if cfg.graph_enabled:
            e_g = ad.tanh(nodes @ P["gsa.w1"] + z @ P["gsa.w2"]) @ P["gsa.v"]
            a_g = ad.softmax(ad.transpose(e_g))
            c_g = a_g @ nodes
            e_t = ad.tanh(henc @ P["tok.w1"] + z @ P["tok.w2"] + c_g @ P["tok.w3"]) @ P["tok.v"]
        else:
            e_t = ad.tanh(henc @ P["tok.w1"] + z @ P["tok.w2"]) @ P["tok.v"]
        a_t = ad.softmax(ad.transpose(e_t))
        c_t = a_t @ henc
        if cfg.graph_enabled and cfg.context_mode == "fused":
            c_f = ad.tanh(ad.concat([c_g, c_t], axis=1) @ P["ctx.w"] + P["ctx.b"])
        else:
            c_f = c_t
        rows.append(ad.concat([z, c_f], axis=1))
    zc = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    logits = zc @ P["out.w"] + P["out.b"]
    probs = ad.softmax(logits)
    onehot = np.zeros((len(targets), cfg.vocab_size))
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = ad.reduce_sum(probs * g.constant(onehot), axis=1)
    g.set_output("loss", ad.scale(ad.reduce_sum(ad.log(picked)), -1.0))
    g.n_target_tokens = len(targets)  # type: ignore[attr-defined]
    return g


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _apply_update(model: Summarizer, grads: dict[str, np.ndarray], state: TrainState) -> None:
    total_sq = 0.0
    for name in model.params:
        gr = grads[name]
        total_sq += float((gr * gr).sum())
    norm = np.sqrt(total_sq)
    factor = state.clip / norm if (state.clip > 0 and norm > state.clip) else 1.0
    for name, p in model.params.items():
        p -= state.lr * factor * grads[name]  # in place: graphs hold references
    state.step += 1


def _batch_pass(
    model: Summarizer, graphs: list[CompGraph]
) -> tuple[float, dict[str, np.ndarray]]:
    total_nll = 0.0
    total_tokens = 0
    acc = {name: np.zeros_like(p) for name, p in model.params.items()}
    for g in graphs:
        loss = float(ad.forward_eval(g)["loss"])
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite document loss {loss!r}")
        total_nll += loss
        total_tokens += g.n_target_tokens  # type: ignore[attr-defined]
        try:
            store = ad.backward_accumulate(g, 1.0, output="loss")
        except FloatingPointError as exc:
            raise NonFiniteLoss(f"non-finite gradient: {exc}") from exc
        for name in acc:
            acc[name] += store[name]
    scale = 1.0 / total_tokens
    for name in acc:
        acc[name] *= scale
    return total_nll / total_tokens, acc


def train_step(batch: TrainBatch, model: Summarizer, state: TrainState) -> float:
    """One gradient-descent step on a batch; returns mean token NLL."""
    graphs = [build_loss_graph(model, ex) for ex in batch.examples]
    loss, grads = _batch_pass(model, graphs)
    _apply_update(model, grads, state)
    return loss


def train(
    model: Summarizer,
    examples: list[Example],
    steps: int,
    lr: float,
    clip: float = 2.0,
    batch_size: int = 8,
    log_every: int = 0,
    on_step=None,
) -> list[float]:
    """Deterministic round-robin mini-batch training; returns per-step losses.

    Loss graphs are built once per document and re-evaluated every step
    (parameter arrays are shared with the graphs and updated in place).
    """
    TrainBatch(examples, model.config.vocab_size)  # validate ids once
    graphs = [build_loss_graph(model, ex) for ex in examples]
    state = TrainState(lr=lr, clip=clip)
    n = len(examples)
    losses = []
    cursor = 0
    for step_idx in range(steps):
        idx = [(cursor + k) % n for k in range(min(batch_size, n))]
        cursor = (cursor + batch_size) % n
        loss, grads = _batch_pass(model, [graphs[i] for i in idx])
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"step {step_idx}: loss {loss!r}")
        _apply_update(model, grads, state)
        losses.append(loss)
        if on_step is not None:
            on_step(step_idx, loss)
        if log_every and step_idx % log_every == 0:
            print(f"step {step_idx}: nll {loss:.4f}")
    return losses
