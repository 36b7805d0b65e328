"""Analysis metrics: graph diversity/sparsity and summary-vs-article profiles.

The text metrics follow fixed operational rules (the literature leaves them
underspecified), so numbers are self-consistent rather than comparable across
papers:

- coverage_rate: percent of source sentences sharing at least one bigram with
  the summary token stream, where both bigram tokens are non-stopwords.
- avg_copy_length: the summary is segmented left to right, at each position
  taking the longest contiguous span that appears verbatim in the article
  token stream; unmatched tokens are skipped and excluded from the mean.
- fusion_profile: per summary sentence, source sentences are added greedily
  by largest marginal non-stopword unigram gain until the best gain is < 2
  tokens or 4 sources are used; 1 source = compression, 2/3 = k-hop, 4 =
  the 4-hop-or-more bucket; sentences acquiring no source stay unclassified.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .mtc import LatentGraph, ScoreSet


class MismatchedM(ValueError):
    """Layer graphs disagree on the number of sentence nodes."""


def _load_stopwords() -> frozenset[str]:
    text = resources.files("treesum").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


STOPWORDS = _load_stopwords()


# ---------------------------------------------------------------------------
# latent-graph diversity and sparsity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiversityReport:
    per_layer: list[tuple[float, float]]  # (root_range, edge_range) per layer
    js_root: float | None  # None with a single layer
    js_edge: float | None
    edge_weights_at_epsilon: float
    root_weights_at_epsilon: float

    def as_dict(self) -> dict:
        return {
            "per_layer": [{"root_range": r, "edge_range": e} for r, e in self.per_layer],
            "js_root": self.js_root,
            "js_edge": self.js_edge,
            "sparsity": {
                "edge_weights_at_epsilon": self.edge_weights_at_epsilon,
                "root_weights_at_epsilon": self.root_weights_at_epsilon,
            },
        }


def intra_layer_diversity(g: LatentGraph) -> tuple[float, float]:
    """(range of root probabilities, range of off-diagonal edge marginals)."""
    root_range = float(g.root.max() - g.root.min())
    if g.m < 2:
        return root_range, 0.0
    off = g.adj[~np.eye(g.m, dtype=bool)]
    return root_range, float(off.max() - off.min())


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence, log base 2, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def half(a):
        mask = a > 0.0
        return float((a[mask] * np.log2(a[mask] / m[mask])).sum())

    return 0.5 * half(p) + 0.5 * half(q)


def _edge_distribution(g: LatentGraph) -> np.ndarray:
    off = g.adj[~np.eye(g.m, dtype=bool)]  # row-major off-diagonal entries
    total = off.sum()
    return off / total if total > 0.0 else off


def inter_layer_diversity(gs: list[LatentGraph]) -> tuple[float, float]:
    """Mean pairwise JS divergence of root and (renormalized) edge marginals."""
    if len(gs) < 2:
        raise ValueError("need at least two layer graphs")
    m = gs[0].m
    if any(g.m != m for g in gs):
        raise MismatchedM([g.m for g in gs])
    js_r, js_e, pairs = 0.0, 0.0, 0
    for a in range(len(gs)):
        for b in range(a + 1, len(gs)):
            js_r += js_divergence(gs[a].root, gs[b].root)
            if m >= 2:
                js_e += js_divergence(_edge_distribution(gs[a]), _edge_distribution(gs[b]))
            pairs += 1
    return js_r / pairs, js_e / pairs


def sparsity_stats(scores: list[ScoreSet]) -> tuple[float, float]:
    """Fractions of off-diagonal edge weights and root weights equal to epsilon.

    A weight equals epsilon exactly when its ReLU preactivation was <= 0, so
    this counts pruned scores, not marginals.
    """
    edge_hits = edge_total = root_hits = root_total = 0
    for s in scores:
        off = ~np.eye(s.m, dtype=bool)
        edge_hits += int((s.f_edge[off] == s.epsilon).sum())
        edge_total += int(off.sum())
        root_hits += int((s.f_root == s.epsilon).sum())
        root_total += s.m
    return (
        edge_hits / edge_total if edge_total else 0.0,
        root_hits / root_total if root_total else 0.0,
    )


def diversity_report(graphs: list[LatentGraph], scores: list[ScoreSet]) -> DiversityReport:
    js_r, js_e = (None, None) if len(graphs) < 2 else inter_layer_diversity(graphs)
    e_frac, r_frac = sparsity_stats(scores)
    return DiversityReport([intra_layer_diversity(g) for g in graphs], js_r, js_e, e_frac, r_frac)


# ---------------------------------------------------------------------------
# text metrics
# ---------------------------------------------------------------------------


def _content_bigrams(tokens: list[str]) -> set[tuple[str, str]]:
    return {
        (a, b)
        for a, b in zip(tokens, tokens[1:])
        if a not in STOPWORDS and b not in STOPWORDS
    }


def coverage_rate(article_sentences: list[list[str]], summary_tokens: list[str]) -> float:
    """Percent of source sentences sharing a non-stopword bigram with the summary."""
    if not article_sentences:
        raise ValueError("empty article")
    summary_bigrams = _content_bigrams([t.lower() for t in summary_tokens])
    if not summary_bigrams:
        return 0.0
    hits = sum(
        1
        for sent in article_sentences
        if _content_bigrams([t.lower() for t in sent]) & summary_bigrams
    )
    return 100.0 * hits / len(article_sentences)


def avg_copy_length(article_tokens: list[str], summary_tokens: list[str]) -> float:
    """Mean length of maximal summary spans copied verbatim from the article."""
    article = [t.lower() for t in article_tokens]
    summary = [t.lower() for t in summary_tokens]
    positions: dict[str, list[int]] = {}
    for i, tok in enumerate(article):
        positions.setdefault(tok, []).append(i)
    spans = []
    i = 0
    while i < len(summary):
        best = 0
        for start in positions.get(summary[i], ()):
            n = 0
            while (
                i + n < len(summary)
                and start + n < len(article)
                and article[start + n] == summary[i + n]
            ):
                n += 1
            best = max(best, n)
        if best > 0:
            spans.append(best)
            i += best
        else:
            i += 1
    return float(np.mean(spans)) if spans else 0.0


FUSION_MIN_GAIN = 2
FUSION_MAX_SOURCES = 4


@dataclass(frozen=True)
class FusionProfile:
    compression_pct: float
    two_hop_pct: float
    three_hop_pct: float
    four_plus_pct: float
    classified: int
    unclassified: int

    def as_dict(self) -> dict:
        return {
            "compression_pct": self.compression_pct,
            "two_hop_pct": self.two_hop_pct,
            "three_hop_pct": self.three_hop_pct,
            "four_plus_pct": self.four_plus_pct,
            "classified": self.classified,
            "unclassified": self.unclassified,
        }


def _source_count(summary_sentence: list[str], source_sets: list[set[str]]) -> int:
    target = {t.lower() for t in summary_sentence} - STOPWORDS
    covered: set[str] = set()
    used = 0
    while used < FUSION_MAX_SOURCES:
        best_gain, best_idx = 0, -1
        for idx, src in enumerate(source_sets):
            gain = len((target & src) - covered)
            if gain > best_gain:
                best_gain, best_idx = gain, idx
        if best_gain < FUSION_MIN_GAIN:
            break
        covered |= target & source_sets[best_idx]
        used += 1
    return used


def fusion_profile(
    article_sentences: list[list[str]], summary_sentences: list[list[str]]
) -> FusionProfile:
    if not summary_sentences:
        raise ValueError("empty summary")
    source_sets = [{t.lower() for t in s} - STOPWORDS for s in article_sentences]
    buckets = {1: 0, 2: 0, 3: 0, 4: 0}
    unclassified = 0
    for sent in summary_sentences:
        used = _source_count(sent, source_sets)
        if used == 0:
            unclassified += 1
        else:
            buckets[min(used, 4)] += 1
    classified = sum(buckets.values())
    pct = lambda k: 100.0 * buckets[k] / classified if classified else 0.0
    return FusionProfile(pct(1), pct(2), pct(3), pct(4), classified, unclassified)


def analyze_pair(article_text: str, summary_text: str) -> dict:
    """Coverage, copy length, and fusion profile for one article/summary pair."""
    from . import corpus

    sent_strings = corpus.split_sentences(article_text)
    article_sentences = [corpus.tokenize(s) for s in sent_strings]
    article_sentences = [s for s in article_sentences if s]
    if not article_sentences:
        raise ValueError("article has no tokens")
    summary_tokens = corpus.tokenize(summary_text)
    summary_sentences = [corpus.tokenize(s) for s in corpus.split_sentences(summary_text)]
    summary_sentences = [s for s in summary_sentences if s]
    article_tokens = [t for s in article_sentences for t in s]
    return {
        "coverage": coverage_rate(article_sentences, summary_tokens),
        "copy_length": avg_copy_length(article_tokens, summary_tokens),
        "fusion": fusion_profile(article_sentences, summary_sentences).as_dict()
        if summary_sentences
        else None,
    }
