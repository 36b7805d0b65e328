"""Synthetic hierarchical corpora, text ingestion, and hashed features.

Synthetic documents have a known tree: each connector sentence introduces a
topic; its child sentences repeat that topic with extra detail tokens; filler
sentences use off-topic tokens only. The summary concatenates the connector
topics, so reproducing it requires information from every connector. The
first connector is the global root; other connectors and all fillers hang
off it, and children hang off their connector.

Token ids 0 and 1 are reserved for begin/end-of-sequence; word ids start at 2.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOS_ID = 0
EOS_ID = 1
FIRST_WORD_ID = 2
ROOT_PARENT = -1

ABBREVIATIONS = {
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "St.", "U.S.", "U.K.",
    "e.g.", "i.e.", "etc.", "vs.", "Fig.", "No.",
}

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class SynthSpec:
    connectors: int
    children_per_connector: int
    filler_sentences: int
    vocab_size: int
    sentence_len: tuple[int, int]
    seed: int
    topic_size: int = 3

    def __post_init__(self):
        if self.connectors < 1:
            raise ValueError("need at least one connector")
        if self.vocab_size < 50:
            raise ValueError("vocab_size must be >= 50")
        lo, hi = self.sentence_len
        if lo < self.topic_size or hi < lo:
            raise ValueError("sentence_len range must fit the topic tokens")


@dataclass
class Example:
    doc_id: str
    sentences: list[list[int]]
    summary: list[int]
    true_tree: list[int] | None = None


def generate_synthetic(spec: SynthSpec, n_docs: int) -> list[Example]:
    rng = np.random.default_rng(spec.seed)
    docs = []
    for n in range(n_docs):
        docs.append(_one_doc(spec, rng, f"synth-{spec.seed}-{n:04d}"))
    return docs


def _one_doc(spec: SynthSpec, rng: np.random.Generator, doc_id: str) -> Example:
    lo, hi = spec.sentence_len
    words = np.arange(FIRST_WORD_ID, spec.vocab_size)
    topic_pool = rng.permutation(words)
    n_topic_tokens = spec.connectors * spec.topic_size
    topics = [topic_pool[c * spec.topic_size : (c + 1) * spec.topic_size].tolist()
              for c in range(spec.connectors)]
    off_topic = topic_pool[n_topic_tokens:]

    def pad(base: list[int]) -> list[int]:
        length = int(rng.integers(lo, hi + 1))
        extra = max(0, length - len(base))
        return base + rng.choice(off_topic, size=extra).tolist()

    sentences: list[list[int]] = []
    roles: list[tuple[str, int]] = []  # (kind, connector index)
    for c in range(spec.connectors):
        sentences.append(pad(list(topics[c])))
        roles.append(("connector", c))
        for k in range(spec.children_per_connector):
            # children refine: all but one topic token, plus detail padding,
            # so only the connector carries its complete topic
            dropped = k % spec.topic_size
            child_base = [t for i, t in enumerate(topics[c]) if i != dropped]
            sentences.append(pad(child_base))
            roles.append(("child", c))
    for _ in range(spec.filler_sentences):
        sentences.append(pad([]))
        roles.append(("filler", -1))

    # fillers drift to random positions; connector blocks keep document order
    order = list(range(len(sentences)))
    filler_idx = [i for i, (kind, _) in enumerate(roles) if kind == "filler"]
    for i in filler_idx:
        order.remove(i)
        order.insert(int(rng.integers(0, len(order) + 1)), i)
    sentences = [sentences[i] for i in order]
    roles = [roles[i] for i in order]

    connector_pos = {c: i for i, (kind, c) in enumerate(roles) if kind == "connector"}
    root_pos = connector_pos[0]
    tree = []
    for kind, c in roles:
        if kind == "connector":
            tree.append(ROOT_PARENT if c == 0 else root_pos)
        elif kind == "child":
            tree.append(connector_pos[c])
        else:
            tree.append(root_pos)
    summary = [t for c in range(spec.connectors) for t in topics[c]]
    return Example(doc_id, sentences, summary, tree)


def connector_indices(example: Example) -> list[int]:
    """Connector positions recovered from the tree: the root and every parent.

    Children and fillers are leaves, so with children_per_connector >= 1 this
    is exactly the set of connector sentences.
    """
    tree = example.true_tree
    if tree is None:
        raise ValueError("example has no ground-truth tree")
    root = tree.index(ROOT_PARENT)
    parents = {p for p in tree if p != ROOT_PARENT}
    return sorted(parents | {root})


# ---------------------------------------------------------------------------
# text handling
# ---------------------------------------------------------------------------


def split_sentences(text: str) -> list[str]:
    """Split on ., !, ? followed by whitespace and an uppercase letter.

    Candidate boundaries are suppressed when the token ending at the
    punctuation mark is a known abbreviation (Dr., U.S., e.g., ...).
    """
    sentences = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in ".!?":
            j = i + 1
            while j < n and text[j].isspace():
                j += 1
            boundary = j > i + 1 and j < n and text[j].isupper()
            if boundary and ch == ".":
                k = i
                while k > 0 and not text[k - 1].isspace():
                    k -= 1
                if text[k : i + 1] in ABBREVIATIONS:
                    boundary = False
            if boundary:
                sentences.append(text[start : i + 1].strip())
                start = j
                i = j
                continue
        i += 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric word tokens."""
    return _WORD_RE.findall(text.lower())


def _stable_hash(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             key=int(seed).to_bytes(8, "little", signed=False)).digest()
    return int.from_bytes(digest, "little")


def word_id(word: str, vocab_size: int, seed: int) -> int:
    """Stable hash of a word into [FIRST_WORD_ID, vocab_size)."""
    if vocab_size <= FIRST_WORD_ID:
        raise ValueError("vocab_size must exceed the reserved id range")
    return FIRST_WORD_ID + _stable_hash(word, seed) % (vocab_size - FIRST_WORD_ID)


def hash_features(tokens: list[str], dim: int, seed: int) -> np.ndarray:
    """Signed unigram feature hashing, l2-normalized unless all-zero."""
    if dim < 8:
        raise ValueError("dim must be >= 8")
    vec = np.zeros(dim)
    for tok in tokens:
        h = _stable_hash(tok, seed)
        sign = 1.0 if (h >> 60) & 1 == 0 else -1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0.0 else vec


# ---------------------------------------------------------------------------
# JSONL schema: {"doc_id", "article", "summary"[, "true_tree"]}
# ---------------------------------------------------------------------------


def render_word(token_id: int) -> str:
    return f"w{token_id}"


def example_to_record(ex: Example) -> dict:
    def render_sentence(tokens: list[int]) -> str:
        words = [render_word(t) for t in tokens]
        words[0] = words[0].capitalize()
        return " ".join(words) + "."

    record = {
        "doc_id": ex.doc_id,
        "article": " ".join(render_sentence(s) for s in ex.sentences),
        "summary": render_sentence(ex.summary).lower().rstrip("."),
    }
    if ex.true_tree is not None:
        record["true_tree"] = ex.true_tree
    return record


def example_from_record(record: dict, vocab_size: int, seed: int) -> Example:
    sentences = [
        [word_id(w, vocab_size, seed) for w in tokenize(s)]
        for s in split_sentences(record["article"])
    ]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise ValueError(f"document {record.get('doc_id')!r} has no usable sentences")
    summary = [word_id(w, vocab_size, seed) for w in tokenize(record.get("summary", ""))]
    return Example(str(record.get("doc_id", "")), sentences, summary,
                   record.get("true_tree"))


def write_jsonl(records: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
