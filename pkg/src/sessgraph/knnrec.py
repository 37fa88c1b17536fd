"""Session k-nearest-neighbor recommenders and their graph-embedding extension.

The base recommenders match sessions on exact shared items and score
candidates with binary cosine similarity. The extension instead matches item
*embeddings*: a pair of items counts as similar when their cosine distance
is at or below a threshold, and session similarity becomes the number of
matched pairs normalized by the geometric mean of the session set sizes.
With one-hot embeddings and a threshold below the minimum cross-item
distance this reduces exactly to the base behavior.

find_neighbors is the integration point for further similarity schemes
(decay-weighted variants and the like): they plug in as alternative session
scoring inside it without touching indexing or item scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .sessiondata import ItemCatalog, SessionCorpus

DEFAULT_K = 100
DEFAULT_M_SAMPLE = 1000
DEFAULT_K_REC = 20


@dataclass(frozen=True)
class GcnextConfig:
    enabled: bool = False
    distance_threshold: float = 0.5
    session_scoring: str = "rscore"        # rscore | position
    expand_pool: bool = False

    def __post_init__(self):
        if not 0.0 <= self.distance_threshold <= 2.0:
            raise ConfigError(f"distance_threshold must be in [0, 2], got {self.distance_threshold}")
        if self.session_scoring not in ("rscore", "position"):
            raise ConfigError(f"unknown session_scoring {self.session_scoring!r}")


@dataclass(frozen=True)
class KnnConfig:
    k: int = DEFAULT_K
    m_sample: int = DEFAULT_M_SAMPLE
    base_mode: str = "sknn"                # sknn | v-sknn
    gcnext: GcnextConfig = field(default_factory=GcnextConfig)
    k_rec: int = DEFAULT_K_REC
    exclude_input_items: bool = False

    def __post_init__(self):
        if self.base_mode not in ("sknn", "v-sknn"):
            raise ConfigError(f"unknown base_mode {self.base_mode!r}")
        if self.k > self.m_sample:
            raise ConfigError(f"k ({self.k}) must not exceed m_sample ({self.m_sample})")

    @property
    def position_weighting(self) -> bool:
        return self.base_mode == "v-sknn" or (
            self.gcnext.enabled and self.gcnext.session_scoring == "position"
        )


@dataclass
class IndexedSession:
    session_id: str
    items: tuple[int, ...]
    item_set: frozenset[int]
    start_ts: int


@dataclass
class SessionIndex:
    sessions: list[IndexedSession]
    by_item: dict[int, list[int]]          # item -> positions into sessions
    recency_order: list[int]               # newest first, ties by id descending


def index_sessions(train: SessionCorpus) -> SessionIndex:
    """Inverted item index plus a recency ranking of the training sessions."""
    if not train.sessions:
        raise DataError("cannot index an empty corpus")
    sessions = [
        IndexedSession(s.session_id, tuple(s.items), frozenset(s.items), s.start_ts)
        for s in train.sessions
    ]
    by_item: dict[int, list[int]] = {}
    for pos, s in enumerate(sessions):
        for item in s.item_set:
            by_item.setdefault(item, []).append(pos)
    recency = sorted(range(len(sessions)),
                     key=lambda p: (sessions[p].start_ts, sessions[p].session_id),
                     reverse=True)
    return SessionIndex(sessions, by_item, recency)


class EmbeddingMatcher:
    """Threshold matching on cosine distance between item embeddings."""

    def __init__(self, embeddings: np.ndarray, threshold: float):
        emb = np.asarray(embeddings, dtype=np.float64)
        norms = np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
        self.unit = emb / norms
        self.threshold = float(threshold)
        self.m = emb.shape[0]

    def check_items(self, items):
        for it in items:
            if it < 0 or it >= self.m:
                raise ConfigError(f"no embedding row for item {it}")

    def match_row(self, item: int) -> np.ndarray:
        """Boolean mask over the catalog: cosine distance <= threshold."""
        sims = self.unit @ self.unit[item]
        return (1.0 - sims) <= self.threshold + 1e-12


@dataclass
class ScoredSession:
    position: int
    similarity: float


def _binary_cosine(a: frozenset, b: frozenset) -> float:
    inter = len(a & b)
    if inter == 0:
        return 0.0
    return inter / math.sqrt(len(a) * len(b))


def _candidate_pool(input_set, index: SessionIndex, config: KnnConfig,
                    matcher: EmbeddingMatcher | None) -> list[int]:
    positions = set()
    for item in input_set:
        positions.update(index.by_item.get(item, ()))
    if matcher is not None and config.gcnext.expand_pool:
        combined = np.zeros(matcher.m, dtype=bool)
        for item in input_set:
            combined |= matcher.match_row(item)
        matched_items = np.flatnonzero(combined)
        for item in matched_items:
            positions.update(index.by_item.get(int(item), ()))
    pooled = [p for p in index.recency_order if p in positions]
    return pooled[:config.m_sample]


def find_neighbors(input_items, index: SessionIndex, config: KnnConfig,
                   embeddings: np.ndarray | None = None) -> list[ScoredSession]:
    """Top-k candidate sessions scored by session similarity.

    Ties rank newer sessions first. Input items absent from the index simply
    contribute no exact matches but still take part in embedding matching.
    """
    input_set = frozenset(input_items)
    if not input_set:
        return []
    matcher = None
    if config.gcnext.enabled:
        if embeddings is None:
            raise ConfigError("gcnext is enabled but no embeddings were supplied")
        matcher = EmbeddingMatcher(embeddings, config.gcnext.distance_threshold)
        matcher.check_items(input_set)
    pool = _candidate_pool(input_set, index, config, matcher)

    scored = []
    if matcher is None:
        for pos in pool:
            sim = _binary_cosine(input_set, index.sessions[pos].item_set)
            if sim > 0:
                scored.append(ScoredSession(pos, sim))
    else:
        masks = {item: matcher.match_row(item) for item in input_set}
        for pos in pool:
            cand = index.sessions[pos].item_set
            matcher.check_items(cand)
            pairs = sum(int(masks[x][y]) for x in input_set for y in cand)
            if pairs == 0:
                continue
            r = pairs / math.sqrt(len(input_set) * len(cand))
            scored.append(ScoredSession(pos, r))

    recency_rank = {p: r for r, p in enumerate(index.recency_order)}
    scored.sort(key=lambda s: (-s.similarity, recency_rank[s.position]))
    return scored[:config.k]


def _position_weight(input_items, session: IndexedSession, config: KnnConfig,
                     matcher: EmbeddingMatcher | None,
                     masks: dict[int, np.ndarray] | None) -> float:
    """Linear weight from the most recent input item matched in the session."""
    n = len(input_items)
    for pos in range(n, 0, -1):
        item = input_items[pos - 1]
        if matcher is None:
            hit = item in session.item_set
        else:
            hit = bool(np.any([masks[item][y] for y in session.item_set]))
        if hit:
            return pos / n
    return 0.0


def score_items(neighbors: list[ScoredSession], input_items, index: SessionIndex,
                config: KnnConfig, embeddings: np.ndarray | None = None) -> dict[int, float]:
    """score(x) = sum over neighbor sessions containing x of sim * weight."""
    if not neighbors:
        return {}
    matcher = None
    masks = None
    if config.gcnext.enabled:
        if embeddings is None:
            raise ConfigError("gcnext is enabled but no embeddings were supplied")
        matcher = EmbeddingMatcher(embeddings, config.gcnext.distance_threshold)
        masks = {item: matcher.match_row(item) for item in set(input_items)}
    scores: dict[int, float] = {}
    for nb in neighbors:
        session = index.sessions[nb.position]
        if config.position_weighting:
            w = _position_weight(tuple(input_items), session, config, matcher, masks)
        else:
            w = 1.0
        contribution = nb.similarity * w
        if contribution == 0.0:
            continue
        for item in session.item_set:
            scores[item] = scores.get(item, 0.0) + contribution
    return scores


@dataclass(frozen=True)
class RankedList:
    """Descending-score item ranking; ties broken by ascending item index."""

    entries: tuple[tuple[int, float], ...]

    def items(self) -> list[int]:
        return [i for i, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def recommend(input_items, index: SessionIndex, config: KnnConfig,
              embeddings: np.ndarray | None = None,
              k_rec: int | None = None) -> RankedList:
    if len(tuple(input_items)) < 1:
        raise DataError("input session must contain at least one item")
    k_rec = config.k_rec if k_rec is None else k_rec
    neighbors = find_neighbors(input_items, index, config, embeddings)
    scores = score_items(neighbors, input_items, index, config, embeddings)
    if config.exclude_input_items:
        for item in set(input_items):
            scores.pop(item, None)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return RankedList(tuple(ranked[:k_rec]))


def batch_recommend(queries: list[list[str]], index: SessionIndex, config: KnnConfig,
                    catalog: ItemCatalog, embeddings: np.ndarray | None = None) -> list[str]:
    """Rank each query (external item ids); unknown ids are skipped.

    Output rows: query id (1-based), rank, item external id, score (6 dp),
    tab-separated.
    """
    rows = []
    for qid, query in enumerate(queries, start=1):
        items = [catalog.index_of[e] for e in query if e in catalog.index_of]
        ranked = recommend(items, index, config, embeddings) if items else RankedList(())
        for rank, (item, score) in enumerate(ranked.entries, start=1):
            rows.append(f"{qid}\t{rank}\t{catalog.external_ids[item]}\t{score:.6f}")
    return rows


def recommend_file(query_path, out_path, index: SessionIndex, config: KnnConfig,
                   catalog: ItemCatalog, embeddings: np.ndarray | None = None) -> int:
    """Batch interface: one session per line (space-separated item ids) in,
    ranked rows out. Returns the number of queries processed."""
    queries = [line.split() for line in
               Path(query_path).read_text(encoding="utf-8").splitlines() if line.strip()]
    rows = batch_recommend(queries, index, config, catalog, embeddings)
    Path(out_path).write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    return len(queries)
