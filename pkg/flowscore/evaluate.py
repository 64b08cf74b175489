# flowscore/evaluate.py

"""
Filtered ranking for relation and entity prediction.

Ranks are pessimistic: every unfiltered candidate scoring at least as high
as the ground truth counts as ranked above it.
"""

import asyncio
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, TypeVar

import numpy as np

from .kg import Dataset, KnowledgeGraph, build_graph
from .logger import log
from .model import FlowModulatedScorer, build_contexts
from .sampling import query_exclusions, substream

CATEGORY_THRESHOLD = 1.5
CATEGORIES = ("1-1", "1-N", "N-1", "N-N")
MULTI_RELATION = "multi_relation"

T = TypeVar("T")
R = TypeVar("R")


# ---------- Reports ----------

@dataclass
class RankingReport:
    ranks: np.ndarray
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    per_category: Dict[str, "RankingReport"] = field(default_factory=dict)
    # entity task: candidates were sampled because the pool exceeded the cap
    sampled_candidates: bool = False

    @property
    def num_queries(self) -> int:
        return len(self.ranks)

    def hits(self, n: int) -> float:
        return float(np.mean(self.ranks <= n))

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "mrr": self.mrr,
            "hits1": self.hits1,
            "hits3": self.hits3,
            "hits10": self.hits10,
            "num_queries": self.num_queries,
        }
        if self.per_category:
            out["per_category"] = {k: v.to_dict() for k, v in self.per_category.items()}
        return out


def compute_metrics(ranks: Iterable[int]) -> RankingReport:
    r = np.asarray(list(ranks), dtype=np.int64)
    if r.size == 0:
        raise ValueError("compute_metrics needs at least one rank")
    if r.min() < 1:
        raise ValueError(f"ranks must be positive, got {int(r.min())}")
    return RankingReport(
        ranks=r,
        mrr=float(np.mean(1.0 / r)),
        hits1=float(np.mean(r <= 1)),
        hits3=float(np.mean(r <= 3)),
        hits10=float(np.mean(r <= 10)),
    )


def _grouped_report(ranks: Sequence[int], groups: Dict[str, List[int]]) -> RankingReport:
    report = compute_metrics(ranks)
    arr = report.ranks
    for name, idx in groups.items():
        if idx:
            report.per_category[name] = compute_metrics(arr[idx])
    return report


# ---------- Filters and categories ----------

class FilterIndex:
    """Known-true answers over a set of splits, for the filtered setting."""

    def __init__(self, triples: Iterable[np.ndarray]) -> None:
        self.sources = [np.asarray(b, dtype=np.int64).reshape(-1, 3) for b in triples]
        self.pair_rels: Dict[Tuple[int, int], Set[int]] = defaultdict(set)
        self.tails: Dict[Tuple[int, int], Set[int]] = defaultdict(set)
        self.heads: Dict[Tuple[int, int], Set[int]] = defaultdict(set)
        for block in self.sources:
            for h, r, t in block.tolist():
                self.pair_rels[(h, t)].add(r)
                self.tails[(h, r)].add(t)
                self.heads[(r, t)].add(h)

    @classmethod
    def for_split(cls, dataset: Dataset, split: str) -> "FilterIndex":
        # inductive test entities live in their own index space
        if dataset.mode == "inductive":
            if split == "test":
                return cls([dataset.test_graph, dataset.test])
            return cls([dataset.train, dataset.valid])
        return cls([dataset.train, dataset.valid, dataset.test])

    def relations(self, h: int, t: int) -> Set[int]:
        return self.pair_rels.get((h, t), set())

    def answers(self, h: int, r: int, t: int, direction: str) -> Set[int]:
        if direction == "tail":
            return self.tails.get((h, r), set())
        return self.heads.get((r, t), set())

    def __contains__(self, triple: Tuple[int, int, int]) -> bool:
        h, r, t = triple
        return r in self.pair_rels.get((h, t), ())


def categorize_relations(
    train_triples: np.ndarray,
    num_relations: Optional[int] = None,
    threshold: float = CATEGORY_THRESHOLD,
) -> Dict[int, str]:
    """
    tph = mean distinct tails per head, hpt = mean distinct heads per tail,
    both per relation. Relations with no training facts count as 1-1.
    """
    trip = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
    n_rel = int(trip[:, 1].max()) + 1 if num_relations is None and len(trip) else (num_relations or 0)
    tails_of: Dict[Tuple[int, int], Set[int]] = defaultdict(set)
    heads_of: Dict[Tuple[int, int], Set[int]] = defaultdict(set)
    for h, r, t in trip.tolist():
        tails_of[(r, h)].add(t)
        heads_of[(r, t)].add(h)

    tph_sum = np.zeros(n_rel)
    tph_cnt = np.zeros(n_rel)
    hpt_sum = np.zeros(n_rel)
    hpt_cnt = np.zeros(n_rel)
    for (r, _), ts in tails_of.items():
        tph_sum[r] += len(ts)
        tph_cnt[r] += 1
    for (r, _), hs in heads_of.items():
        hpt_sum[r] += len(hs)
        hpt_cnt[r] += 1

    out: Dict[int, str] = {}
    for r in range(n_rel):
        tph = tph_sum[r] / tph_cnt[r] if tph_cnt[r] else 1.0
        hpt = hpt_sum[r] / hpt_cnt[r] if hpt_cnt[r] else 1.0
        many_tails = tph >= threshold
        many_heads = hpt >= threshold
        if not many_tails and not many_heads:
            out[r] = "1-1"
        elif many_tails and not many_heads:
            out[r] = "1-N"
        elif many_heads and not many_tails:
            out[r] = "N-1"
        else:
            out[r] = "N-N"
    return out


def multi_relation_pairs(triples: Iterable[np.ndarray]) -> Set[Tuple[int, int]]:
    """(h, t) pairs linked by two or more distinct relations."""
    rels: Dict[Tuple[int, int], Set[int]] = defaultdict(set)
    for block in triples:
        for h, r, t in np.asarray(block, dtype=np.int64).reshape(-1, 3).tolist():
            rels[(h, t)].add(r)
    return {pair for pair, rs in rels.items() if len(rs) >= 2}


# ---------- Ranking ----------

def filtered_rank(scores: np.ndarray, true_idx: int, filtered: Iterable[int] = ()) -> int:
    """1 + number of unfiltered candidates (ground truth aside) scoring >= the truth."""
    s = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(s), dtype=bool)
    drop = [i for i in filtered if i != true_idx]
    if drop:
        keep[np.asarray(drop, dtype=np.int64)] = False
    keep[true_idx] = False
    target = s[true_idx]
    if np.isnan(target):
        return 1 + int(keep.sum())
    return 1 + int(np.count_nonzero(keep & (s >= target)))


def rank_relation_query(h: int, t: int, true_r: int, scores: np.ndarray, filter_index: FilterIndex) -> int:
    """Rank of `true_r` among all relations; other true relations of (h, t) are removed."""
    return filtered_rank(scores, true_r, filter_index.relations(h, t))


def entity_candidates(
    truth: int,
    num_entities: int,
    candidate_cap: int,
    known: Set[int],
    rng: np.random.Generator,
) -> Tuple[np.ndarray, bool]:
    """
    All entities when they fit under the cap; otherwise the truth plus
    cap-1 entities drawn uniformly from those not known to be true.
    """
    if num_entities <= candidate_cap:
        return np.arange(num_entities, dtype=np.int64), False
    pool = np.setdiff1d(np.arange(num_entities, dtype=np.int64), np.fromiter(known | {truth}, dtype=np.int64))
    k = min(candidate_cap - 1, len(pool))
    picked = np.sort(rng.choice(pool, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    return np.concatenate([[truth], picked]).astype(np.int64), True


def rank_entity_query(
    h: int,
    r: int,
    t: int,
    direction: str,
    candidates: np.ndarray,
    scores: np.ndarray,
    filter_index: FilterIndex,
) -> int:
    """Rank of the true head/tail among `candidates`; other known answers are removed."""
    if direction not in ("head", "tail"):
        raise ValueError(f"direction must be 'head' or 'tail', got {direction}")
    truth = t if direction == "tail" else h
    cand = np.asarray(candidates, dtype=np.int64)
    where = np.flatnonzero(cand == truth)
    if not len(where):
        raise ValueError(f"ground truth {truth} is not among the candidates")
    known = filter_index.answers(h, r, t, direction)
    filtered = np.flatnonzero(np.isin(cand, np.fromiter(known, dtype=np.int64, count=len(known))))
    return filtered_rank(scores, int(where[0]), filtered.tolist())


# ---------- Fan-out ----------

def fan_out(fn: Callable[[T], R], chunks: Sequence[T], workers: int) -> List[R]:
    """Run `fn` over chunks on up to `workers` threads; results keep chunk order."""
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]

    async def _run() -> List[R]:
        gate = asyncio.Semaphore(workers)

        async def one(c: T) -> R:
            async with gate:
                return await asyncio.to_thread(fn, c)

        return await asyncio.gather(*(one(c) for c in chunks))

    return asyncio.run(_run())


def _chunks(n: int, size: int) -> List[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, max(1, size))]


def eval_graph(dataset: Dataset, split: str) -> KnowledgeGraph:
    if dataset.mode == "inductive" and split == "test":
        return build_graph(dataset.test_graph, dataset.eval_num_entities(), dataset.num_relations)
    return build_graph(dataset.train, dataset.num_entities, dataset.num_relations)


def split_queries(dataset: Dataset, split: str, limit: int) -> np.ndarray:
    q = dataset.split(split)
    return q[:limit] if limit else q


# ---------- Relation task ----------

def evaluate_relations(
    model: FlowModulatedScorer,
    dataset: Dataset,
    split: str = "test",
    seed: int = 0,
    workers: int = 1,
    batch_size: int = 128,
    limit: int = 0,
) -> RankingReport:
    queries = split_queries(dataset, split, limit)
    graph = eval_graph(dataset, split)
    filters = FilterIndex.for_split(dataset, split)
    exclusions = query_exclusions(graph, queries)
    ctx = model.config.context

    def run(idx: np.ndarray) -> List[int]:
        batch = build_contexts(
            graph,
            ((int(h), int(t)) for h, _, t in queries[idx]),
            (exclusions[i] for i in idx),
            ctx.hops,
            ctx.neighbor_samples,
            seed,
        )
        scores = model.relation_scores(batch, seed=seed)
        return [
            rank_relation_query(int(h), int(t), int(r), row, filters)
            for (h, r, t), row in zip(queries[idx].tolist(), scores)
        ]

    ranks = [x for part in fan_out(run, _chunks(len(queries), batch_size), workers) for x in part]

    categories = categorize_relations(dataset.train, dataset.num_relations)
    multi = multi_relation_pairs(filters.sources)
    groups: Dict[str, List[int]] = {name: [] for name in CATEGORIES + (MULTI_RELATION,)}
    for i, (h, r, t) in enumerate(queries.tolist()):
        groups[categories[r]].append(i)
        if (h, t) in multi:
            groups[MULTI_RELATION].append(i)

    report = _grouped_report(ranks, groups)
    log("info", "eval_done", task="relation", split=split, queries=report.num_queries, mrr=report.mrr)
    return report


# ---------- Entity task ----------

def evaluate_entities(
    model: FlowModulatedScorer,
    dataset: Dataset,
    split: str = "test",
    seed: int = 0,
    workers: int = 1,
    candidate_cap: int = 10000,
    limit: int = 0,
    pairs_per_batch: int = 4096,
) -> RankingReport:
    """Head and tail query per triple, each ranked over its candidate entities."""
    triples = split_queries(dataset, split, limit)
    graph = eval_graph(dataset, split)
    filters = FilterIndex.for_split(dataset, split)
    exclusions = query_exclusions(graph, triples)
    num_entities = graph.num_entities
    ctx = model.config.context
    directions = ("tail", "head")
    sampled = num_entities > candidate_cap

    queries = [(i, d) for i in range(len(triples)) for d in directions]

    def run(qidx: np.ndarray) -> List[int]:
        pairs: List[Tuple[int, int]] = []
        excl: List[Iterable[int]] = []
        rels: List[int] = []
        spans: List[Tuple[np.ndarray, int, int]] = []
        for q in qidx.tolist():
            i, direction = queries[q]
            h, r, t = (int(x) for x in triples[i])
            truth = t if direction == "tail" else h
            known = filters.answers(h, r, t, direction)
            cand, _ = entity_candidates(truth, num_entities, candidate_cap, known, substream(seed, i, q % 2))
            start = len(pairs)
            pairs.extend((h, int(c)) if direction == "tail" else (int(c), t) for c in cand)
            excl.extend([exclusions[i]] * len(cand))
            rels.extend([r] * len(cand))
            spans.append((cand, start, len(pairs)))
        batch = build_contexts(graph, pairs, excl, ctx.hops, ctx.neighbor_samples, seed)
        scores = model.entity_scores(batch, np.asarray(rels, dtype=np.int64), seed=seed)
        out = []
        for q, (cand, lo, hi) in zip(qidx.tolist(), spans):
            i, direction = queries[q]
            h, r, t = (int(x) for x in triples[i])
            out.append(rank_entity_query(h, r, t, direction, cand, scores[lo:hi], filters))
        return out

    per_chunk = max(1, pairs_per_batch // min(num_entities, candidate_cap))
    ranks = [x for part in fan_out(run, _chunks(len(queries), per_chunk), workers) for x in part]

    categories = categorize_relations(dataset.train, dataset.num_relations)
    groups: Dict[str, List[int]] = defaultdict(list)
    for q, (i, direction) in enumerate(queries):
        groups[direction].append(q)
        groups[f"{direction}/{categories[int(triples[i][1])]}"].append(q)

    report = _grouped_report(ranks, dict(groups))
    report.sampled_candidates = sampled
    log(
        "info",
        "eval_done",
        task="entity",
        split=split,
        queries=report.num_queries,
        mrr=report.mrr,
        sampled_candidates=sampled,
    )
    return report


def evaluate(model: FlowModulatedScorer, dataset: Dataset, split: str = "test", **kwargs: Any) -> RankingReport:
    if model.task == "relation":
        kwargs.pop("candidate_cap", None)
        return evaluate_relations(model, dataset, split, **kwargs)
    kwargs.pop("batch_size", None)
    return evaluate_entities(model, dataset, split, **kwargs)
