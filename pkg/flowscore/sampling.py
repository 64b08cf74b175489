# flowscore/sampling.py

from dataclasses import dataclass
from typing import AbstractSet, Dict, FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np

from .kg import KnowledgeGraph


def substream(*key: int) -> np.random.Generator:
    """Counter-based generator for one (seed, ...) key; keys never share state."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


@dataclass(frozen=True)
class ContextSubgraph:
    query: Tuple[int, int]
    edge_ids: np.ndarray
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    edge_neighbors: List[np.ndarray]
    incident_of_head: np.ndarray
    incident_of_tail: np.ndarray
    excluded: FrozenSet[int]

    def __len__(self) -> int:
        return len(self.edge_ids)

    @property
    def sampled_edges(self) -> List[Tuple[int, int, Tuple[int, int]]]:
        return [
            (int(e), int(r), (int(h), int(t)))
            for e, r, h, t in zip(self.edge_ids, self.rels, self.heads, self.tails)
        ]


def assemble_subgraph(
    graph: KnowledgeGraph,
    query: Tuple[int, int],
    edge_ids: Sequence[int],
    excluded: AbstractSet[int] = frozenset(),
) -> ContextSubgraph:
    """Neighbor lists and query incidence over an explicit list of sampled edges."""
    ids = np.asarray(list(edge_ids), dtype=np.int64)
    excluded = frozenset(int(e) for e in excluded)
    if excluded and any(int(e) in excluded for e in ids):
        raise ValueError("excluded edge present in sampled set")

    trip = graph.edges[ids] if len(ids) else np.zeros((0, 3), dtype=np.int64)
    heads, rels, tails = trip[:, 0], trip[:, 1], trip[:, 2]

    by_node: Dict[int, List[int]] = {}
    for pos, (h, t) in enumerate(zip(heads.tolist(), tails.tolist())):
        by_node.setdefault(h, []).append(pos)
        if t != h:
            by_node.setdefault(t, []).append(pos)

    neighbors: List[np.ndarray] = []
    for pos, (h, t) in enumerate(zip(heads.tolist(), tails.tolist())):
        shared = set(by_node[h])
        shared.update(by_node[t])
        shared.discard(pos)
        neighbors.append(np.asarray(sorted(shared), dtype=np.int64))

    h_q, t_q = int(query[0]), int(query[1])
    return ContextSubgraph(
        query=(h_q, t_q),
        edge_ids=ids,
        heads=heads,
        rels=rels,
        tails=tails,
        edge_neighbors=neighbors,
        incident_of_head=np.asarray(by_node.get(h_q, []), dtype=np.int64),
        incident_of_tail=np.asarray(by_node.get(t_q, []), dtype=np.int64),
        excluded=excluded,
    )


def sample_context(
    graph: KnowledgeGraph,
    head: int,
    tail: int,
    hops: int,
    neighbor_samples: int,
    excluded: Iterable[int] = (),
    rng_seed: int = 0,
) -> ContextSubgraph:
    """
    Breadth-first edge sampling from the frontier {head, tail}.

    Each frontier node draws min(neighbor_samples, available) of its
    non-excluded incident edges, uniformly without replacement, from its own
    (rng_seed, node, hop) stream, so one node's draw never depends on which
    other nodes are in the frontier.
    """
    if hops < 1:
        raise ValueError(f"hops must be >= 1, got {hops}")
    if neighbor_samples < 1:
        raise ValueError(f"neighbor_samples must be >= 1, got {neighbor_samples}")

    excluded = frozenset(int(e) for e in excluded)
    excl_arr = np.fromiter(excluded, dtype=np.int64, count=len(excluded))

    head, tail = int(head), int(tail)
    visited = {head, tail}
    frontier = [head] if head == tail else [head, tail]
    picked: List[int] = []
    in_sample = set()

    for hop in range(hops):
        nxt: List[int] = []
        for node in frontier:
            sl = graph.incident_slice(node)
            cand = graph.inc_edge[sl]
            other = graph.inc_other[sl]
            if len(excl_arr):
                keep = ~np.isin(cand, excl_arr)
                cand, other = cand[keep], other[keep]
            # self-loops are listed twice per node
            cand, first = np.unique(cand, return_index=True)
            other = other[first]
            k = min(neighbor_samples, len(cand))
            if k == 0:
                continue
            if k < len(cand):
                choice = np.sort(substream(rng_seed, node, hop).choice(len(cand), size=k, replace=False))
                cand, other = cand[choice], other[choice]
            for e, o in zip(cand.tolist(), other.tolist()):
                if e not in in_sample:
                    in_sample.add(e)
                    picked.append(e)
                if o not in visited:
                    visited.add(o)
                    nxt.append(o)
        frontier = nxt
        if not frontier:
            break

    return assemble_subgraph(graph, (head, tail), picked, excluded)


@dataclass(frozen=True)
class ContextBatch:
    """
    Several subgraphs flattened into one edge set. Positions are global;
    (centers[p], neighbors[p]) enumerates every neighbor pair, grouped by
    center and ascending in neighbor position.
    """

    rels: np.ndarray
    centers: np.ndarray
    neighbors: np.ndarray
    edge_query: np.ndarray
    head_pos: np.ndarray
    head_seg: np.ndarray
    tail_pos: np.ndarray
    tail_seg: np.ndarray
    num_queries: int

    @property
    def num_edges(self) -> int:
        return len(self.rels)


def batch_contexts(subgraphs: Sequence[ContextSubgraph]) -> ContextBatch:
    rels, centers, nbrs, edge_query = [], [], [], []
    head_pos, head_seg, tail_pos, tail_seg = [], [], [], []
    offset = 0
    for q, sg in enumerate(subgraphs):
        n = len(sg)
        rels.append(sg.rels)
        edge_query.append(np.full(n, q, dtype=np.int64))
        lens = np.fromiter((len(x) for x in sg.edge_neighbors), dtype=np.int64, count=n)
        centers.append(np.repeat(np.arange(n, dtype=np.int64), lens) + offset)
        if n:
            nbrs.append(np.concatenate(sg.edge_neighbors).astype(np.int64) + offset)
        head_pos.append(sg.incident_of_head + offset)
        head_seg.append(np.full(len(sg.incident_of_head), q, dtype=np.int64))
        tail_pos.append(sg.incident_of_tail + offset)
        tail_seg.append(np.full(len(sg.incident_of_tail), q, dtype=np.int64))
        offset += n

    def cat(parts: List[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)

    return ContextBatch(
        rels=cat(rels),
        centers=cat(centers),
        neighbors=cat(nbrs),
        edge_query=cat(edge_query),
        head_pos=cat(head_pos),
        head_seg=cat(head_seg),
        tail_pos=cat(tail_pos),
        tail_seg=cat(tail_seg),
        num_queries=len(subgraphs),
    )


def query_exclusions(graph: KnowledgeGraph, triples: np.ndarray) -> List[FrozenSet[int]]:
    """Per query triple, the edge itself plus its co-located duplicates."""
    return [frozenset(graph.matching_edges(int(h), int(r), int(t))) for h, r, t in triples]
