# flowscore/context.py

"""
Edge-centric message passing. Edge states start as relation embeddings;
each layer scores every (center, neighbor) pair, keeps the top-K neighbors
per center, averages them and updates the center through the aggregator.
Entities carry no features: an entity's message is the mean final state of
its incident sampled edges.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ContextConfig
from .params import ParameterStore, embedding_normal, xavier_uniform
from .sampling import ContextBatch, ContextSubgraph, batch_contexts, substream

REL_EMB = "rel_emb"
G_MAP = "context.g_map.weight"


def init_context_params(
    store: ParameterStore, num_relations: int, config: ContextConfig, rng: np.random.Generator
) -> None:
    d = config.dim
    store.add(REL_EMB, embedding_normal(rng, num_relations, d))
    store.add(G_MAP, xavier_uniform(rng, d, d))
    for i in range(config.hops):
        p = f"context.layer{i}."
        if config.aggregator == "attention":
            store.add(p + "W_s", xavier_uniform(rng, d, d))
            store.add(p + "b_s", np.zeros(d))
            store.add(p + "W_n", xavier_uniform(rng, d, d))
            store.add(p + "b_n", np.zeros(d))
            store.add(p + "W_o", xavier_uniform(rng, d, d))
        elif config.aggregator == "mean":
            store.add(p + "W_o", xavier_uniform(rng, d, d))
        else:
            store.add(p + "W_c", xavier_uniform(rng, 2 * d, d))
        store.add(p + "b_o", np.zeros(d))


@dataclass
class LayerParams:
    W_o: Optional[Tensor] = None
    b_o: Optional[Tensor] = None
    W_s: Optional[Tensor] = None
    b_s: Optional[Tensor] = None
    W_n: Optional[Tensor] = None
    b_n: Optional[Tensor] = None
    W_c: Optional[Tensor] = None


def layer_params(tape: Tape, store: ParameterStore, layer: int) -> LayerParams:
    prefix = f"context.layer{layer}."
    kwargs = {
        name[len(prefix):]: tape.param(store, name)
        for name in store.names()
        if name.startswith(prefix)
    }
    return LayerParams(**kwargs)


# ---------- Scoring and selection ----------

def energy_score(s_c: Tensor, s_n: Tensor, g_map: Tensor, temperature: float) -> Tensor:
    """
    exp(-||g(s_c) - g(s_n)||^2 / tau) for two (1, d) states; differentiable through g.
    Scalar reference form: `propagate` scores every pair at once through
    `pair_scores`, which computes the same value without a tape.
    """
    diff = ad.sub(ad.matmul(s_c, g_map), ad.matmul(s_n, g_map))
    return ad.exp(ad.scale(ad.sum_all(ad.mul(diff, diff)), -1.0 / temperature))


def pair_scores(
    states: np.ndarray,
    centers: np.ndarray,
    neighbors: np.ndarray,
    g_map: np.ndarray,
    config: ContextConfig,
    rng_seed: int,
    layer: int,
) -> np.ndarray:
    """Selection scores for every (center, neighbor) pair; values only, no tape."""
    if config.selection_mode == "random_k":
        return substream(rng_seed, layer, 0x5E1EC7).random(len(centers))
    if config.selection_mode == "dot_topk":
        return np.einsum("ij,ij->i", states[centers], states[neighbors])
    proj = states @ g_map
    diff = proj[centers] - proj[neighbors]
    return np.exp(-np.einsum("ij,ij->i", diff, diff) / config.temperature)


def select_topk(center_idx: int, neighbor_idxs: Sequence[int], scores: Sequence[float], k: int) -> np.ndarray:
    """
    Positions (into `neighbor_idxs`) of the k best-scoring neighbors, best
    first; equal scores go to the lower edge position.
    """
    nbr = np.asarray(neighbor_idxs, dtype=np.int64)
    sc = np.asarray(scores, dtype=np.float64)
    if len(nbr) != len(sc):
        raise ValueError("scores must align with neighbor_idxs")
    order = np.lexsort((nbr, -sc))
    return order[:k]


def select_topk_grouped(centers: np.ndarray, neighbors: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask over pairs: the top-k rule of `select_topk` applied per center."""
    n = len(centers)
    if n == 0:
        return np.zeros(0, dtype=bool)
    order = np.lexsort((neighbors, -np.asarray(scores, dtype=np.float64), centers))
    sorted_centers = centers[order]
    starts = np.flatnonzero(np.r_[True, sorted_centers[1:] != sorted_centers[:-1]])
    group_start = np.repeat(starts, np.diff(np.r_[starts, n]))
    rank = np.arange(n) - group_start
    mask = np.zeros(n, dtype=bool)
    mask[order[rank < k]] = True
    return mask


# ---------- Aggregation ----------

def mean_aggregate(states: Tensor) -> Tensor:
    """Mean of one neighborhood, zero when empty; `propagate` does all centers at once with `ad.segment_mean`."""
    return ad.mean_rows(states)


def _head_blocks(dim: int, heads: int, dtype: np.dtype) -> np.ndarray:
    """(dim, heads) indicator: column h selects the coordinates of head h."""
    d_h = dim // heads
    return np.kron(np.eye(heads, dtype=dtype), np.ones((d_h, 1), dtype=dtype))


def attention_aggregate(self_state: Tensor, nbhd: Tensor, params: LayerParams, heads: int) -> Tensor:
    """
    a = W_s·self + b_s, c = W_n·nbhd + b_n, split into heads;
    gate_h = sigmoid(<a_h, c_h> / sqrt(d_h));
    out = relu(W_o·concat_h(a_h + gate_h·c_h) + b_o).
    """
    dim = self_state.shape[1]
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    blocks = _head_blocks(dim, heads, self_state.dtype)
    a = ad.add(ad.matmul(self_state, params.W_s), params.b_s)
    c = ad.add(ad.matmul(nbhd, params.W_n), params.b_n)
    interaction = ad.scale(ad.matmul(ad.mul(a, c), blocks), 1.0 / math.sqrt(dim // heads))
    gate = ad.matmul(ad.sigmoid(interaction), blocks.T)
    mixed = ad.add(a, ad.mul(gate, c))
    return ad.relu(ad.add(ad.matmul(mixed, params.W_o), params.b_o))


def mean_update(self_state: Tensor, nbhd: Tensor, params: LayerParams) -> Tensor:
    mixed = ad.scale(ad.add(self_state, nbhd), 0.5)
    return ad.relu(ad.add(ad.matmul(mixed, params.W_o), params.b_o))


def concat_update(self_state: Tensor, nbhd: Tensor, params: LayerParams) -> Tensor:
    joined = ad.concat([self_state, nbhd], axis=1)
    return ad.relu(ad.add(ad.matmul(joined, params.W_c), params.b_o))


def _update(self_state: Tensor, nbhd: Tensor, params: LayerParams, config: ContextConfig) -> Tensor:
    if config.aggregator == "attention":
        return attention_aggregate(self_state, nbhd, params, config.heads)
    if config.aggregator == "mean":
        return mean_update(self_state, nbhd, params)
    return concat_update(self_state, nbhd, params)


# ---------- Propagation ----------

def propagate(
    batch: Union[ContextBatch, ContextSubgraph],
    tape: Tape,
    store: ParameterStore,
    config: ContextConfig,
    rng_seed: int = 0,
) -> Tensor:
    """
    Final edge states (num_edges, d). All edges of a layer update together
    from that layer's input states. Selection is a hard choice made on
    values; gradients flow through the selected states only.
    """
    if isinstance(batch, ContextSubgraph):
        batch = batch_contexts([batch])
    states = ad.gather_rows(tape.param(store, REL_EMB), batch.rels)
    g_map = store.params[G_MAP]
    n = batch.num_edges
    for layer in range(config.hops):
        params = layer_params(tape, store, layer)
        scores = pair_scores(states.data, batch.centers, batch.neighbors, g_map, config, rng_seed, layer)
        keep = select_topk_grouped(batch.centers, batch.neighbors, scores, config.top_k)
        picked = ad.gather_rows(states, batch.neighbors[keep])
        nbhd = ad.segment_mean(picked, batch.centers[keep], n)
        states = _update(states, nbhd, params, config)
    return states


def entity_message(batch: Union[ContextBatch, ContextSubgraph], final_states: Tensor, endpoint: str) -> Tensor:
    """Per query, the mean final state of edges incident to the head or tail; zero if none."""
    if isinstance(batch, ContextSubgraph):
        batch = batch_contexts([batch])
    if endpoint == "head":
        pos, seg = batch.head_pos, batch.head_seg
    elif endpoint == "tail":
        pos, seg = batch.tail_pos, batch.tail_seg
    else:
        raise ValueError(f"endpoint must be 'head' or 'tail', got {endpoint}")
    return ad.segment_mean(ad.gather_rows(final_states, pos), seg, batch.num_queries)


def context_relation_presence(batch: ContextBatch, num_relations: int) -> np.ndarray:
    """(num_queries, num_relations) 0/1 matrix of relation types present in each context."""
    out = np.zeros((batch.num_queries, num_relations), dtype=np.float64)
    out[batch.edge_query, batch.rels] = 1.0
    return out
