import numpy as np
import pytest

from flowscore import autodiff as ad
from flowscore.autodiff import Tape, Tensor
from flowscore.config import ContextConfig
from flowscore.context import (
    G_MAP,
    REL_EMB,
    LayerParams,
    attention_aggregate,
    context_relation_presence,
    energy_score,
    entity_message,
    init_context_params,
    mean_aggregate,
    pair_scores,
    propagate,
    select_topk,
    select_topk_grouped,
)
from flowscore.kg import build_graph
from flowscore.params import ParameterStore
from flowscore.sampling import assemble_subgraph, batch_contexts, sample_context


def full_sort_topk(neighbors, scores, k):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], neighbors[i]))
    return ranked[:k]


class TestSelectTopk:
    def test_ties_go_to_lower_position(self):
        assert select_topk(0, [7, 3, 5], [1.0, 1.0, 1.0], 2).tolist() == [1, 2]

    def test_fewer_than_k_keeps_all(self):
        assert sorted(select_topk(0, [4, 2], [0.1, 0.9], 3).tolist()) == [0, 1]

    def test_matches_full_sort_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(0, 12))
            nbr = rng.permutation(40)[:n]
            scores = rng.integers(0, 4, size=n).astype(float)
            k = int(rng.integers(1, 5))
            assert select_topk(0, nbr, scores, k).tolist() == full_sort_topk(nbr.tolist(), scores.tolist(), k)

    def test_grouped_equals_per_center(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            centers, neighbors, scores = [], [], []
            for c in range(int(rng.integers(1, 6))):
                nbr = np.sort(rng.permutation(20)[: int(rng.integers(0, 7))])
                centers += [c] * len(nbr)
                neighbors += nbr.tolist()
                scores += rng.integers(0, 3, size=len(nbr)).tolist()
            centers, neighbors = np.array(centers, dtype=np.int64), np.array(neighbors, dtype=np.int64)
            scores = np.array(scores, dtype=float)
            k = int(rng.integers(1, 4))
            mask = select_topk_grouped(centers, neighbors, scores, k)
            for c in np.unique(centers):
                rows = np.flatnonzero(centers == c)
                picked = rows[select_topk(int(c), neighbors[rows], scores[rows], k)]
                assert sorted(picked.tolist()) == np.flatnonzero(mask & (centers == c)).tolist()


class TestScores:
    def test_energy_of_identical_states_is_one(self):
        s = Tensor(np.ones((1, 4)))
        g = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
        assert float(energy_score(s, s, g, 0.95).data) == pytest.approx(1.0)

    def test_energy_in_unit_interval_and_decreasing_with_distance(self):
        g = Tensor(np.eye(3))
        a = Tensor(np.zeros((1, 3)))
        near = float(energy_score(a, Tensor(np.full((1, 3), 0.1)), g, 1.0).data)
        far = float(energy_score(a, Tensor(np.full((1, 3), 1.0)), g, 1.0).data)
        assert 0 < far < near < 1
        assert far == pytest.approx(np.exp(-3.0))

    def test_pair_scores_energy_matches_scalar_form(self):
        rng = np.random.default_rng(4)
        states = rng.normal(size=(5, 4))
        g = rng.normal(size=(4, 4))
        centers = np.array([0, 0, 1, 3])
        neighbors = np.array([1, 2, 4, 0])
        cfg = ContextConfig(dim=4, heads=2, temperature=0.5)
        got = pair_scores(states, centers, neighbors, g, cfg, 0, 0)
        for i, (c, n) in enumerate(zip(centers, neighbors)):
            want = energy_score(Tensor(states[c:c + 1]), Tensor(states[n:n + 1]), Tensor(g), 0.5).data
            assert got[i] == pytest.approx(float(want))

    def test_pair_scores_dot_mode_ignores_the_map(self):
        rng = np.random.default_rng(5)
        states = rng.normal(size=(5, 4))
        centers = np.array([0, 0, 2, 4])
        neighbors = np.array([1, 3, 0, 2])
        cfg = ContextConfig(dim=4, heads=2, selection_mode="dot_topk")
        got = pair_scores(states, centers, neighbors, 7.0 * np.eye(4), cfg, 0, 0)
        want = [float(states[c] @ states[n]) for c, n in zip(centers, neighbors)]
        np.testing.assert_allclose(got, want, rtol=1e-12)
        np.testing.assert_array_equal(got, pair_scores(states, centers, neighbors, np.zeros((4, 4)), cfg, 0, 0))

    def test_random_mode_is_seeded(self):
        cfg = ContextConfig(dim=4, heads=2, selection_mode="random_k")
        states = np.zeros((3, 4))
        c, n = np.array([0, 1]), np.array([1, 0])
        a = pair_scores(states, c, n, np.eye(4), cfg, 5, 0)
        np.testing.assert_array_equal(a, pair_scores(states, c, n, np.eye(4), cfg, 5, 0))
        assert not np.array_equal(a, pair_scores(states, c, n, np.eye(4), cfg, 6, 0))


class TestAggregation:
    def test_mean_of_empty_is_zero(self):
        np.testing.assert_array_equal(mean_aggregate(Tensor(np.zeros((0, 3)))).data, np.zeros((1, 3)))

    def test_mean_matches_grouped_segment_mean(self):
        x = np.random.default_rng(3).normal(size=(5, 3))
        seg = np.array([0, 0, 2, 2, 2])
        grouped = ad.segment_mean(Tensor(x), seg, 3).data
        for c in range(3):
            np.testing.assert_allclose(grouped[c], mean_aggregate(Tensor(x[seg == c])).data[0], rtol=1e-12)

    def test_attention_hand_case(self):
        d, heads = 4, 2
        eye = Tensor(np.eye(d))
        zero = Tensor(np.zeros(d))
        params = LayerParams(W_o=eye, b_o=zero, W_s=eye, b_s=zero, W_n=eye, b_n=zero)
        self_state = np.array([[1.0, 2.0, 0.5, 0.5]])
        nbhd = np.array([[1.0, 0.0, -1.0, 1.0]])
        out = attention_aggregate(Tensor(self_state), Tensor(nbhd), params, heads).data
        g0 = 1 / (1 + np.exp(-(1.0 * 1.0 + 2.0 * 0.0) / np.sqrt(2)))
        g1 = 1 / (1 + np.exp(-(0.5 * -1.0 + 0.5 * 1.0) / np.sqrt(2)))
        want = np.maximum(self_state + np.array([[g0, g0, g1, g1]]) * nbhd, 0)
        np.testing.assert_allclose(out, want, rtol=1e-12)

    def test_attention_gradients(self, gradcheck):
        rng = np.random.default_rng(6)
        d = 4
        store = ParameterStore(np.float64)
        for name in ("W_s", "W_n", "W_o"):
            store.add(name, 0.5 * rng.normal(size=(d, d)))
        for name in ("b_s", "b_n"):
            store.add(name, 0.1 * rng.normal(size=d))
        store.add("b_o", np.full(d, 3.0))
        store.add("self", rng.normal(size=(3, d)))
        store.add("nbhd", rng.normal(size=(3, d)))
        w = rng.normal(size=(3, d))

        def loss(tape, s):
            p = LayerParams(**{n: tape.param(s, n) for n in ("W_s", "b_s", "W_n", "b_n", "W_o", "b_o")})
            out = attention_aggregate(tape.param(s, "self"), tape.param(s, "nbhd"), p, 2)
            return ad.sum_all(ad.mul(out, w))

        gradcheck(store, loss)

    def test_heads_must_divide_dim(self):
        p = LayerParams(W_o=Tensor(np.eye(3)), b_o=Tensor(np.zeros(3)), W_s=Tensor(np.eye(3)),
                        b_s=Tensor(np.zeros(3)), W_n=Tensor(np.eye(3)), b_n=Tensor(np.zeros(3)))
        with pytest.raises(ValueError):
            attention_aggregate(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), p, 2)


def build_store(num_relations: int, cfg: ContextConfig, dtype=np.float64) -> ParameterStore:
    store = ParameterStore(dtype)
    init_context_params(store, num_relations, cfg, np.random.default_rng(0))
    return store


class TestPropagate:
    @pytest.mark.parametrize("aggregator", ["attention", "mean", "concat_mlp"])
    def test_shapes(self, random_graph, aggregator):
        cfg = ContextConfig(dim=8, heads=2, hops=2, aggregator=aggregator)
        store = build_store(3, cfg)
        sg = sample_context(random_graph, 0, 1, hops=2, neighbor_samples=3, rng_seed=1)
        states = propagate(sg, Tape(), store, cfg)
        assert states.shape == (len(sg), 8)

    def test_batched_equals_one_at_a_time(self, random_graph):
        cfg = ContextConfig(dim=8, heads=2, hops=2)
        store = build_store(3, cfg)
        subgraphs = [sample_context(random_graph, h, t, 2, 3, rng_seed=2) for h, t in [(0, 1), (2, 5), (4, 4)]]
        batch = batch_contexts(subgraphs)
        states = propagate(batch, ad.no_grad(), store, cfg)
        m_h = entity_message(batch, states, "head").data
        for q, sg in enumerate(subgraphs):
            single = propagate(sg, ad.no_grad(), store, cfg)
            np.testing.assert_allclose(entity_message(sg, single, "head").data[0], m_h[q], rtol=1e-10, atol=1e-12)

    def test_two_edge_chain_unrolled_by_hand(self):
        g = build_graph(np.array([[0, 0, 1], [1, 1, 2]]), 3, 2)
        cfg = ContextConfig(dim=4, heads=2, hops=2, top_k=1)
        store = build_store(2, cfg)
        rng = np.random.default_rng(9)
        for name in store.names():
            if "layer" in name:
                store.params[name][...] = 0.5 * rng.normal(size=store.params[name].shape)
        sg = assemble_subgraph(g, (0, 2), [0, 1])
        got = propagate(sg, ad.no_grad(), store, cfg).data

        P = store.params
        s = P[REL_EMB][sg.rels]
        for layer in range(2):
            pre = f"context.layer{layer}."
            nbhd = s[::-1]  # each edge's only neighbor is the other one
            a = s @ P[pre + "W_s"] + P[pre + "b_s"]
            c = nbhd @ P[pre + "W_n"] + P[pre + "b_n"]
            gate = np.empty_like(a)
            for head in range(2):
                cols = slice(2 * head, 2 * head + 2)
                logit = (a[:, cols] * c[:, cols]).sum(axis=1, keepdims=True) / np.sqrt(2)
                gate[:, cols] = 1 / (1 + np.exp(-logit))
            s = np.maximum((a + gate * c) @ P[pre + "W_o"] + P[pre + "b_o"], 0)
        np.testing.assert_allclose(got, s, rtol=1e-12, atol=1e-12)

    def test_edge_order_does_not_change_states(self, random_graph):
        cfg = ContextConfig(dim=8, heads=2, hops=2, top_k=64)
        store = build_store(3, cfg)
        ids = np.arange(12)
        perm = np.random.default_rng(3).permutation(12)
        sg = assemble_subgraph(random_graph, (0, 1), ids)
        shuffled = assemble_subgraph(random_graph, (0, 1), ids[perm])
        a = propagate(sg, ad.no_grad(), store, cfg)
        b = propagate(shuffled, ad.no_grad(), store, cfg)
        np.testing.assert_allclose(b.data, a.data[perm], rtol=1e-10, atol=1e-12)
        for endpoint in ("head", "tail"):
            np.testing.assert_allclose(
                entity_message(shuffled, b, endpoint).data,
                entity_message(sg, a, endpoint).data,
                rtol=1e-10,
                atol=1e-12,
            )

    def test_propagate_gradients(self, gradcheck):
        g = build_graph(np.array([[0, 0, 1], [1, 1, 2], [2, 0, 0], [1, 1, 3]]), 4, 2)
        cfg = ContextConfig(dim=4, heads=2, hops=2, top_k=2)
        store = build_store(2, cfg)
        for name in store.names():
            if name.endswith("b_o"):
                store.params[name][...] = 2.0
        sg = assemble_subgraph(g, (0, 2), [0, 1, 2, 3])
        w = np.random.default_rng(4).normal(size=(4, 4))
        gradcheck(store, lambda t, s: ad.sum_all(ad.mul(propagate(sg, t, s, cfg), w)))

    def test_zero_message_without_incident_edges(self):
        g = build_graph(np.array([[0, 0, 1], [1, 1, 2]]), 4, 2)
        cfg = ContextConfig(dim=4, heads=2, hops=1)
        store = build_store(2, cfg)
        sg = assemble_subgraph(g, (0, 3), [0, 1])
        states = propagate(sg, ad.no_grad(), store, cfg)
        np.testing.assert_array_equal(entity_message(sg, states, "tail").data, np.zeros((1, 4)))

    def test_initial_states_are_relation_embeddings(self):
        g = build_graph(np.array([[0, 1, 1]]), 2, 2)
        cfg = ContextConfig(dim=4, heads=2, hops=1, aggregator="mean")
        store = build_store(2, cfg)
        store.params["context.layer0.W_o"][...] = np.eye(4)
        store.params["context.layer0.b_o"][...] = 0
        sg = assemble_subgraph(g, (0, 1), [0])
        states = propagate(sg, ad.no_grad(), store, cfg).data
        # a lone edge has an empty neighborhood: relu((s + 0) / 2)
        np.testing.assert_allclose(states[0], np.maximum(store.params[REL_EMB][1] / 2, 0))

    def test_g_map_gets_no_gradient_through_hard_selection(self, random_graph):
        cfg = ContextConfig(dim=8, heads=2, hops=2)
        store = build_store(3, cfg)
        sg = sample_context(random_graph, 0, 1, hops=2, neighbor_samples=3, rng_seed=1)
        tape = Tape()
        ad.backward(tape, ad.sum_all(propagate(sg, tape, store, cfg)))
        np.testing.assert_array_equal(store.grads[G_MAP], 0.0)
        assert np.abs(store.grads[REL_EMB]).sum() > 0


def test_context_relation_presence(random_graph):
    sgs = [sample_context(random_graph, 0, 1, 1, 8), sample_context(random_graph, 2, 3, 1, 8)]
    presence = context_relation_presence(batch_contexts(sgs), 3)
    for q, sg in enumerate(sgs):
        assert set(np.flatnonzero(presence[q]).tolist()) == set(sg.rels.tolist())
