import numpy as np
import pytest

from flowscore import train as train_module
from flowscore.autodiff import Tensor
from flowscore.errors import NumericError
from flowscore.evaluate import evaluate
from flowscore.params import checkpoint_bytes
from flowscore.reports import read_jsonl
from flowscore.train import EPOCH_LOG, corrupt, train


def test_corrupt_never_returns_truth():
    rng = np.random.default_rng(0)
    for truth in range(10):
        draw = corrupt(truth, 10, 9, rng)
        assert sorted(draw.tolist()) == [e for e in range(10) if e != truth]


def test_toy_graph_is_learned(toy_dataset, small_config):
    small_config.epochs = 60
    small_config.lr = 0.02
    result = train(toy_dataset, small_config)
    assert result.best_valid_mrr >= 0.9
    report = evaluate(result.model, toy_dataset, "test", seed=small_config.seed, batch_size=small_config.batch_size)
    assert report.mrr == pytest.approx(result.best_valid_mrr)


def test_same_seed_same_run(toy_dataset, small_config):
    a = train(toy_dataset, small_config)
    b = train(toy_dataset, small_config)
    assert a.losses == b.losses
    assert checkpoint_bytes(a.model.store.params) == checkpoint_bytes(b.model.store.params)


def test_different_seed_changes_first_loss(toy_dataset, small_config):
    a = train(toy_dataset, small_config).losses[0]
    small_config.seed = 1
    assert train(toy_dataset, small_config).losses[0] != a


def test_loss_decreases(toy_dataset, small_config):
    small_config.epochs = 10
    losses = np.asarray(train(toy_dataset, small_config).losses)
    assert losses[4] < losses[0]
    window = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(window) < 0)


def test_no_flow_run(toy_dataset, small_config):
    small_config.flow.enabled = False
    small_config.lambda_cfm = 0.0
    result = train(toy_dataset, small_config)
    assert not any(n.startswith("flow.") for n in result.model.store.names())
    assert all(np.isfinite(result.losses))


def test_minibatch_ot_coupling_runs(toy_dataset, small_config):
    small_config.flow.coupling = "minibatch_ot"
    assert all(np.isfinite(train(toy_dataset, small_config).losses))


def test_non_finite_loss_aborts(toy_dataset, small_config, monkeypatch):
    monkeypatch.setattr(train_module, "relation_batch_loss", lambda *a, **kw: Tensor(np.array(np.nan)))
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(toy_dataset, small_config)


def test_epoch_log(toy_dataset, small_config, tmp_path):
    (tmp_path / EPOCH_LOG).write_text('{"stale": true}\n', encoding="utf-8")
    result = train(toy_dataset, small_config, out_dir=str(tmp_path))
    records = read_jsonl(tmp_path / EPOCH_LOG)
    assert [r["epoch"] for r in records] == [0, 1]
    assert all(set(r) == {"epoch", "train_loss", "valid_mrr", "seconds"} for r in records)
    assert records[0]["train_loss"] == pytest.approx(result.losses[0])
    assert 0 < records[1]["valid_mrr"] <= 1


def test_best_epoch_is_restored(toy_dataset, small_config):
    small_config.epochs = 4
    result = train(toy_dataset, small_config)
    best = max(h["valid_mrr"] for h in result.history)
    assert result.best_valid_mrr == best
    assert result.history[result.best_epoch]["valid_mrr"] == best
    report = evaluate(result.model, toy_dataset, "valid", seed=small_config.seed, batch_size=small_config.batch_size)
    assert report.mrr == pytest.approx(best)


def test_entity_task(toy_dataset, small_config):
    small_config.task = "entity"
    small_config.epochs = 1
    result = train(toy_dataset, small_config)
    assert np.isfinite(result.losses[0])
    assert result.model.store["score.W2"].shape == (16, 1)

    full = evaluate(result.model, toy_dataset, "test", seed=0)
    assert full.num_queries == 2 * len(toy_dataset.test)
    assert not full.sampled_candidates
    assert {"tail", "head"} <= set(full.per_category)

    capped = evaluate(result.model, toy_dataset, "test", seed=0, candidate_cap=5)
    assert capped.sampled_candidates
    assert capped.ranks.max() <= 5
