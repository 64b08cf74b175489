# flowscore/train.py

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import TrainConfig
from .errors import NumericError
from .evaluate import evaluate
from .kg import Dataset, KnowledgeGraph, build_graph
from .logger import log
from .model import FlowModulatedScorer, build_contexts, candidate_loss, total_loss
from .params import adam_step
from .reports import append_jsonl
from .sampling import epoch_seed, query_exclusions, substream

EPOCH_LOG = "epoch_log.jsonl"


@dataclass
class TrainResult:
    model: FlowModulatedScorer
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_mrr: float = float("-inf")

    @property
    def losses(self) -> List[float]:
        return [h["train_loss"] for h in self.history]


def relation_batch_loss(
    model: FlowModulatedScorer,
    graph: KnowledgeGraph,
    triples: np.ndarray,
    exclusions: Sequence[FrozenSet[int]],
    seed: int,
    rng: np.random.Generator,
    tape: Tape,
) -> Tensor:
    ctx = model.config.context
    batch = build_contexts(
        graph, ((int(h), int(t)) for h, _, t in triples), exclusions, ctx.hops, ctx.neighbor_samples, seed
    )
    out = model.forward_relation(batch, tape, seed, rng)
    pred = ad.cross_entropy_with_logits(out.logits, triples[:, 1])
    return total_loss(pred, out.cfm, model.config.lambda_cfm, model.l2_term(tape))


def corrupt(truth: int, num_entities: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct entities drawn uniformly from everything but `truth`."""
    draw = rng.choice(num_entities - 1, size=k, replace=False)
    return draw + (draw >= truth)


def entity_batch_loss(
    model: FlowModulatedScorer,
    graph: KnowledgeGraph,
    triples: np.ndarray,
    exclusions: Sequence[FrozenSet[int]],
    seed: int,
    rng: np.random.Generator,
    tape: Tape,
) -> Tensor:
    """A tail query and a head query per triple, truth in slot 0 of each candidate row."""
    ctx = model.config.context
    n_ent = graph.num_entities
    k = min(model.config.negatives_per_query, n_ent - 1)
    neg_rng = substream(seed, 0xE6)

    pairs, excl, rels, cand_rows, truths = [], [], [], [], []
    for (h, r, t), ex in zip(triples.tolist(), exclusions):
        for direction in ("tail", "head"):
            truth = t if direction == "tail" else h
            row = np.concatenate([[truth], corrupt(truth, n_ent, k, neg_rng)]).astype(np.int64)
            pairs.extend((h, int(c)) if direction == "tail" else (int(c), t) for c in row)
            excl.extend([ex] * len(row))
            rels.extend([r] * len(row))
            cand_rows.append(row)
            truths.append(truth)

    batch = build_contexts(graph, pairs, excl, ctx.hops, ctx.neighbor_samples, seed)
    positives = np.arange(len(cand_rows), dtype=np.int64) * (k + 1)
    out = model.forward_entity(batch, np.asarray(rels, dtype=np.int64), positives, tape, seed, rng)
    logits = ad.reshape(out.logits, (len(cand_rows), k + 1))
    pred = candidate_loss(logits, np.stack(cand_rows), np.asarray(truths))
    return total_loss(pred, out.cfm, model.config.lambda_cfm, model.l2_term(tape))


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Optional[str] = None,
    candidate_cap: int = 10000,
) -> TrainResult:
    """
    Shuffle, sample contexts with the query edge removed, score, fit both
    loss terms and step Adam; keep the parameters of the best validation MRR.
    """
    config.validate()
    model = FlowModulatedScorer(dataset.num_relations, config).init()
    graph = build_graph(dataset.train, dataset.num_entities, dataset.num_relations)
    exclusions = query_exclusions(graph, dataset.train)
    batch_loss = relation_batch_loss if config.task == "relation" else entity_batch_loss
    log_path = Path(out_dir) / EPOCH_LOG if out_dir else None
    if log_path is not None and log_path.exists():
        log_path.unlink()

    log(
        "info",
        "train_start",
        dataset=dataset.name,
        task=config.task,
        triples=len(dataset.train),
        params=model.store.num_scalars(),
        epochs=config.epochs,
    )

    result = TrainResult(model=model)
    best = model.store.snapshot()
    n = len(dataset.train)

    for epoch in range(config.epochs):
        start = time.monotonic()
        seed = epoch_seed(config.seed, epoch)
        order = substream(config.seed, epoch, 0x5F).permutation(n)
        losses: List[float] = []
        try:
            for b, lo in enumerate(range(0, n, config.batch_size)):
                idx = order[lo:lo + config.batch_size]
                tape = Tape()
                loss = batch_loss(
                    model,
                    graph,
                    dataset.train[idx],
                    [exclusions[i] for i in idx],
                    epoch_seed(seed, b),
                    substream(seed, b, 0xF1),
                    tape,
                )
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                ad.backward(tape, loss)
                adam_step(model.store, config.lr)
                losses.append(value)
                log("debug", "train_batch_done", epoch=epoch, batch=b, loss=value)

            valid = evaluate(
                model,
                dataset,
                "valid",
                seed=config.seed,
                workers=config.workers,
                limit=config.valid_limit,
                candidate_cap=candidate_cap,
                batch_size=config.batch_size,
            )
        except Exception as e:
            log("error", "train_epoch_failed", epoch=epoch, error=str(e))
            raise

        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "valid_mrr": valid.mrr,
            "seconds": round(time.monotonic() - start, 3),
        }
        result.history.append(record)
        if valid.mrr > result.best_valid_mrr:
            result.best_valid_mrr = valid.mrr
            result.best_epoch = epoch
            best = model.store.snapshot()
        if log_path is not None:
            append_jsonl(log_path, record)
        log("info", "train_epoch_done", **record, best_epoch=result.best_epoch)

    model.store.restore(best)
    log("info", "train_done", best_epoch=result.best_epoch, best_valid_mrr=result.best_valid_mrr)
    return result
