# flowscore/export.py

"""
Case-study exports: the context-relation / predicted-relation correlation
matrix and per-query score rows for external projection. Rendering is left
to other tools.
"""

import csv
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .autodiff import Tensor
from .context import context_relation_presence
from .errors import UsageError
from .evaluate import eval_graph, split_queries
from .kg import Dataset
from .logger import log
from .model import FlowModulatedScorer, build_contexts, predict_relations
from .sampling import query_exclusions


def correlation_matrix(
    model: FlowModulatedScorer,
    dataset: Dataset,
    split: str = "test",
    seed: int = 0,
    batch_size: int = 128,
    limit: int = 0,
) -> np.ndarray:
    """
    (|R|, |R|): entry [a, b] is the mean over queries of
    presence(a in context) * p(b | h, t).
    """
    if model.task != "relation":
        raise UsageError("correlation export needs a relation-task model")
    queries = split_queries(dataset, split, limit)
    graph = eval_graph(dataset, split)
    exclusions = query_exclusions(graph, queries)
    ctx = model.config.context
    n_rel = dataset.num_relations
    total = np.zeros((n_rel, n_rel))

    for lo in range(0, len(queries), batch_size):
        part = queries[lo:lo + batch_size]
        batch = build_contexts(
            graph,
            ((int(h), int(t)) for h, _, t in part),
            exclusions[lo:lo + batch_size],
            ctx.hops,
            ctx.neighbor_samples,
            seed,
        )
        probs = predict_relations(Tensor(model.relation_scores(batch, seed=seed)))
        presence = context_relation_presence(batch, n_rel)
        total += presence.T @ probs

    return total / max(len(queries), 1)


def write_matrix_csv(path: Path, matrix: np.ndarray, labels: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["context_relation"] + list(labels))
        for label, row in zip(labels, matrix):
            w.writerow([label] + [f"{x:.6g}" for x in row])


def flowvis_rows(
    model: FlowModulatedScorer,
    dataset: Dataset,
    split: str = "test",
    seed: int = 0,
    batch_size: int = 128,
    limit: int = 0,
) -> List[list]:
    """Per query: ids, then the static score, modulated score and both messages."""
    queries = split_queries(dataset, split, limit)
    graph = eval_graph(dataset, split)
    exclusions = query_exclusions(graph, queries)
    ctx = model.config.context
    rows: List[list] = []

    for lo in range(0, len(queries), batch_size):
        part = queries[lo:lo + batch_size]
        batch = build_contexts(
            graph,
            ((int(h), int(t)) for h, _, t in part),
            exclusions[lo:lo + batch_size],
            ctx.hops,
            ctx.neighbor_samples,
            seed,
        )
        rels = part[:, 1] if model.task == "entity" else None
        trace = model.trace(batch, rels=rels, seed=seed)
        for i, (h, r, t) in enumerate(part.tolist()):
            rows.append(
                [lo + i, h, r, t]
                + trace["static"][i].tolist()
                + trace["modulated"][i].tolist()
                + trace["m_head"][i].tolist()
                + trace["m_tail"][i].tolist()
            )
    return rows


def flowvis_header(dim: int) -> List[str]:
    cols = ["query", "head", "relation", "tail"]
    for prefix in ("static", "modulated", "m_head", "m_tail"):
        cols.extend(f"{prefix}_{j}" for j in range(dim))
    return cols


def write_flowvis_csv(path: Path, rows: Sequence[list], dim: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(flowvis_header(dim))
        for row in rows:
            w.writerow(row[:4] + [f"{x:.6g}" for x in row[4:]])


def export(kind: str, model: FlowModulatedScorer, dataset: Dataset, out_dir: str, split: str, seed: int) -> Path:
    out = Path(out_dir)
    if kind == "correlation":
        matrix = correlation_matrix(model, dataset, split, seed=seed)
        path = out / "correlation.csv"
        write_matrix_csv(path, matrix, dataset.relation_vocab.names())
    elif kind == "flowvis":
        rows = flowvis_rows(model, dataset, split, seed=seed)
        path = out / "flowvis.csv"
        write_flowvis_csv(path, rows, model.config.context.dim)
    else:
        raise UsageError(f"unknown export: {kind}")
    log("info", "export_written", kind=kind, path=str(path))
    return path
