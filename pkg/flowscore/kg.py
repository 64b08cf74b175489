# flowscore/kg.py

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, ParseError
from .logger import log

OUTGOING = 0
INCOMING = 1

SPLITS = ("train", "valid", "test")


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


class IncidentEdge(NamedTuple):
    edge_id: int
    rel: int
    other: int
    direction: int  # OUTGOING or INCOMING


class Vocab:
    """Dense name <-> index map; indices follow first appearance."""

    def __init__(self, names: Iterable[str] = ()) -> None:
        self._names: List[str] = []
        self._index: Dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = len(self._names)
            self._index[name] = idx
            self._names.append(name)
        return idx

    def index(self, name: str) -> int:
        return self._index[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    def names(self) -> List[str]:
        return list(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self._names)


@dataclass
class Dataset:
    entity_vocab: Vocab
    relation_vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    mode: str = "transductive"
    name: str = ""
    # inductive only: the unseen test graph and its own entity vocab
    test_entity_vocab: Optional[Vocab] = None
    test_graph: Optional[np.ndarray] = None

    @property
    def num_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def num_relations(self) -> int:
        return len(self.relation_vocab)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"Unknown split: {name}")
        return getattr(self, name)

    def eval_graph_triples(self) -> np.ndarray:
        """Observed facts that contexts are sampled from at test time."""
        if self.mode == "inductive":
            return self.test_graph
        return self.train

    def eval_num_entities(self) -> int:
        if self.mode == "inductive":
            return len(self.test_entity_vocab)
        return self.num_entities


def _read_rows(path: Path) -> List[Tuple[int, str, str, str]]:
    if not path.is_file():
        raise DataError(f"missing split file: {path}")
    rows: List[Tuple[int, str, str, str]] = []
    for line_no, raw in enumerate(path.read_bytes().splitlines(), start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(str(path), line_no, "invalid UTF-8") from None
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(str(path), line_no, f"expected 3 tab-separated fields, got {len(parts)}")
        h, r, t = (p.strip() for p in parts)
        rows.append((line_no, h, r, t))
    if not rows:
        raise DataError(f"empty split file: {path}")
    return rows


def _index_rows(
    rows: Sequence[Tuple[int, str, str, str]],
    entities: Vocab,
    relations: Vocab,
    path: Path,
    grow_relations: bool = True,
) -> np.ndarray:
    out: List[Tuple[int, int, int]] = []
    seen = set()
    dropped = 0
    for line_no, h, r, t in rows:
        if r not in relations and not grow_relations:
            raise DataError(f"{path}: line {line_no}: unknown relation '{r}'")
        trip = (entities.add(h), relations.add(r), entities.add(t))
        if trip in seen:
            dropped += 1
            continue
        seen.add(trip)
        out.append(trip)
    if dropped:
        log("warning", "dataset_duplicates_dropped", path=str(path), count=dropped)
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def load_dataset(dir_path: str, mode: str = "transductive") -> Dataset:
    """
    Load train/valid/test triple files ("head<TAB>relation<TAB>tail").

    Transductive: one vocab over the union of splits, in first-appearance
    order train -> valid -> test.

    Inductive: `dir_path` is `<ds>/v<k>`; the unseen graph lives in
    `<ds>/v<k>_ind` with its own `train.txt` (observed facts) and
    `test.txt` (queries). Relations there must already be known.
    """
    root = Path(dir_path)
    if mode not in ("transductive", "inductive"):
        raise DataError(f"unknown dataset mode: {mode}")

    rows = {s: _read_rows(root / f"{s}.txt") for s in SPLITS}
    entities = Vocab()
    relations = Vocab()
    indexed = {s: _index_rows(rows[s], entities, relations, root / f"{s}.txt") for s in SPLITS}

    ds = Dataset(
        entity_vocab=entities,
        relation_vocab=relations,
        train=indexed["train"],
        valid=indexed["valid"],
        test=indexed["test"],
        mode=mode,
        name=root.name,
    )

    if mode == "inductive":
        ind_root = root.parent / f"{root.name}_ind"
        ind_entities = Vocab()
        graph_path = ind_root / "train.txt"
        query_path = ind_root / "test.txt"
        ds.test_graph = _index_rows(
            _read_rows(graph_path), ind_entities, relations, graph_path, grow_relations=False
        )
        ds.test = _index_rows(
            _read_rows(query_path), ind_entities, relations, query_path, grow_relations=False
        )
        ds.test_entity_vocab = ind_entities
        shared = set(entities.names()) & set(ind_entities.names())
        if shared:
            log("warning", "inductive_entity_overlap", count=len(shared))

    log(
        "info",
        "dataset_loaded",
        path=str(root),
        mode=mode,
        entities=ds.num_entities,
        relations=ds.num_relations,
        train=len(ds.train),
        valid=len(ds.valid),
        test=len(ds.test),
    )
    return ds


@dataclass
class KnowledgeGraph:
    """
    Immutable triple store. Incidence is stored CSR-style: the entries of
    entity e live in [inc_ptr[e], inc_ptr[e+1]) sorted by edge id, an
    outgoing entry before the incoming one for self-loops.
    """

    num_entities: int
    num_relations: int
    edges: np.ndarray
    inc_ptr: np.ndarray
    inc_edge: np.ndarray
    inc_rel: np.ndarray
    inc_other: np.ndarray
    inc_dir: np.ndarray
    _pair_index: Dict[Tuple[int, int, int], List[int]] = field(default_factory=dict, repr=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degree(self, entity: int) -> int:
        return int(self.inc_ptr[entity + 1] - self.inc_ptr[entity])

    def incident_slice(self, entity: int) -> slice:
        return slice(int(self.inc_ptr[entity]), int(self.inc_ptr[entity + 1]))

    def incidence(self, entity: int) -> List[IncidentEdge]:
        sl = self.incident_slice(entity)
        return [
            IncidentEdge(int(e), int(r), int(o), int(d))
            for e, r, o, d in zip(
                self.inc_edge[sl], self.inc_rel[sl], self.inc_other[sl], self.inc_dir[sl]
            )
        ]

    def matching_edges(self, head: int, rel: int, tail: int) -> List[int]:
        """Edges with the same unordered endpoint pair and the same relation."""
        key = (min(head, tail), max(head, tail), rel)
        return list(self._pair_index.get(key, ()))


def build_graph(triples: np.ndarray, num_entities: int, num_relations: int) -> KnowledgeGraph:
    edges = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(edges):
        heads, rels, tails = edges[:, 0], edges[:, 1], edges[:, 2]
        if (
            heads.min() < 0
            or tails.min() < 0
            or rels.min() < 0
            or max(heads.max(), tails.max()) >= num_entities
            or rels.max() >= num_relations
        ):
            raise DataError(
                f"triple index out of range (entities={num_entities}, relations={num_relations})"
            )
    else:
        heads = rels = tails = np.zeros(0, dtype=np.int64)

    m = len(edges)
    eid = np.arange(m, dtype=np.int64)
    owner = np.concatenate([heads, tails])
    entry_edge = np.concatenate([eid, eid])
    entry_rel = np.concatenate([rels, rels])
    entry_other = np.concatenate([tails, heads])
    entry_dir = np.concatenate([np.full(m, OUTGOING), np.full(m, INCOMING)]).astype(np.int64)

    order = np.lexsort((entry_dir, entry_edge, owner))
    counts = np.bincount(owner, minlength=num_entities) if m else np.zeros(num_entities, dtype=np.int64)
    inc_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    pair_index: Dict[Tuple[int, int, int], List[int]] = {}
    for i, (h, r, t) in enumerate(edges.tolist()):
        pair_index.setdefault((min(h, t), max(h, t), r), []).append(i)

    return KnowledgeGraph(
        num_entities=num_entities,
        num_relations=num_relations,
        edges=edges,
        inc_ptr=inc_ptr,
        inc_edge=entry_edge[order],
        inc_rel=entry_rel[order],
        inc_other=entry_other[order],
        inc_dir=entry_dir[order],
        _pair_index=pair_index,
    )
