# conftest.py

from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
import pytest

from flowscore import autodiff as ad
from flowscore.autodiff import Tape, Tensor
from flowscore.config import ContextConfig, FlowConfig, TrainConfig
from flowscore.kg import Dataset, KnowledgeGraph, build_graph, load_dataset
from flowscore.params import ParameterStore

Row = Tuple[str, str, str]


def triangle_rows(count: int = 8) -> List[Row]:
    """Disjoint triangles a -r0-> b -r1-> c, a -r2-> c."""
    rows: List[Row] = []
    for i in range(count):
        a, b, c = f"a{i}", f"b{i}", f"c{i}"
        rows += [(a, "r0", b), (b, "r1", c), (a, "r2", c)]
    return rows


def write_split(path: Path, rows: List[Row]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows), encoding="utf-8")


@pytest.fixture
def toy_dir(tmp_path: Path) -> Path:
    """20 training triples, the 4 held-out ones serve as valid and test."""
    rows = triangle_rows()
    held = [rows[0], rows[4], rows[8], rows[11]]  # r0, r1, r2, r2
    train = [r for r in rows if r not in held]
    root = tmp_path / "toy"
    write_split(root / "train.txt", train)
    write_split(root / "valid.txt", held)
    write_split(root / "test.txt", held)
    return root


@pytest.fixture
def toy_dataset(toy_dir: Path) -> Dataset:
    return load_dataset(str(toy_dir))


@pytest.fixture
def small_config() -> TrainConfig:
    return TrainConfig(
        epochs=2,
        batch_size=4,
        lr=0.01,
        negatives_per_query=5,
        seed=0,
        context=ContextConfig(dim=16, hops=1, top_k=3, neighbor_samples=8, heads=2),
        flow=FlowConfig(),
    )


@pytest.fixture
def random_triples() -> np.ndarray:
    """30 distinct triples over 10 entities and 3 relations."""
    rng = np.random.default_rng(7)
    seen = set()
    out = []
    while len(out) < 30:
        h, r, t = int(rng.integers(10)), int(rng.integers(3)), int(rng.integers(10))
        if (h, r, t) not in seen:
            seen.add((h, r, t))
            out.append((h, r, t))
    return np.asarray(out, dtype=np.int64)


@pytest.fixture
def random_graph(random_triples: np.ndarray) -> KnowledgeGraph:
    return build_graph(random_triples, 10, 3)


Loss = Callable[[Tape, ParameterStore], Tensor]


def _analytic(store: ParameterStore, loss_fn: Loss) -> Dict[str, np.ndarray]:
    store.zero_grad()
    tape = Tape()
    ad.backward(tape, loss_fn(tape, store))
    return {k: v.copy() for k, v in store.grads.items()}


def _numeric(store: ParameterStore, loss_fn: Loss, eps: float = 1e-6) -> Dict[str, np.ndarray]:
    out = {}
    for name, p in store.params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = float(loss_fn(ad.no_grad(), store).data)
            p[idx] = old - eps
            down = float(loss_fn(ad.no_grad(), store).data)
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def _check(store: ParameterStore, loss_fn: Loss, rtol: float = 1e-5, atol: float = 1e-8) -> None:
    got = _analytic(store, loss_fn)
    want = _numeric(store, loss_fn)
    for name in store.names():
        np.testing.assert_allclose(got[name], want[name], rtol=rtol, atol=atol, err_msg=name)


@pytest.fixture
def gradcheck() -> Callable[..., None]:
    """Tape gradients of a scalar loss against central differences, every entry of every parameter."""
    return _check
