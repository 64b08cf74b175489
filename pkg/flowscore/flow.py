# flowscore/flow.py

"""
Conditional flow matching between head and tail messages.

The conditional path is a Gaussian around the straight line from h* to t*
with fixed std sigma; its conditional field t* - h* does not depend on
time. A small MLP v(t, x) regresses that field; at scoring time its output
multiplies the static pair score.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import FlowConfig
from .errors import AssignmentBudgetError, ShapeError
from .params import ParameterStore, xavier_uniform
from .sampling import substream

OT_BUDGET = 512


@dataclass
class FlowCondition:
    h_star: np.ndarray
    t_star: np.ndarray
    # entity task: the query relation row per pair; it reaches the score
    # through the static term, the field itself is relation-free
    rel_embedding: Optional[np.ndarray] = None

    def rows(self):
        h = np.atleast_2d(np.asarray(self.h_star))
        t = np.atleast_2d(np.asarray(self.t_star))
        if h.shape != t.shape:
            raise ShapeError("flow_condition", h.shape, t.shape)
        if self.rel_embedding is not None and np.shape(self.rel_embedding)[0] != h.shape[0]:
            raise ShapeError("flow_condition", h.shape, np.shape(self.rel_embedding))
        return h, t


@dataclass
class FlowSample:
    """
    Rows of (t, x_t, u_target); `noise` is the standard normal draw behind x_t.
    x_t and u_target may be tape tensors built from the endpoints, in which
    case the CFM loss also reaches whatever produced them.
    """

    t: np.ndarray
    x_t: Union[np.ndarray, Tensor]
    u_target: Union[np.ndarray, Tensor]
    noise: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def sample_path(
    z: FlowCondition,
    sigma: float,
    rng: np.random.Generator,
    t: Optional[Union[float, np.ndarray]] = None,
) -> FlowSample:
    """t ~ U[0,1] (unless given), x_t = (1-t)h* + t·t* + sigma·eps, u = t* - h*."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    h, tt = z.rows()
    n = h.shape[0]
    if t is None:
        times = rng.random((n, 1))
    else:
        times = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1)).copy()
    eps = rng.standard_normal(h.shape)
    x_t = (1.0 - times) * h + times * tt + sigma * eps
    return FlowSample(
        t=times.astype(h.dtype),
        x_t=x_t.astype(h.dtype),
        u_target=(tt - h).astype(h.dtype),
        noise=eps.astype(h.dtype),
    )


def path_point(h_star: Tensor, t_star: Tensor, times: np.ndarray, noise: np.ndarray, sigma: float) -> Tensor:
    """(1-t)h* + t·t* + sigma·eps recorded on the endpoints' tape."""
    t_full = np.broadcast_to(np.asarray(times, dtype=h_star.dtype).reshape(-1, 1), h_star.shape)
    line = ad.add(ad.mul(h_star, 1.0 - t_full), ad.mul(t_star, t_full))
    return ad.add(line, np.asarray(noise, dtype=h_star.dtype) * h_star.dtype.type(sigma))


def attached_sample(
    h_star: Tensor, t_star: Tensor, times: np.ndarray, noise: np.ndarray, sigma: float
) -> FlowSample:
    """A FlowSample whose x_t and u_target stay differentiable in h* and t*."""
    return FlowSample(
        t=times,
        x_t=path_point(h_star, t_star, times, noise, sigma),
        u_target=ad.sub(t_star, h_star),
        noise=noise,
    )


class VectorFieldNet:
    """v(t, x) = W_out·relu(W_in·[x, t] + b_in) + b_out, hidden width = dim."""

    def __init__(self, store: ParameterStore, dim: int, prefix: str = "flow.") -> None:
        self.store = store
        self.dim = dim
        self.prefix = prefix

    def init(self, rng: np.random.Generator) -> "VectorFieldNet":
        d = self.dim
        self.store.add(self.prefix + "W_in", xavier_uniform(rng, d + 1, d))
        self.store.add(self.prefix + "b_in", np.zeros(d))
        self.store.add(self.prefix + "W_out", xavier_uniform(rng, d, d))
        self.store.add(self.prefix + "b_out", np.zeros(d))
        return self

    def __call__(self, t: np.ndarray, x: Tensor, tape: Tape) -> Tensor:
        p = self.prefix
        times = np.broadcast_to(np.asarray(t, dtype=x.dtype).reshape(-1, 1), (x.shape[0], 1))
        inp = ad.concat([x, ad.constant(times, x)], axis=1)
        hidden = ad.relu(ad.add(ad.matmul(inp, tape.param(self.store, p + "W_in")), tape.param(self.store, p + "b_in")))
        return ad.add(ad.matmul(hidden, tape.param(self.store, p + "W_out")), tape.param(self.store, p + "b_out"))


def vector_field(t: Union[float, np.ndarray], x: Tensor, net: VectorFieldNet, tape: Tape) -> Tensor:
    return net(np.asarray(t), x, tape)


def cfm_loss(samples: FlowSample, net: VectorFieldNet, tape: Tape) -> Tensor:
    """Batch mean of ||v(t, x_t) - u_target||^2."""
    if len(samples) == 0:
        raise ValueError("cfm_loss needs a non-empty batch")
    pred = net(samples.t, ad.constant(samples.x_t), tape)
    return ad.squared_error(pred, ad.constant(samples.u_target, pred))


def ot_pair(heads: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """
    Permutation pi minimizing sum ||h_i - t_pi(i)||^2 (exact assignment).
    Head i is paired with tail pi[i].
    """
    h = np.atleast_2d(np.asarray(heads, dtype=np.float64))
    t = np.atleast_2d(np.asarray(tails, dtype=np.float64))
    if h.shape != t.shape:
        raise ShapeError("ot_pair", h.shape, t.shape)
    n = h.shape[0]
    if n > OT_BUDGET:
        raise AssignmentBudgetError(
            f"ot_pair: batch of {n} exceeds the exact assignment budget of {OT_BUDGET}; "
            "use coupling=paired or a smaller batch"
        )
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cost = cdist(h, t, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return perm


def coupling_permutation(heads: np.ndarray, tails: np.ndarray, coupling: str) -> np.ndarray:
    if coupling == "minibatch_ot":
        return ot_pair(heads, tails)
    return np.arange(len(heads), dtype=np.int64)


def modulation_vector(
    h_star: Tensor,
    t_star: Tensor,
    net: VectorFieldNet,
    config: FlowConfig,
    tape: Tape,
    seed: int = 0,
) -> Tensor:
    """
    Inference-time modulation. midpoint: v(0.5, (h*+t*)/2). mc:S: mean of v
    over S draws of (t, x_t) from the training path, from a fixed sub-seed.
    """
    samples = config.mc_samples
    if samples == 0:
        mid = ad.scale(ad.add(h_star, t_star), 0.5)
        return net(np.full(h_star.shape[0], 0.5), mid, tape)

    rng = substream(seed, 0xF10)
    total = None
    for _ in range(samples):
        times = rng.random((h_star.shape[0], 1)).astype(h_star.dtype)
        eps = rng.standard_normal(h_star.shape).astype(h_star.dtype)
        v = net(times, path_point(h_star, t_star, times, eps, config.sigma), tape)
        total = v if total is None else ad.add(total, v)
    return ad.scale(total, 1.0 / samples)
