"""Router scoring functions, top-k selection and NormRouter scale calibration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Tensor

ROUTER_KINDS = ("softmax", "sigmoid", "norm_router")


class RoutingError(ValueError):
    pass


@dataclass
class RouterParams:
    """One layer's router.

    ``weight`` maps hidden states to one logit per candidate expert. ``sigma`` is
    the learnable NormRouter scale (initialised to 1); ``c`` is the fixed Monte
    Carlo constant and is never handed to the optimizer.
    """

    weight: Tensor
    kind: str = "softmax"
    sigma: Tensor | None = None
    c: float = 1.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in ROUTER_KINDS:
            raise RoutingError(f"unknown router kind {self.kind!r}; expected one of {ROUTER_KINDS}")
        if self.kind == "norm_router":
            if self.sigma is None:
                self.sigma = Tensor(1.0, requires_grad=True, name="sigma")
            if not self.c > 0:
                raise RoutingError("NormRouter constant c must be positive")
        if not self.eps > 0:
            raise RoutingError("eps must be positive")

    @property
    def num_choices(self) -> int:
        return self.weight.shape[0]

    def trainable(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.kind == "norm_router":
            out["sigma"] = self.sigma
        return out


@dataclass
class RouterDecision:
    logits: Tensor
    scores: Tensor
    topk_indices: np.ndarray
    gates: Tensor
    offset: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.topk_indices.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.topk_indices.shape[0]


def topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise RoutingError(f"top-k with k={k} over {n} choices")
    if k == 1:
        return np.argmax(scores, axis=-1)[:, None]
    return np.argsort(-scores, axis=-1, kind="stable")[:, :k]


def norm_router_scores(z: Tensor, sigma, c: float, eps: float) -> Tensor:
    unit = z / (T.l2norm(z, axis=-1) + eps)
    return T.relu(unit) * sigma * c


def score(z: Tensor, params: RouterParams) -> Tensor:
    if params.kind == "softmax":
        return T.softmax(z, axis=-1)
    if params.kind == "sigmoid":
        return T.sigmoid(z)
    return norm_router_scores(z, params.sigma, params.c, params.eps)


def gates_from_scores(scores: Tensor, idx: np.ndarray, kind: str) -> Tensor:
    n, k = idx.shape
    flat = (np.arange(n)[:, None] * scores.shape[1] + idx).reshape(-1)
    sel = T.gather_rows(scores.reshape(-1, 1), flat).reshape(n, k)
    if k == 1 or kind == "norm_router":
        return sel
    return sel / sel.sum(axis=1, keepdims=True)


def route(h: Tensor, params: RouterParams, k: int, checked: bool | None = None, offset: int = 0) -> RouterDecision:
    """Score every candidate expert for each row of ``h`` and keep the top ``k``.

    ``offset`` shifts the returned expert IDs into pool coordinates.
    """
    if k > params.num_choices or k < 1:
        raise RoutingError(f"k={k} but router has {params.num_choices} choices")
    if (T.is_checked() if checked is None else checked) and not np.all(np.isfinite(h.data)):
        raise NonFiniteError("route: non-finite hidden state")
    z = T.matmul(h, T.transpose(params.weight))
    s = score(z, params)
    idx = topk(s.data, k)
    g = gates_from_scores(s, idx, params.kind)
    return RouterDecision(logits=z, scores=s, topk_indices=idx + offset, gates=g, offset=offset)


def norm_router_scale_invariance_check(z, lam: float, eps: float = 0.0, c: float = 1.0, k: int = 1, tol: float = 1e-9) -> bool:
    """Scores are unchanged by positive rescaling of the logits (exactly when eps=0);
    the top-k set is unchanged for any eps."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if lam <= 0:
        raise ValueError("lambda must be positive")

    def raw(v, e):
        n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        return c * np.maximum(v / (n + e), 0.0)

    same_idx = np.array_equal(topk(raw(z, eps), k), topk(raw(lam * z, eps), k))
    if eps == 0.0:
        return bool(same_idx and np.allclose(raw(z, 0.0), raw(lam * z, 0.0), rtol=0.0, atol=tol))
    return bool(same_idx)


def inverse_topk_norm(x: np.ndarray, k: int) -> np.ndarray:
    """1/||top-k of ReLU(x/||x||)|| for each row of ``x`` (inf where that norm is 0).

    Evaluated as ||x|| / ||top-k of ReLU(x)|| over the descending sort, so both
    norms share one summation order and an all-positive row with k = E gives 1.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xs = -np.sort(-x, axis=1)
    full = np.sqrt((xs * xs).sum(axis=1))
    top = np.maximum(xs[:, :k], 0.0)
    with np.errstate(divide="ignore"):
        return full / np.sqrt((top * top).sum(axis=1))


def monte_carlo_c(E: int, k: int, N: int = 100_000, seed: int | None = 0, batch: int = 65_536) -> float:
    """Monte Carlo estimate of the NormRouter scale constant for E experts, top-k.

    Draws whose top-k block is all zero (every coordinate of x among the top k is
    non-positive) have no finite value and are redrawn.
    """
    if E < 1 or k < 1:
        raise ValueError("E and k must be positive")
    if k > E:
        raise ValueError("k must not exceed E")
    if N < 1:
        raise ValueError("N must be positive")
    rng = np.random.default_rng(seed)
    total = 0.0
    got = 0
    while got < N:
        m = min(batch, N - got)
        vals = inverse_topk_norm(rng.standard_normal((m, E)), k)
        vals = vals[np.isfinite(vals)]
        total += float(vals.sum())
        got += vals.size
    return total / N


def zero_score_fraction(z: np.ndarray, eps: float = 1e-6) -> float:
    """Share of NormRouter scores that are exactly zero for logits ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    s = np.maximum(z / (np.linalg.norm(z, axis=1, keepdims=True) + eps), 0.0)
    return float((s == 0.0).mean())
