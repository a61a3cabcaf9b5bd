"""Routers, experts and the (sparse) mixture-of-experts layer.

The layer output ``f_out = sum_i w_i(x) u_i(x)`` is what every dynamics
wrapper consumes. Inputs are single tokens ``(D,)`` or token batches
``(N, D)``; routing is independent per token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    Tensor,
    index_add,
    softmax,
    topk_indices,
    topk_mask,
)

__all__ = [
    "Router",
    "RouterDecision",
    "MLPExpert",
    "LinearExpert",
    "AffineExpert",
    "SMoELayer",
    "route",
    "smoe_forward",
    "moe_forward",
    "plain_residual_step",
    "save_checkpoint",
    "load_checkpoint",
]


def _param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Router:
    """Affine router g(x) = W x + b followed by TopK masking and softmax."""

    W: Tensor  # (E, D)
    b: Tensor  # (E,)
    k: int = 2

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"router W {self.W.shape} / b {self.b.shape} inconsistent")
        if not 1 <= self.k <= self.num_experts:
            raise ContractError(f"K={self.k} outside [1, {self.num_experts}]")

    @property
    def num_experts(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, dim: int, num_experts: int, k: int, rng: np.random.Generator, scale: float = 1.0):
        W = rng.normal(0.0, scale / np.sqrt(dim), size=(num_experts, dim))
        return cls(_param(W, "router.W"), _param(np.zeros(num_experts), "router.b"), k)

    def scores(self, x: Tensor) -> Tensor:
        return x @ self.W.T + self.b

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


@dataclass
class RouterDecision:
    """Per-token routing outcome. Arrays carry a leading token axis."""

    scores: np.ndarray  # (N, E) raw affinities
    selected: np.ndarray  # (N, K) expert indices, ascending
    weights: Tensor  # (N, E), zero off the selected set

    @property
    def weight_array(self) -> np.ndarray:
        return self.weights.data


def route(router: Router, x: Tensor, k: int | None = None) -> RouterDecision:
    """softmax(TopK(W x + b)); a 1-d ``x`` yields 1-d fields."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    if xb.shape[1] != router.dim:
        raise DimensionError(f"token width {xb.shape[1]} != router width {router.dim}")
    k = router.k if k is None else k
    g = router.scores(xb)
    w = softmax(topk_mask(g, k), axis=-1)
    selected = topk_indices(g.data, k)
    if single:
        return RouterDecision(g.data[0], selected[0], w.reshape(-1))
    return RouterDecision(g.data, selected, w)


class MLPExpert:
    """Two-layer perceptron D -> H -> D with ReLU."""

    def __init__(self, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor):
        if W1.shape[0] != W2.shape[1]:
            raise DimensionError("expert input and output widths differ")
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator, out_scale: float = 1.0, tag: str = ""):
        W1 = rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, hidden))
        W2 = rng.normal(0.0, out_scale / np.sqrt(hidden), size=(hidden, dim))
        return cls(
            _param(W1, f"{tag}W1"), _param(np.zeros(hidden), f"{tag}b1"),
            _param(W2, f"{tag}W2"), _param(np.zeros(dim), f"{tag}b2"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ((x @ self.W1 + self.b1).relu()) @ self.W2 + self.b2

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


class LinearExpert:
    """u(x) = x M (row-vector convention, so u(x) = M^T x for a column x)."""

    def __init__(self, M: Tensor):
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DimensionError("linear expert needs a square matrix")
        self.M = M

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float = 1.0, tag: str = ""):
        return cls(_param(rng.normal(0.0, scale / np.sqrt(dim), size=(dim, dim)), f"{tag}M"))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.M

    def parameters(self) -> dict[str, Tensor]:
        return {"M": self.M}


class AffineExpert:
    """u(x) = x A + c. Used for fixed gradient fields u(x) = -H (x - c)."""

    def __init__(self, A: Tensor, c: Tensor):
        self.A, self.c = A, c

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.A + self.c

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "c": self.c}


@dataclass
class LayerOutput:
    f_out: Tensor  # (N, D) or (D,)
    decision: RouterDecision
    # expert index -> (token rows, expert output on those rows)
    per_expert: dict[int, tuple[np.ndarray, Tensor]] = field(default_factory=dict)
    # (N, E) ||u_i(x)|| for every expert; only filled in dense diagnostic mode
    expert_norms: np.ndarray | None = None


class SMoELayer:
    """Router plus E experts. ``k`` defaults to the router's K."""

    def __init__(self, router: Router, experts: Sequence):
        if len(experts) != router.num_experts:
            raise DimensionError(f"{len(experts)} experts but router scores {router.num_experts}")
        self.router = router
        self.experts = list(experts)

    @classmethod
    def init(
        cls,
        dim: int,
        num_experts: int,
        k: int,
        rng: np.random.Generator,
        expert_kind: str = "mlp",
        hidden_mult: int = 4,
        out_scale: float = 1.0,
    ) -> "SMoELayer":
        router = Router.init(dim, num_experts, k, rng)
        if expert_kind == "mlp":
            experts = [MLPExpert.init(dim, hidden_mult * dim, rng, out_scale, f"e{i}.") for i in range(num_experts)]
        elif expert_kind == "linear":
            experts = [LinearExpert.init(dim, rng, out_scale, f"e{i}.") for i in range(num_experts)]
        else:
            raise ContractError(f"unknown expert kind {expert_kind!r}")
        return cls(router, experts)

    @property
    def num_experts(self) -> int:
        return self.router.num_experts

    @property
    def dim(self) -> int:
        return self.router.dim

    def parameters(self) -> dict[str, Tensor]:
        out = {f"router.{k}": v for k, v in self.router.parameters().items()}
        for i, e in enumerate(self.experts):
            out.update({f"expert{i}.{k}": v for k, v in e.parameters().items()})
        return out

    def forward(
        self,
        x: Tensor,
        k: int | None = None,
        dense_diagnostics: bool = False,
        weight_override: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> LayerOutput:
        """Evaluate only the selected experts and combine them.

        ``weight_override`` maps the (N, D) input array to an (N, E) weight
        matrix replacing the router (used to substitute oracle coefficients).
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        if xb.shape[1] != self.dim:
            raise DimensionError(f"token width {xb.shape[1]} != layer width {self.dim}")
        n = xb.shape[0]

        if weight_override is not None:
            w_arr = np.asarray(weight_override(xb.data), dtype=np.float64).reshape(n, self.num_experts)
            weights = Tensor(w_arr)
            # an override is dense routing: every expert counts as selected
            all_experts = np.tile(np.arange(self.num_experts), (n, 1))
            decision = RouterDecision(self.router.scores(xb).data, all_experts, weights)
            active = [np.flatnonzero(w_arr[:, e]) for e in range(self.num_experts)]
        else:
            decision = route(self.router, xb, k)
            weights = decision.weights
            sel = decision.selected
            active = [np.flatnonzero(np.any(sel == e, axis=1)) for e in range(self.num_experts)]

        out = Tensor(np.zeros((n, self.dim)))
        per_expert: dict[int, tuple[np.ndarray, Tensor]] = {}
        for e, rows in enumerate(active):
            if rows.size == 0:
                continue
            u = self.experts[e](xb[rows])
            per_expert[e] = (rows, u)
            w_col = weights[rows, e].reshape(-1, 1)
            out = index_add(out, rows, u * w_col)

        norms = None
        if dense_diagnostics:
            xd = Tensor(xb.data)  # off the tape; outputs used for ranking only
            norms = np.stack([np.linalg.norm(ex(xd).data, axis=1) for ex in self.experts], axis=1)

        if single:
            out = out.reshape(-1)
        return LayerOutput(out, decision, per_expert, norms)

    __call__ = forward


def smoe_forward(layer: SMoELayer, x, dense_diagnostics: bool = False) -> LayerOutput:
    return layer.forward(x, dense_diagnostics=dense_diagnostics)


def moe_forward(layer: SMoELayer, x, dense_diagnostics: bool = False) -> LayerOutput:
    """Dense MoE: every expert participates (K = E)."""
    return layer.forward(x, k=layer.num_experts, dense_diagnostics=dense_diagnostics)


def plain_residual_step(layer: SMoELayer, x, gamma: float = 1.0):
    """x + gamma * f_out, the momentum-free update."""
    if not gamma > 0:
        raise ContractError("gamma must be positive")
    return x + gamma * layer.forward(x).f_out


# -- checkpoints ----------------------------------------------------------------
#
# Format: a numpy ``.npz`` archive. Each parameter is stored under its dotted
# name as a float64 array (shape kept by the npy header, so the round trip is
# bit exact). The reserved key ``__meta__`` holds a UTF-8 JSON document as a
# uint8 array.

def save_checkpoint(path: str | Path, params: dict[str, Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    arrays = {name: np.asarray(t.data, dtype=np.float64) for name, t in params.items()}
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    arrays["__meta__"] = np.frombuffer(blob, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8")) if "__meta__" in z.files else {}
    return arrays, meta
