"""Synthetic tasks: quadratic gradient fields and a Markov-chain token corpus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor
from .dynamics import DynamicsConfig, LayerState, advance
from .layers import AffineExpert, Router, SMoELayer
from .mgda import ObjectiveSet, min_norm_point

__all__ = [
    "QuadraticTask",
    "build_quadratic_task",
    "unroll",
    "layers_to_converge",
    "TinyCorpus",
    "build_tiny_lm_task",
    "corrupt_tokens",
    "unigram_entropy",
]


# -- quadratic multi-objective task ----------------------------------------------

@dataclass
class QuadraticTask:
    objectives: ObjectiveSet
    layer: SMoELayer  # expert i outputs -H_i (x - c_i)

    def layer_fn(self, oracle: bool = False):
        """x -> f_out, optionally with oracle min-norm coefficients replacing the router."""
        override = self.oracle_weights if oracle else None

        def fn(x):
            xt = x if isinstance(x, Tensor) else Tensor(x)
            out = self.layer.forward(xt, weight_override=override).f_out
            return out if isinstance(x, Tensor) else out.data

        return fn

    def oracle_weights(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        H, c = self.objectives.hessians, self.objectives.centers
        rows = []
        for xi in x:
            grads = np.einsum("eij,ej->ei", H, xi - c)
            rows.append(min_norm_point(grads).alpha)
        return np.array(rows)


def _spd(dim: int, rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eig = np.exp(np.linspace(np.log(lo), np.log(hi), dim)) if dim > 1 else np.array([lo])
    h = (q * eig) @ q.T
    return (h + h.T) / 2.0


def build_quadratic_task(
    num_experts: int,
    dim: int,
    seed: int,
    k: int | None = None,
    spectrum: tuple[float, float] = (1.0, 10.0),
    centers: np.ndarray | None = None,
) -> QuadraticTask:
    """E quadratics with Hessian spectra spanning ``spectrum`` and an SMoE layer of their gradient fields."""
    if num_experts < 1:
        raise ContractError("need at least one expert")
    rng = np.random.default_rng(seed)
    lo, hi = spectrum
    if centers is None:
        centers = rng.normal(size=(num_experts, dim))
    hessians = np.stack([_spd(dim, rng, lo, hi) for _ in range(num_experts)])
    obj = ObjectiveSet(centers, hessians)
    experts = [
        AffineExpert(Tensor(-hessians[i]), Tensor(hessians[i] @ obj.centers[i]))
        for i in range(num_experts)
    ]
    router = Router(
        Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_experts, dim))),
        Tensor(np.zeros(num_experts)),
        k if k is not None else min(2, num_experts),
    )
    return QuadraticTask(obj, SMoELayer(router, experts))


def unroll(layer_fn, cfg: DynamicsConfig, x0: np.ndarray, layers: int) -> np.ndarray:
    """Trajectory x_0..x_T of ``layers`` applications of the same layer under ``cfg``."""
    state = LayerState.initial(np.asarray(x0, dtype=np.float64))
    traj = [state.x]
    for _ in range(layers):
        state = advance(cfg, layer_fn, state)
        traj.append(state.x)
    return np.array(traj)


def layers_to_converge(layer_fn, cfg: DynamicsConfig, x0, target: np.ndarray | None = None,
                       tol: float = 1e-6, max_layers: int = 10_000) -> int:
    """Number of layer applications until ||x - target|| < tol (``max_layers + 1`` if never)."""
    state = LayerState.initial(np.asarray(x0, dtype=np.float64))
    target = np.zeros_like(state.x) if target is None else target
    for t in range(max_layers + 1):
        if np.linalg.norm(state.x - target) < tol:
            return t
        state = advance(cfg, layer_fn, state)
    return max_layers + 1


# -- tiny language-model corpus ---------------------------------------------------

@dataclass
class TinyCorpus:
    """Token sequences from a sparse Markov chain. Id ``vocab - 1`` is reserved as the sentinel."""

    train: np.ndarray  # (n_train, seq_len)
    valid: np.ndarray  # (n_valid, seq_len)
    vocab: int
    transition: np.ndarray  # (vocab - 1, vocab - 1)

    @property
    def sentinel(self) -> int:
        return self.vocab - 1


def build_tiny_lm_task(
    vocab: int,
    seq_len: int,
    rng: np.random.Generator,
    train_sequences: int = 256,
    valid_sequences: int = 64,
    branching: int = 4,
) -> TinyCorpus:
    if not 3 <= vocab <= 256:
        raise ContractError("vocab must be in [3, 256]")
    if not 2 <= seq_len <= 64:
        raise ContractError("seq_len must be in [2, 64]")
    n = vocab - 1
    branching = min(branching, n)
    trans = np.zeros((n, n))
    for s in range(n):
        succ = rng.choice(n, size=branching, replace=False)
        trans[s, succ] = rng.dirichlet(np.ones(branching))
    cum = np.cumsum(trans, axis=1)
    total = train_sequences + valid_sequences
    seqs = np.empty((total, seq_len), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, n, size=total)
    u = rng.random((total, seq_len - 1))
    for t in range(1, seq_len):
        rows = cum[seqs[:, t - 1]]
        nxt = (u[:, t - 1, None] < rows).argmax(axis=1)
        seqs[:, t] = nxt
    return TinyCorpus(seqs[:train_sequences], seqs[train_sequences:], vocab, trans)


def corrupt_tokens(tokens: np.ndarray, swap_rate: float, sentinel_id: int, seed: int) -> np.ndarray:
    """Replace each token by ``sentinel_id`` independently with probability ``swap_rate``."""
    if not 0.0 <= swap_rate <= 1.0:
        raise ContractError("swap_rate must be in [0, 1]")
    tokens = np.asarray(tokens)
    mask = np.random.default_rng(seed).random(tokens.shape) < swap_rate
    return np.where(mask, sentinel_id, tokens)


def unigram_entropy(tokens: np.ndarray) -> float:
    """Entropy (nats) of the empirical unigram distribution."""
    _, counts = np.unique(np.asarray(tokens).reshape(-1), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())
