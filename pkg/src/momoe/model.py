"""Next-token model: token embedding, T dynamics-wrapped SMoE layers, linear head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tensor, TrainingDivergence, cross_entropy
from .dynamics import DynamicsConfig, LayerState, LearnedDynamics, advance, make_learnable
from .layers import LayerOutput, SMoELayer

__all__ = ["ModelConfig", "SMoEStack", "ForwardResult"]


@dataclass
class ModelConfig:
    layers: int = 6
    dim: int = 64
    experts: int = 8
    k: int = 2
    expert_kind: str = "mlp"
    hidden_mult: int = 4
    vocab: int = 128
    expert_out_scale: float = 0.5
    share_dynamics: bool = True


@dataclass
class ForwardResult:
    logits: Tensor
    state: LayerState
    # per layer: the evaluation whose output drove the update
    records: list[LayerOutput] = field(default_factory=list)


class SMoEStack:
    """Embedding -> T x (SMoE layer under its dynamics) -> logits.

    ``dynamics`` holds one config per layer. Learnable parameters (mu, gamma,
    ZOH networks) are shared across layers when ``share_dynamics`` is set.
    """

    def __init__(self, cfg: ModelConfig, dynamics: list[DynamicsConfig], rng: np.random.Generator):
        if len(dynamics) != cfg.layers:
            raise ValueError(f"{len(dynamics)} dynamics configs for {cfg.layers} layers")
        self.cfg = cfg
        self.dynamics = dynamics
        self.embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab, cfg.dim)), requires_grad=True, name="embed")
        self.layers = [
            SMoELayer.init(cfg.dim, cfg.experts, cfg.k, rng, cfg.expert_kind, cfg.hidden_mult, cfg.expert_out_scale)
            for _ in range(cfg.layers)
        ]
        self.head_W = Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(cfg.dim, cfg.vocab)),
                             requires_grad=True, name="head.W")
        self.head_b = Tensor(np.zeros(cfg.vocab), requires_grad=True, name="head.b")
        self.learned: list[LearnedDynamics | None] = []
        shared: dict[str, LearnedDynamics] = {}
        for dc in dynamics:
            if dc.mode not in ("learnable", "zoh"):
                self.learned.append(None)
                continue
            if cfg.share_dynamics and dc.mode in shared:
                self.learned.append(shared[dc.mode])
                continue
            ld = make_learnable(dc, cfg.dim, rng)
            shared[dc.mode] = ld
            self.learned.append(ld)

    def parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed, "head.W": self.head_W, "head.b": self.head_b}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.parameters().items()})
        seen: set[int] = set()
        for i, ld in enumerate(self.learned):
            if ld is None or id(ld) in seen:
                continue
            seen.add(id(ld))
            out.update({f"dyn{i}.{k}": v for k, v in ld.parameters().items()})
        return out

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[0]}")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def forward(self, tokens: np.ndarray, record: bool = False, dense_diagnostics: bool = False) -> ForwardResult:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        x = self.embed[ids]
        state = LayerState.initial(x)
        records: list[LayerOutput] = []
        for i, (layer, dc, ld) in enumerate(zip(self.layers, self.dynamics, self.learned)):
            evals: list[LayerOutput] = []

            def evaluate(v, layer=layer, evals=evals):
                res = layer.forward(v, dense_diagnostics=dense_diagnostics)
                evals.append(res)
                return res.f_out

            try:
                state = advance(dc, evaluate, state, ld)
            except NonFiniteError as exc:
                raise TrainingDivergence(f"non-finite activations in layer {i}", layer=i) from exc
            if not np.all(np.isfinite(state.x.data)):
                raise TrainingDivergence(f"non-finite activations in layer {i}", layer=i)
            if record:
                records.append(evals[-1])
        try:
            logits = state.x @ self.head_W + self.head_b
        except NonFiniteError as exc:
            raise TrainingDivergence("non-finite logits", layer=len(self.layers)) from exc
        return ForwardResult(logits, state, records)

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
        out = self.forward(inputs)
        return cross_entropy(out.logits, np.asarray(targets).reshape(-1))
