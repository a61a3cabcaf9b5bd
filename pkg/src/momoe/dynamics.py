"""Layer dynamics: how x_t moves to x_{t+1} given the SMoE output.

Every step takes ``f_out``, the SMoE layer output, which is the *negative*
of the gradient-like quantity ``f`` in the optimization view. So the plain
residual update is ``x + gamma * f_out`` and heavy ball is
``p = f_out + mu * p; x = x + gamma * p``.

Steps are written once and work on numpy arrays, python floats, or
autodiff ``Tensor`` objects (for learnable mu/gamma and training).
Variants that re-evaluate the layer at a shifted point (robust, NAG, SAM)
take ``layer``: any callable mapping x to f_out.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Callable

import numpy as np

from .autodiff import ContractError, Tensor

__all__ = [
    "MODES",
    "DynamicsConfig",
    "LayerState",
    "LearnedDynamics",
    "baseline_step",
    "heavy_ball_step",
    "two_form_step",
    "adam_step",
    "robust_params",
    "robust_boundary",
    "robust_momentum_step",
    "robust_two_form_step",
    "nag_step",
    "rmsprop_step",
    "sam_step",
    "time_varying_mu",
    "restart_mu",
    "time_varying_step",
    "zoh_discretize",
    "zoh_params",
    "complex_momentum_step",
    "make_learnable",
    "adam_first_layer_policy",
    "advance",
]

MODES = (
    "baseline",
    "heavy_ball",
    "adam",
    "robust",
    "nag",
    "rmsprop",
    "sam",
    "time_varying",
    "scheduled_restart",
    "zoh",
    "negative",
    "complex",
    "learnable",
)

SAM_NORM_FLOOR = 1e-12


# -- array-or-tensor helpers -----------------------------------------------------

def _sqrt(a):
    return a.sqrt() if isinstance(a, Tensor) else np.sqrt(a)


def _square(a):
    return a.square() if isinstance(a, Tensor) else a * a


def _zeros_like(a):
    if isinstance(a, Tensor):
        return Tensor(np.zeros(a.shape))
    return np.zeros_like(np.asarray(a, dtype=np.float64))


def _data(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def _exp(a):
    return a.exp() if isinstance(a, Tensor) else np.exp(a)


def _softplus(a):
    return a.softplus() if isinstance(a, Tensor) else np.logaddexp(0.0, a)


def _expm1_over(z):
    if isinstance(z, Tensor):
        return z.expm1_over()
    z = float(z)
    return 1.0 + z / 2.0 + z * z / 6.0 if abs(z) < 1e-5 else math.expm1(z) / z


# -- state ----------------------------------------------------------------------

@dataclass
class LayerState:
    """Dynamical state threaded through the layer stack.

    ``m`` is the second-moment slot (Adam, RMSProp); ``p_im`` the imaginary
    part of complex momentum. ``t`` counts layers already applied.
    """

    x: Any
    p: Any
    m: Any
    x_prev: Any
    p_im: Any
    t: int = 0

    @classmethod
    def initial(cls, x) -> "LayerState":
        """Zero momentum and moments; ``x_prev = x`` (so both recurrence forms agree)."""
        return cls(x=x, p=_zeros_like(x), m=_zeros_like(x), x_prev=x, p_im=_zeros_like(x), t=0)

    def advanced(self, x_next, **changes) -> "LayerState":
        return replace(self, x=x_next, x_prev=self.x, t=self.t + 1, **changes)


# -- configuration ------------------------------------------------------------

_MODE_DEFAULTS: dict[str, dict[str, Any]] = {
    "baseline": {"mu": 0.0},
    "heavy_ball": {},
    "adam": {"mu": 0.9, "beta": 0.99, "gamma": 0.1},
    "robust": {},
    "nag": {"mu": 0.7, "gamma": 1.0},
    "rmsprop": {"mu": 0.9, "gamma": 0.1},
    "sam": {"rho": 0.05},
    "time_varying": {},
    "scheduled_restart": {},
    "zoh": {},
    "negative": {"mu": -0.3},
    "complex": {"mu": 0.6, "mu_im": 0.3},
    "learnable": {},
}


@dataclass
class DynamicsConfig:
    """Parameters for one layer's dynamics. Unused fields are ignored by a mode."""

    mode: str = "heavy_ball"
    mu: float = 0.7
    gamma: float = 1.0
    beta: float = 0.99
    eps: float = 1e-8
    kappa: float = 0.0
    rho: float = 0.05
    mu_im: float = 0.0
    robust_p: float = 0.5
    robust_L: float = 1.0
    robust_m: float = 0.1
    restart_period: int = 3
    nag_lookahead_sign: int = -1  # -1: evaluate at x - mu p as written; +1 classical
    learn: str = "both"  # learnable mode: both | gamma | gamma_net
    detach_momentum: bool = False
    allow_unstable: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"dynamics.mode: unknown mode {self.mode!r}")
        if self.mode in ("heavy_ball", "negative", "learnable") and not self.allow_unstable:
            if not -1.0 < self.mu < 1.0:
                raise ContractError("dynamics.mu: heavy ball needs mu in (-1, 1) (set allow_unstable to override)")
        if self.mode == "robust":
            robust_params(self.robust_p, self.robust_L, self.robust_m)
        if self.mode == "adam":
            if not (0.0 <= self.beta < 1.0 and 0.0 <= self.mu < 1.0 and self.eps > 0):
                raise ContractError("dynamics: adam needs beta, mu in [0, 1) and eps > 0")
        if self.mode == "rmsprop" and not 0.0 <= self.mu < 1.0:
            raise ContractError("dynamics.mu: rmsprop needs mu in [0, 1)")
        if self.mode == "sam" and self.rho < 0:
            raise ContractError("dynamics.rho: must be nonnegative")
        if self.restart_period < 1:
            raise ContractError("dynamics.restart_period: must be >= 1")
        if self.nag_lookahead_sign not in (-1, 1):
            raise ContractError("dynamics.nag_lookahead_sign: must be -1 or +1")
        if self.learn not in ("both", "gamma", "gamma_net"):
            raise ContractError(f"dynamics.learn: unknown setting {self.learn!r}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "DynamicsConfig":
        if mode not in MODES:
            raise ContractError(f"dynamics.mode: unknown mode {mode!r}")
        kwargs = {**_MODE_DEFAULTS[mode], **overrides}
        return cls(mode=mode, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"dynamics.{sorted(unknown)[0]}: unknown field")
        d = dict(d)
        mode = d.pop("mode", "heavy_ball")
        return cls.for_mode(mode, **d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- heavy ball and its two-variable form ---------------------------------------

def baseline_step(f_out, state: LayerState, gamma=1.0):
    x_next = state.x + gamma * f_out
    return x_next, state.advanced(x_next)


def heavy_ball_step(f_out, state: LayerState, mu, gamma):
    p = f_out + mu * state.p
    x_next = state.x + gamma * p
    return x_next, state.advanced(x_next, p=p)


def two_form_step(f_grad, x, x_prev, mu, gamma):
    """x - gamma f + mu (x - x_prev), with f the gradient-sign quantity (= -f_out)."""
    return x - gamma * f_grad + mu * (x - x_prev)


# -- Adam / RMSProp --------------------------------------------------------------

def adam_step(f_out, state: LayerState, mu, beta, gamma, eps, kappa):
    """AdamW-style update without bias correction: first and second moments of f_out."""
    p = mu * state.p + (1.0 - mu) * f_out
    m = beta * state.m + (1.0 - beta) * _square(f_out)
    x_next = state.x + gamma * p / (_sqrt(m) + eps) - kappa * state.x
    return x_next, state.advanced(x_next, p=p, m=m)


def rmsprop_step(f_out, state: LayerState, mu, gamma, eps):
    """Squared-magnitude average lives in ``state.m``."""
    m = mu * state.m + (1.0 - mu) * _square(f_out)
    x_next = state.x + gamma * f_out / _sqrt(m + eps)
    return x_next, state.advanced(x_next, m=m)


# -- robust momentum --------------------------------------------------------------

def robust_params(p: float, L: float, m_strong: float) -> tuple[float, float, float, float]:
    """(gamma, mu, alpha, k) of the robust momentum method with k = L / m_strong."""
    if not (0.0 < m_strong < L):
        raise ContractError("robust: need 0 < m_strong < L")
    if not (0.0 < p < 1.0):
        raise ContractError("robust: need p in (0, 1)")
    k = L / m_strong
    if k <= 1.0:
        raise ContractError("robust: condition ratio k must exceed 1")
    gamma = k * (1.0 - p) ** 2 * (1.0 + p) / L
    mu = k * p**3 / (k - 1.0)
    alpha = p**3 / ((k - 1.0) * (1.0 - p) ** 2 * (1.0 + p))
    return gamma, mu, alpha, k


def robust_boundary(p: float, k: float) -> float:
    """Point -v on the negative real axis where the robust design places the stability boundary."""
    return (1.0 + p) * (1.0 - k + 2.0 * k * p - k * p * p) / (2.0 * p)


def robust_momentum_step(layer: Callable, state: LayerState, gamma, mu, alpha):
    """Evaluate the layer at the lookahead y = x + alpha gamma p, then take a heavy-ball step."""
    y = state.x + alpha * gamma * state.p
    return heavy_ball_step(layer(y), state, mu, gamma)


def robust_two_form_step(f_grad: Callable, x, x_prev, gamma, mu, alpha):
    """Two-variable form: y = x + alpha (x - x_prev); x - gamma f(y) + mu (x - x_prev)."""
    y = x + alpha * (x - x_prev)
    return x - gamma * f_grad(y) + mu * (x - x_prev)


# -- Nesterov, SAM ---------------------------------------------------------------

def nag_step(layer: Callable, state: LayerState, mu, gamma, lookahead_sign: int = -1):
    """p = gamma f_out(x + sign mu p) + mu p; x = x + p. Here gamma sits inside p."""
    look = state.x + lookahead_sign * (mu * state.p)
    p = gamma * layer(look) + mu * state.p
    x_next = state.x + p
    return x_next, state.advanced(x_next, p=p)


def _row_norms(a) -> np.ndarray:
    d = _data(a)
    if d.ndim == 0:
        return np.abs(d)
    return np.linalg.norm(d, axis=-1, keepdims=True)


def sam_step(layer: Callable, state: LayerState, rho, gamma):
    """Sharpness-aware step, norms taken per token.

    The ascent perturbation is rho * f / ||f|| with f = -f_out; rows with
    ||f_out|| < 1e-12 are not perturbed. The perturbation is off the tape.
    """
    f0 = _data(layer(state.x))
    norms = _row_norms(f0)
    safe = np.where(norms < SAM_NORM_FLOOR, 1.0, norms)
    shift = np.where(norms < SAM_NORM_FLOOR, 0.0, -rho * f0 / safe)
    x_pert = state.x + (Tensor(shift) if isinstance(state.x, Tensor) else shift)
    x_next = state.x + gamma * layer(x_pert)
    return x_next, state.advanced(x_next)


# -- time-varying and discretized parameters --------------------------------------

def time_varying_mu(t: int) -> float:
    return (t - 1.0) / (t + 2.0)


def restart_mu(t: int, period: int = 3) -> float:
    s = t % period
    return s / (s + 3.0)


def time_varying_step(f_out, state: LayerState, t: int, gamma, restart_period: int | None = None):
    mu = time_varying_mu(t) if restart_period is None else restart_mu(t, restart_period)
    return heavy_ball_step(f_out, state, mu, gamma)


def zoh_discretize(delta_mu, delta_gamma):
    """mu_t = e^{delta_mu}; gamma_t = (e^{delta_mu} - 1) / delta_mu * delta_gamma."""
    return _exp(delta_mu), _expm1_over(delta_mu) * delta_gamma


def zoh_params(delta_raw, mu_raw, gamma_net_out):
    """Zero-order-hold parameters with step size softplus(delta_raw)."""
    delta = _softplus(delta_raw)
    return zoh_discretize(delta * mu_raw, delta * gamma_net_out)


# -- complex momentum -----------------------------------------------------------

def complex_momentum_step(f_out, state: LayerState, mu_re, mu_im, gamma):
    """p <- f_out + mu p over complex mu, stored as (p, p_im); x moves by gamma Re(p)."""
    p_re = f_out + (mu_re * state.p - mu_im * state.p_im)
    p_im = mu_re * state.p_im + mu_im * state.p
    x_next = state.x + gamma * p_re
    return x_next, state.advanced(x_next, p=p_re, p_im=p_im)


# -- learnable parameters ---------------------------------------------------------

@dataclass
class LearnedDynamics:
    """Trainable dynamics scalars for one layer (or shared across layers)."""

    mu: Tensor | None = None
    gamma: Tensor | None = None
    gamma_w: Tensor | None = None  # (D, 1) linear gamma network
    gamma_b: Tensor | None = None  # (1,)
    delta_raw: Tensor | None = None  # ZOH step size before softplus
    kind: str = "both"

    def parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in (
            ("mu", self.mu), ("gamma", self.gamma), ("gamma_w", self.gamma_w),
            ("gamma_b", self.gamma_b), ("delta_raw", self.delta_raw),
        ) if v is not None and v.requires_grad}

    def gamma_net(self, x: Tensor) -> Tensor:
        return x @ self.gamma_w + self.gamma_b


def make_learnable(cfg: DynamicsConfig, dim: int | None = None, rng: np.random.Generator | None = None) -> LearnedDynamics:
    """Trainable mu/gamma for ``learnable`` and ``zoh`` modes.

    learnable/both: scalar mu and gamma; learnable/gamma: scalar gamma, mu fixed;
    learnable/gamma_net: gamma = sigmoid(x w + b) per token, mu fixed.
    zoh: delta = softplus(raw), scalar mu, linear gamma network.
    """
    if cfg.mode == "zoh":
        if dim is None:
            raise ContractError("zoh needs the model width for its gamma network")
        rng = rng or np.random.default_rng(0)
        # init so that delta * mu = ln(0.7) and delta * gamma_net ~= 1 at x = 0
        delta0 = math.log(2.0)
        return LearnedDynamics(
            mu=Tensor(math.log(cfg.mu if 0 < cfg.mu < 1 else 0.7) / delta0, requires_grad=True, name="zoh.mu"),
            gamma_w=Tensor(rng.normal(0.0, 0.01, size=(dim, 1)), requires_grad=True, name="zoh.gamma_w"),
            gamma_b=Tensor(np.array([cfg.gamma / delta0]), requires_grad=True, name="zoh.gamma_b"),
            delta_raw=Tensor(0.0, requires_grad=True, name="zoh.delta_raw"),
            kind="zoh",
        )
    if cfg.mode not in ("heavy_ball", "learnable"):
        raise ContractError(f"mode {cfg.mode!r} has no learnable parameterization")
    if cfg.learn == "both":
        return LearnedDynamics(
            mu=Tensor(cfg.mu, requires_grad=True, name="mu"),
            gamma=Tensor(cfg.gamma, requires_grad=True, name="gamma"),
            kind="both",
        )
    if cfg.learn == "gamma":
        return LearnedDynamics(mu=Tensor(cfg.mu), gamma=Tensor(cfg.gamma, requires_grad=True, name="gamma"), kind="gamma")
    if dim is None:
        raise ContractError("gamma_net needs the model width")
    rng = rng or np.random.default_rng(0)
    return LearnedDynamics(
        mu=Tensor(cfg.mu),
        gamma_w=Tensor(rng.normal(0.0, 0.01, size=(dim, 1)), requires_grad=True, name="gamma_w"),
        gamma_b=Tensor(np.zeros(1), requires_grad=True, name="gamma_b"),
        kind="gamma_net",
    )


def adam_first_layer_policy(num_layers: int, enabled: bool = True, rest: str = "heavy_ball") -> list[str]:
    """Adam in layer 0 and heavy ball afterwards (or heavy ball everywhere when disabled)."""
    if num_layers < 1:
        raise ContractError("need at least one dynamics layer")
    modes = [rest] * num_layers
    if enabled:
        modes[0] = "adam"
    return modes


# -- dispatcher -----------------------------------------------------------------

def advance(
    cfg: DynamicsConfig,
    layer: Callable,
    state: LayerState,
    learned: LearnedDynamics | None = None,
) -> LayerState:
    """Apply one layer under ``cfg``; ``layer(x)`` returns the SMoE output at x."""
    mode = cfg.mode
    t = state.t
    if mode == "baseline":
        _, new = baseline_step(layer(state.x), state, cfg.gamma)
    elif mode in ("heavy_ball", "negative"):
        _, new = heavy_ball_step(layer(state.x), state, cfg.mu, cfg.gamma)
    elif mode == "adam":
        _, new = adam_step(layer(state.x), state, cfg.mu, cfg.beta, cfg.gamma, cfg.eps, cfg.kappa)
    elif mode == "robust":
        gamma, mu, alpha, _ = robust_params(cfg.robust_p, cfg.robust_L, cfg.robust_m)
        _, new = robust_momentum_step(layer, state, gamma, mu, alpha)
    elif mode == "nag":
        _, new = nag_step(layer, state, cfg.mu, cfg.gamma, cfg.nag_lookahead_sign)
    elif mode == "rmsprop":
        _, new = rmsprop_step(layer(state.x), state, cfg.mu, cfg.gamma, cfg.eps)
    elif mode == "sam":
        _, new = sam_step(layer, state, cfg.rho, cfg.gamma)
    elif mode == "time_varying":
        _, new = time_varying_step(layer(state.x), state, t, cfg.gamma)
    elif mode == "scheduled_restart":
        _, new = time_varying_step(layer(state.x), state, t, cfg.gamma, cfg.restart_period)
    elif mode == "complex":
        _, new = complex_momentum_step(layer(state.x), state, cfg.mu, cfg.mu_im, cfg.gamma)
    elif mode == "learnable":
        if learned is None:
            raise ContractError("learnable mode needs LearnedDynamics")
        if learned.kind == "gamma_net":
            gamma = learned.gamma_net(state.x).sigmoid()
        else:
            gamma = learned.gamma
        _, new = heavy_ball_step(layer(state.x), state, learned.mu, gamma)
    elif mode == "zoh":
        if learned is None:
            raise ContractError("zoh mode needs LearnedDynamics")
        mu_t, gamma_t = zoh_params(learned.delta_raw, learned.mu, learned.gamma_net(state.x))
        _, new = heavy_ball_step(layer(state.x), state, mu_t, gamma_t)
    else:  # pragma: no cover - guarded by DynamicsConfig
        raise ContractError(mode)
    if cfg.detach_momentum and isinstance(new.p, Tensor):
        new = replace(new, p=new.p.detach(), m=new.m.detach() if isinstance(new.m, Tensor) else new.m,
                      p_im=new.p_im.detach() if isinstance(new.p_im, Tensor) else new.p_im)
    return new
