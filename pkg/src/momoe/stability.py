"""Stability of the linearized momentum recurrence.

Near a stationary point each eigen-direction of the layer Jacobian obeys
``x_{t+1} = x_t - gs x_t + mu (x_t - x_{t-1})`` with ``gs = gamma * sigma``.
Its companion matrix ``[[0, 1], [-mu, 1 + mu - gs]]`` has spectral radius
below one exactly when ``-1 < mu < 1`` and ``0 < gs < 2 + 2 mu``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError, Tensor, backward

__all__ = [
    "CompanionMatrix",
    "StabilityVerdict",
    "eigenvalues",
    "spectral_radius",
    "analytic_region",
    "appendix_case",
    "simulate_scalar",
    "decay_rate",
    "region_sweep",
    "default_grid",
    "stable_measure",
    "sweep_to_csv",
    "agreement",
    "jacobian",
    "jacobian_spectrum",
    "SWEEP_HEADER",
]

SWEEP_HEADER = (
    "mu", "gamma_sigma", "lambda1_re", "lambda1_im", "lambda2_re", "lambda2_im",
    "spectral_radius", "analytic", "empirical",
)

EMPIRICAL_STEPS = 500
EMPIRICAL_DECAY = 1e-3
GUARD_BAND = 1e-2


@dataclass(frozen=True)
class CompanionMatrix:
    mu: float
    gamma_sigma: float

    @property
    def entries(self) -> np.ndarray:
        return np.array([[0.0, 1.0], [-self.mu, 1.0 + self.mu - self.gamma_sigma]])

    @property
    def trace(self) -> float:
        return 1.0 + self.mu - self.gamma_sigma

    @property
    def determinant(self) -> float:
        return self.mu


@dataclass(frozen=True)
class StabilityVerdict:
    mu: float
    gamma_sigma: float
    lambda1: complex
    lambda2: complex
    spectral_radius: float
    analytic_stable: bool
    empirical_stable: bool | None = None

    @property
    def near_boundary(self) -> bool:
        return abs(self.spectral_radius - 1.0) < GUARD_BAND


def eigenvalues(mu: float, gamma_sigma: float) -> tuple[complex, complex]:
    """Closed-form roots of lambda^2 - (1 + mu - gs) lambda + mu."""
    tr = 1.0 + mu - gamma_sigma
    disc = tr * tr - 4.0 * mu
    if disc >= 0:
        r = math.sqrt(disc)
        return complex((tr + r) / 2.0), complex((tr - r) / 2.0)
    r = math.sqrt(-disc)
    return complex(tr / 2.0, r / 2.0), complex(tr / 2.0, -r / 2.0)


def spectral_radius(mu: float, gamma_sigma: float) -> float:
    l1, l2 = eigenvalues(mu, gamma_sigma)
    return max(abs(l1), abs(l2))


def analytic_region(mu: float, gamma_sigma: float) -> bool:
    return -1.0 < mu < 1.0 and 0.0 < gamma_sigma < 2.0 + 2.0 * mu


def appendix_case(mu: float, gamma_sigma: float) -> str:
    """Which branch of the case analysis (mu, gs) falls in.

    'nonpositive' (gs <= 0), '1a' (mu >= (1 + sqrt gs)^2),
    '1bi' / '1bii' (mu <= (1 - sqrt gs)^2, sign of 1 + mu - gs),
    '2' (complex eigenvalues).
    """
    if gamma_sigma <= 0:
        return "nonpositive"
    s = math.sqrt(gamma_sigma)
    if mu >= (1.0 + s) ** 2:
        return "1a"
    if mu <= (1.0 - s) ** 2:
        return "1bi" if 1.0 + mu - gamma_sigma >= 0 else "1bii"
    return "2"


def simulate_scalar(
    mu: float,
    gamma_sigma: float,
    steps: int = EMPIRICAL_STEPS,
    x0: float = 1.0,
    decay: float = EMPIRICAL_DECAY,
) -> tuple[np.ndarray, bool]:
    """Run the scalar recurrence from x_{-1} = x_0 and classify it.

    Stable means max(|x_{T-1}|, |x_T|) < decay * |x_0|. Overflow counts as unstable.
    """
    if steps < 2:
        raise ContractError("need at least 2 steps")
    traj = np.empty(steps + 1)
    traj[0] = x0
    prev, cur = x0, x0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, steps + 1):
            nxt = cur - gamma_sigma * cur + mu * (cur - prev)
            prev, cur = cur, nxt
            traj[t] = cur
    tail = np.abs(traj[-2:])
    stable = bool(np.all(np.isfinite(tail)) and tail.max() < decay * abs(x0))
    return traj, stable


def decay_rate(mu: float, gamma_sigma: float, steps: int = 400, x0: float = 1.0) -> float:
    """Per-step contraction estimated by a log-linear fit of the state norm over the tail.

    The state norm sqrt(x_t^2 + x_{t-1}^2) keeps oscillating trajectories
    away from zero crossings; the fit stops before values underflow.
    """
    traj, _ = simulate_scalar(mu, gamma_sigma, steps, x0)
    state = np.sqrt(traj[1:] ** 2 + traj[:-1] ** 2)
    t = np.arange(1, steps + 1)
    ok = np.isfinite(state) & (state > 1e-250)
    t, state = t[ok], state[ok]
    start = len(t) // 4
    slope = np.polyfit(t[start:], np.log(state[start:]), 1)[0]
    return float(math.exp(slope))


def default_grid() -> tuple[np.ndarray, np.ndarray]:
    """mu in [-1.5, 1.5], gs in [-0.5, 4.5], both with step 0.05 (61 x 101 cells)."""
    mus = np.round(np.linspace(-1.5, 1.5, 61), 10)
    gss = np.round(np.linspace(-0.5, 4.5, 101), 10)
    return mus, gss


def region_sweep(
    mu_grid: Iterable[float],
    gs_grid: Iterable[float],
    steps: int = EMPIRICAL_STEPS,
) -> list[StabilityVerdict]:
    """Verdicts for every (mu, gs) cell, sorted by (mu, gs)."""
    rows = []
    for mu in sorted(mu_grid):
        for gs in sorted(gs_grid):
            l1, l2 = eigenvalues(mu, gs)
            _, emp = simulate_scalar(mu, gs, steps)
            rows.append(StabilityVerdict(
                float(mu), float(gs), l1, l2, max(abs(l1), abs(l2)), analytic_region(mu, gs), emp,
            ))
    return rows


def agreement(rows: Sequence[StabilityVerdict], guard: float = GUARD_BAND) -> dict[str, float]:
    """Agreement rates outside the guard band |radius - 1| < guard."""
    kept = [r for r in rows if abs(r.spectral_radius - 1.0) >= guard]
    if not kept:
        return {"cells": 0, "excluded": len(rows), "analytic_vs_spectral": float("nan"),
                "analytic_vs_empirical": float("nan")}
    spec = sum(r.analytic_stable == (r.spectral_radius < 1.0) for r in kept) / len(kept)
    emp = sum(r.analytic_stable == r.empirical_stable for r in kept) / len(kept)
    return {"cells": len(kept), "excluded": len(rows) - len(kept),
            "analytic_vs_spectral": spec, "analytic_vs_empirical": emp}


ROUNDOFF = 1e-12


def stable_measure(rows: Sequence[StabilityVerdict], mu: float, step: float) -> float:
    """Length of the gs-interval judged stable in the grid row at ``mu``.

    A cell counts when its radius is below 1 by more than roundoff, so cells
    sitting exactly on the boundary (radius 1 up to float error) are not counted.
    """
    count = sum(1 for r in rows if abs(r.mu - mu) < 1e-9 and r.spectral_radius < 1.0 - ROUNDOFF)
    return count * step


def _fmt(v: float) -> str:
    return repr(float(v))


def sweep_to_csv(rows: Sequence[StabilityVerdict], meta: str | None = None) -> str:
    buf = io.StringIO()
    if meta:
        buf.write(f"# {meta}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([
            _fmt(r.mu), _fmt(r.gamma_sigma),
            _fmt(r.lambda1.real), _fmt(r.lambda1.imag), _fmt(r.lambda2.real), _fmt(r.lambda2.imag),
            _fmt(r.spectral_radius), int(r.analytic_stable), int(bool(r.empirical_stable)),
        ])
    return buf.getvalue()


# -- Jacobian of an SMoE layer ----------------------------------------------------

MAX_JACOBIAN_DIM = 64


def jacobian(fn, x: np.ndarray) -> np.ndarray:
    """Dense Jacobian d fn(x) / dx of a Tensor -> Tensor map, one reverse pass per output."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    rows = []
    for i in range(d):
        xt = Tensor(x.copy(), requires_grad=True)
        out = fn(xt).reshape(-1)
        backward(out[i])
        rows.append(np.zeros(d) if xt.grad is None else xt.grad.reshape(-1))
    return np.stack(rows)


def jacobian_spectrum(layer, x: np.ndarray, max_dim: int = MAX_JACOBIAN_DIM) -> np.ndarray:
    """Eigenvalues of grad_x f at x, where f = -(layer output).

    The routing set is whatever TopK picks at x and is held fixed along the
    differentiation. Warns when the eigenvector basis is numerically rank
    deficient (a defective spectrum).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size > max_dim:
        raise ContractError(f"Jacobian size {x.size} exceeds cap {max_dim}")
    J = -jacobian(lambda v: layer(v).f_out, x)
    vals, vecs = np.linalg.eig(J)
    if np.linalg.matrix_rank(vecs, tol=1e-8) < len(vals):
        warnings.warn("Jacobian appears defective (eigenvectors not independent)", RuntimeWarning)
    order = np.lexsort((vals.imag, vals.real))
    return vals[order]

