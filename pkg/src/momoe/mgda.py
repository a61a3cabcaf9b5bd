"""Multi-objective reference machinery: Pareto stationarity and min-norm descent.

Objectives are quadratics F_i(x) = 1/2 (x - c_i)^T H_i (x - c_i), whose
gradients H_i (x - c_i) are exact, so every claim is checkable.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import ContractError

__all__ = [
    "ObjectiveSet",
    "MinNormResult",
    "local_gradients",
    "min_norm_point",
    "segment_min_norm",
    "simplex_grid_min_norm",
    "is_pareto_stationary",
    "mgda_direction",
    "mgda_step",
    "analogy_probe",
    "ProbeReport",
    "router_vs_oracle",
]

ZERO_GRAD = 1e-12


@dataclass
class ObjectiveSet:
    centers: np.ndarray  # (E, N)
    hessians: np.ndarray  # (E, N, N)

    def __post_init__(self) -> None:
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.hessians = np.asarray(self.hessians, dtype=np.float64)
        e, n = self.centers.shape
        if self.hessians.shape != (e, n, n):
            raise ContractError(f"hessians shape {self.hessians.shape} != {(e, n, n)}")
        for i, H in enumerate(self.hessians):
            if not np.allclose(H, H.T, atol=1e-12, rtol=0):
                raise ContractError(f"H_{i} not symmetric")
            try:
                np.linalg.cholesky(H)
            except np.linalg.LinAlgError as exc:
                raise ContractError(f"H_{i} not positive definite") from exc

    @property
    def num_objectives(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def values(self, x: np.ndarray) -> np.ndarray:
        d = np.asarray(x, dtype=np.float64) - self.centers
        return 0.5 * np.einsum("ei,eij,ej->e", d, self.hessians, d)

    @classmethod
    def random(cls, num: int, dim: int, rng: np.random.Generator, cond: float = 10.0) -> "ObjectiveSet":
        centers = rng.normal(size=(num, dim))
        hs = []
        for _ in range(num):
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            eig = np.exp(rng.uniform(0.0, np.log(cond), size=dim))
            hs.append((q * eig) @ q.T)
        hs = np.array([(h + h.T) / 2 for h in hs])
        return cls(centers, hs)


def local_gradients(obj: ObjectiveSet, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(grads, normalized grads, zero flags). Rows with ||f_i|| <= 1e-12 are flagged and left zero."""
    x = np.asarray(x, dtype=np.float64)
    grads = np.einsum("eij,ej->ei", obj.hessians, x - obj.centers)
    norms = np.linalg.norm(grads, axis=1)
    zero = norms <= ZERO_GRAD
    unit = np.zeros_like(grads)
    unit[~zero] = grads[~zero] / norms[~zero, None]
    return grads, unit, zero


class MinNormResult(NamedTuple):
    alpha: np.ndarray
    point: np.ndarray
    gap: float  # <v, v> - min_i <v, v_i>; zero at the optimum
    iterations: int
    converged: bool


def min_norm_point(
    vectors,
    max_iter: int = 10_000,
    tol: float = 1e-10,
) -> MinNormResult:
    """Minimum-norm point of the convex hull of ``vectors`` (rows).

    Frank-Wolfe on the simplex with away steps and exact line search along
    the segment between the iterate and a vertex. Stops when the duality gap
    drops below ``tol``; otherwise returns the best iterate with
    ``converged=False``.
    """
    V = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    e = V.shape[0]
    if e < 1:
        raise ContractError("need at least one vector")
    M = V @ V.T
    alpha = np.zeros(e)
    alpha[int(np.argmin(np.diag(M)))] = 1.0
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = M @ alpha
        vv = float(alpha @ g)
        s = int(np.argmin(g))
        gap = vv - g[s]
        if gap <= tol:
            break
        active = np.flatnonzero(alpha > 0)
        a = int(active[np.argmax(g[active])])
        away_gap = g[a] - vv
        if gap >= away_gap:
            d = -alpha.copy()
            d[s] += 1.0
            step_max = 1.0
        else:
            d = alpha.copy()
            d[a] -= 1.0
            step_max = alpha[a] / (1.0 - alpha[a]) if alpha[a] < 1.0 else np.inf
        curv = float(d @ M @ d)
        if curv <= 0:
            step = step_max
        else:
            step = min(max(-float(d @ g) / curv, 0.0), step_max)
        alpha = alpha + step * d
        alpha[alpha < 1e-15] = 0.0
        alpha /= alpha.sum()
    else:
        g = M @ alpha
        gap = float(alpha @ g - g.min())
    return MinNormResult(alpha, alpha @ V, float(max(gap, 0.0)), it, bool(gap <= tol))


def segment_min_norm(v1, v2) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form projection of the origin onto the segment [v1, v2]."""
    v1, v2 = np.asarray(v1, dtype=np.float64), np.asarray(v2, dtype=np.float64)
    diff = v1 - v2
    denom = float(diff @ diff)
    a = 0.5 if denom == 0 else float(np.clip(-(v2 @ diff) / denom, 0.0, 1.0))
    alpha = np.array([a, 1.0 - a])
    return alpha, a * v1 + (1.0 - a) * v2


def simplex_grid_min_norm(vectors, step: float = 1e-3) -> tuple[float, np.ndarray]:
    """Exact minimum of ||sum_i a_i v_i|| over the simplex grid with spacing ``step``.

    The first E-2 coordinates are enumerated; the last two share the remaining
    mass and their split is a convex 1-d quadratic, so only the two grid points
    around its continuous minimizer need checking. Meant for E <= 4.
    """
    V = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    e = V.shape[0]
    n = int(round(1.0 / step))
    if e == 1:
        return float(np.linalg.norm(V[0])), np.ones(1)
    grids = np.meshgrid(*([np.arange(n + 1)] * (e - 2)), indexing="ij") if e > 2 else []
    heads = np.stack([g.reshape(-1) for g in grids], axis=1) if e > 2 else np.zeros((1, 0), dtype=np.int64)
    rest = n - heads.sum(axis=1)
    heads, rest = heads[rest >= 0], rest[rest >= 0]
    a_head = heads / n
    r = rest / n
    # alpha = [a_head, s, r - s]; ||.||^2 = c0 + c1 s + c2 s^2
    u = V[e - 2] - V[e - 1]
    w = a_head @ V[: e - 2] + r[:, None] * V[e - 1] if e > 2 else r[:, None] * V[e - 1]
    c2 = float(u @ u)
    c1 = 2.0 * (w @ u)
    s_star = -c1 / (2.0 * c2) if c2 > 0 else np.zeros(len(r))
    best = np.full(len(r), np.inf)
    best_s = np.zeros(len(r))
    for cand in (np.floor(s_star * n), np.ceil(s_star * n)):
        k = np.clip(cand, 0, rest)
        s = k / n
        pts = w + s[:, None] * u
        val = np.einsum("ij,ij->i", pts, pts)
        better = val < best
        best[better], best_s[better] = val[better], s[better]
    i = int(np.argmin(best))
    alpha = np.concatenate([a_head[i], [best_s[i], r[i] - best_s[i]]])
    return float(np.sqrt(max(best[i], 0.0))), alpha


def is_pareto_stationary(obj: ObjectiveSet, x, tol: float = 1e-8) -> bool:
    if tol <= 0:
        raise ContractError("tol must be positive")
    grads, _, _ = local_gradients(obj, x)
    res = min_norm_point(grads)
    return float(np.linalg.norm(res.point)) < tol


@dataclass
class Direction:
    direction: np.ndarray  # sum_i alpha_i f_i over kept objectives
    alpha: np.ndarray  # length E, zero for dropped objectives
    dropped: np.ndarray  # bool flags of objectives excluded (vanishing gradient)
    result: MinNormResult | None


def mgda_direction(obj: ObjectiveSet, x, normalize: bool = True) -> Direction:
    """Min-norm direction over (normalized) gradients.

    With ``normalize`` on, objectives whose gradient vanishes are dropped from
    the hull since their unit gradient is undefined.
    """
    grads, unit, zero = local_gradients(obj, x)
    alpha = np.zeros(obj.num_objectives)
    if normalize:
        keep = np.flatnonzero(~zero)
        if keep.size == 0:
            return Direction(np.zeros(obj.dim), alpha, zero, None)
        res = min_norm_point(unit[keep])
        alpha[keep] = res.alpha
        return Direction(res.point, alpha, zero, res)
    res = min_norm_point(grads)
    return Direction(res.point, res.alpha, np.zeros(obj.num_objectives, dtype=bool), res)


def mgda_step(obj: ObjectiveSet, x, gamma: float, normalize: bool = True) -> np.ndarray:
    """x - gamma * sum_i alpha_i* f~_i(x) (raw gradients when ``normalize`` is off)."""
    d = mgda_direction(obj, x, normalize)
    return np.asarray(x, dtype=np.float64) - gamma * d.direction


def router_vs_oracle(layer, obj: ObjectiveSet, x) -> dict[str, np.ndarray]:
    """Router weights next to the oracle coefficients over raw expert gradients at ``x``.

    Purely descriptive: nothing here claims the two should match.
    """
    from .layers import route

    x = np.asarray(x, dtype=np.float64)
    dec = route(layer.router, x, k=layer.num_experts)
    grads, _, _ = local_gradients(obj, x)
    res = min_norm_point(grads)
    return {"router": dec.weights.data.copy(), "oracle": res.alpha}


@dataclass
class ProbeReport:
    rows: list[tuple[int, str, float]]  # (layer, checkpoint, mean_output_norm)
    monotone_fraction: float  # share of consecutive layers where the norm decreases
    monotone_fraction_excl_last: float

    def to_csv(self, meta: str | None = None) -> str:
        buf = io.StringIO()
        if meta:
            buf.write(f"# {meta}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "checkpoint", "mean_output_norm"])
        for layer, ckpt, val in self.rows:
            w.writerow([layer, ckpt, repr(float(val))])
        return buf.getvalue()


def _decrease_fraction(norms: Sequence[float]) -> float:
    if len(norms) < 2:
        return float("nan")
    return sum(b < a for a, b in zip(norms, norms[1:])) / (len(norms) - 1)


def analogy_probe(model, batches: dict[str, np.ndarray] | np.ndarray) -> ProbeReport:
    """Mean layer-output norm per layer for each checkpoint batch.

    ``batches`` maps checkpoint tags to token arrays (a bare array is tagged "0").
    The decrease statistic is descriptive; the last layer is also reported
    excluded because overshooting there is expected.
    """
    from .diagnostics import record_norms

    if not isinstance(batches, dict):
        batches = {"0": batches}
    rows: list[tuple[int, str, float]] = []
    fracs, fracs_ex = [], []
    for tag, batch in batches.items():
        trace = record_norms(model, batch, checkpoint=tag)
        rows.extend(trace)
        norms = [v for _, _, v in trace]
        fracs.append(_decrease_fraction(norms))
        fracs_ex.append(_decrease_fraction(norms[:-1]))
    return ProbeReport(rows, float(np.nanmean(fracs)) if fracs else float("nan"),
                       float(np.nanmean(fracs_ex)) if len(rows) > 2 else float("nan"))
