"""Norm-ordered expert load and per-layer output-norm traces."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

__all__ = [
    "LoadHistogram",
    "record_selection",
    "flatness_score",
    "record_norms",
    "norm_trace_csv",
]


@dataclass
class LoadHistogram:
    """Selection counts per layer, bucketed by the selected expert's norm rank.

    Rank 0 is the expert with the largest output norm for that token.
    """

    num_experts: int
    counts: dict[int, np.ndarray] = field(default_factory=dict)
    tokens: dict[int, int] = field(default_factory=dict)

    def bucket(self, layer: int) -> np.ndarray:
        if layer not in self.counts:
            self.counts[layer] = np.zeros(self.num_experts, dtype=np.int64)
            self.tokens[layer] = 0
        return self.counts[layer]

    def proportions(self, layer: int) -> np.ndarray:
        c = self.counts[layer].astype(np.float64)
        return c / c.sum()

    def merge(self, other: "LoadHistogram") -> "LoadHistogram":
        if other.num_experts != self.num_experts:
            raise ContractError("cannot merge histograms with different expert counts")
        out = LoadHistogram(self.num_experts)
        for layer in sorted(set(self.counts) | set(other.counts)):
            out.counts[layer] = (self.counts.get(layer, 0) + other.counts.get(layer, 0)).astype(np.int64)
            out.tokens[layer] = self.tokens.get(layer, 0) + other.tokens.get(layer, 0)
        return out

    def to_csv(self, meta: str | None = None) -> str:
        buf = io.StringIO()
        if meta:
            buf.write(f"# {meta}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "rank", "proportion"])
        for layer in sorted(self.counts):
            for rank, p in enumerate(self.proportions(layer)):
                w.writerow([layer, rank, repr(float(p))])
        return buf.getvalue()


def norm_ranks(norms: np.ndarray) -> np.ndarray:
    """rank[n, e] = position of expert e when token n's norms are sorted descending (ties by index)."""
    order = np.argsort(-norms, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(norms.shape[1])[None, :].repeat(norms.shape[0], 0), axis=1)
    return ranks


def record_selection(hist: LoadHistogram, layer: int, selected: np.ndarray, norms: np.ndarray) -> None:
    """Add one count per selected expert to the bucket of its per-token norm rank.

    ``selected`` is (N, K) expert indices; ``norms`` is (N, E) raw expert-output norms.
    """
    selected = np.atleast_2d(selected)
    norms = np.atleast_2d(norms)
    if norms.shape[1] != hist.num_experts:
        raise ContractError("norm matrix width differs from the expert count")
    ranks = norm_ranks(norms)
    picked = np.take_along_axis(ranks, selected, axis=1)
    bucket = hist.bucket(layer)
    np.add.at(bucket, picked.reshape(-1), 1)
    hist.tokens[layer] += selected.shape[0]


def flatness_score(proportions: np.ndarray) -> float:
    """Total-variation distance to uniform; 0 means perfectly balanced across norm ranks."""
    p = np.asarray(proportions, dtype=np.float64)
    return 0.5 * float(np.abs(p - 1.0 / p.size).sum())


def record_norms(model, tokens: np.ndarray, checkpoint: str | int = 0) -> list[tuple[int, str, float]]:
    """Rows (layer, checkpoint, mean over tokens of ||f_out||) for one batch."""
    out = model.forward(tokens, record=True)
    rows = []
    for layer, rec in enumerate(out.records):
        norms = np.linalg.norm(rec.f_out.data.reshape(-1, rec.f_out.shape[-1]), axis=1)
        rows.append((layer, str(checkpoint), float(norms.mean())))
    return rows


def norm_trace_csv(rows, meta: str | None = None) -> str:
    buf = io.StringIO()
    if meta:
        buf.write(f"# {meta}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "checkpoint", "mean_output_norm"])
    for layer, ckpt, val in rows:
        w.writerow([layer, ckpt, repr(float(val))])
    return buf.getvalue()
