"""Seeded experiment runner.

All randomness of a tiny-LM run comes from one generator seeded with
``trainer.seed``, drawn in this order: corpus, model initialization, then one
training permutation per epoch. The corruption mask uses its own seed
(``eval.corruption_seed``, defaulting to ``trainer.seed + 1``) so that changing
the swap rate leaves training untouched.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import SGD, Adam, Tensor, TrainingDivergence, backward, cross_entropy
from .config import ExperimentConfig
from .diagnostics import LoadHistogram, norm_trace_csv, record_norms, record_selection
from .dynamics import LayerState, advance, make_learnable
from .layers import save_checkpoint
from .mgda import local_gradients, min_norm_point
from .model import SMoEStack
from .tasks import build_quadratic_task, build_tiny_lm_task, corrupt_tokens, unigram_entropy

__all__ = ["OUTPUT_ROOT_ENV", "RunResult", "resolve_output_dir", "run_experiment"]

OUTPUT_ROOT_ENV = "MOMOE_OUTPUT_ROOT"


@dataclass
class RunResult:
    output_dir: Path
    metrics: dict[str, float] = field(default_factory=dict)
    diverged: bool = False
    divergence: dict | None = None

    @property
    def exit_code(self) -> int:
        return 3 if self.diverged else 0


def resolve_output_dir(cfg: ExperimentConfig, root: str | Path | None = None) -> Path:
    out = Path(cfg.output_dir)
    if out.is_absolute():
        return out
    base = Path(root) if root is not None else Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    return base / out


def _csv(header: list[str], rows, digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, root: str | Path | None = None) -> RunResult:
    out = resolve_output_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "divergence.json").unlink(missing_ok=True)
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    # non-finite values are detected explicitly and reported as divergence
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if cfg.task.kind == "quadratic_multiobj":
            return _run_quadratic(cfg, out)
        return _run_tiny_lm(cfg, out)


# -- quadratic multi-objective task ---------------------------------------------

def _run_quadratic(cfg: ExperimentConfig, out: Path) -> RunResult:
    digest = cfg.digest()
    task = build_quadratic_task(cfg.task.objectives, cfg.task.dim, cfg.trainer.seed, k=min(cfg.model.k, cfg.task.objectives),
                                spectrum=cfg.task.spectrum)
    rng = np.random.default_rng(cfg.trainer.seed + 1)
    x0 = rng.normal(size=cfg.task.dim) * cfg.task.x0_scale
    fn = task.layer_fn()
    shared: dict = {}
    learned = []
    for d in cfg.dynamics:
        if d.mode in ("learnable", "zoh") and d.mode not in shared:
            shared[d.mode] = make_learnable(d, cfg.task.dim, rng)
        learned.append(shared.get(d.mode))
    state = LayerState.initial(Tensor(x0[None, :]))
    obj = task.objectives
    e = obj.num_objectives

    def row(t: int, x: np.ndarray) -> list:
        grads, _, _ = local_gradients(obj, x)
        mn = float(np.linalg.norm(min_norm_point(grads).point))
        return [t, float(np.linalg.norm(x)), mn] + [float(v) for v in obj.values(x)]

    rows = [row(0, x0)]
    result = RunResult(out)
    try:
        for t, (dc, ld) in enumerate(zip(cfg.dynamics, learned)):
            state = advance(dc, fn, state, ld)
            x = state.x.data if isinstance(state.x, Tensor) else state.x
            if not np.all(np.isfinite(x)):
                raise TrainingDivergence("non-finite state", layer=t, step=0)
            rows.append(row(t + 1, np.asarray(x).reshape(-1)))
    except (TrainingDivergence, FloatingPointError) as exc:
        return _diverged(result, out, exc, getattr(exc, "layer", None), 0)
    header = ["layer", "x_norm", "min_norm_gradient"] + [f"objective_{i}" for i in range(e)]
    _write(out / "trajectory.csv", _csv(header, rows, digest))
    last = rows[-1]
    result.metrics = {"final_x_norm": last[1], "final_min_norm_gradient": last[2],
                      "final_objective_sum": float(sum(last[3:]))}
    _write(out / "metrics.csv", _csv(["metric", "value"], sorted(result.metrics.items()), digest))
    return result


# -- tiny language model ---------------------------------------------------------

def _split(seqs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return seqs[:, :-1], seqs[:, 1:]


def _eval_loss(model: SMoEStack, seqs: np.ndarray, batch: int = 64) -> float:
    inputs, targets = _split(seqs)
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch):
        logits = model.forward(inputs[i:i + batch]).logits
        n = targets[i:i + batch].size
        total += cross_entropy(logits, targets[i:i + batch].reshape(-1)).item() * n
        count += n
    return total / count


def _ppl(loss: float) -> float:
    return math.exp(loss) if loss < 700.0 else math.inf


def _diverged(result: RunResult, out: Path, exc: Exception, layer, step) -> RunResult:
    report = {"message": str(exc), "layer": layer, "step": step}
    _write(out / "divergence.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    result.diverged = True
    result.divergence = report
    return result


def _run_tiny_lm(cfg: ExperimentConfig, out: Path) -> RunResult:
    digest = cfg.digest()
    tc, tr = cfg.task, cfg.trainer
    rng = np.random.default_rng(tr.seed)
    corpus = build_tiny_lm_task(tc.vocab, tc.seq_len, rng, tc.train_sequences, tc.valid_sequences, tc.branching)
    model = SMoEStack(cfg.model, cfg.dynamics, rng)
    params = list(model.parameters().values())
    if tr.optimizer == "adam":
        opt = Adam(params, lr=tr.lr, weight_decay=tr.weight_decay)
    else:
        opt = SGD(params, lr=tr.lr, weight_decay=tr.weight_decay)

    probe = corpus.valid[: cfg.diagnostics.probe_sequences, :-1]
    loss_rows: list[list] = []
    norm_rows: list[tuple[int, str, float]] = []
    result = RunResult(out)
    step = 0
    train_inputs, train_targets = _split(corpus.train)
    n = len(corpus.train)
    t_start = time.perf_counter()
    step_times: list[float] = []
    try:
        for epoch in range(tr.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, tr.batch_size):
                if tr.max_steps is not None and step >= tr.max_steps:
                    break
                idx = perm[start:start + tr.batch_size]
                t0 = time.perf_counter()
                try:
                    logits = model.forward(train_inputs[idx]).logits
                    loss = cross_entropy(logits, train_targets[idx].reshape(-1))
                except TrainingDivergence as exc:
                    exc.step = step
                    raise
                if not math.isfinite(loss.item()):
                    raise TrainingDivergence("non-finite loss", layer=None, step=step)
                backward(loss)
                try:
                    opt.step()
                except TrainingDivergence as exc:
                    exc.step = step
                    raise
                opt.zero_grad()
                step_times.append(time.perf_counter() - t0)
                loss_rows.append([step, epoch, "train", loss.item()])
                step += 1
                every = cfg.diagnostics.every
                if every and step % every == 0:
                    norm_rows.extend(record_norms(model, probe, checkpoint=f"step{step}"))
            vloss = _eval_loss(model, corpus.valid)
            if not math.isfinite(vloss):
                raise TrainingDivergence("non-finite validation loss", layer=None, step=step)
            loss_rows.append([step, epoch, "valid", vloss])
            if not cfg.diagnostics.every:
                norm_rows.extend(record_norms(model, probe, checkpoint=f"epoch{epoch}"))
    except TrainingDivergence as exc:
        _write(out / "loss_curve.csv", _csv(["step", "epoch", "split", "loss"], loss_rows, digest))
        return _diverged(result, out, exc, exc.layer, exc.step)
    train_seconds = time.perf_counter() - t_start

    clean = _eval_loss(model, corpus.valid)
    cseed = cfg.eval.corruption_seed if cfg.eval.corruption_seed is not None else tr.seed + 1
    corrupted_valid = corrupt_tokens(corpus.valid, cfg.eval.swap_rate, corpus.sentinel, cseed)
    corrupted = _eval_loss(model, corrupted_valid)
    uni = unigram_entropy(corpus.train[:, 1:])
    result.metrics = {
        "valid_loss_clean": clean,
        "valid_ppl_clean": _ppl(clean),
        "valid_loss_corrupted": corrupted,
        "valid_ppl_corrupted": _ppl(corrupted),
        "unigram_entropy": uni,
        "beats_unigram": float(clean < uni),
        "swap_rate": cfg.eval.swap_rate,
        "steps": float(step),
    }

    hist = LoadHistogram(cfg.model.experts)
    diag = model.forward(corpus.valid[:, :-1], record=True, dense_diagnostics=True)
    for layer, rec in enumerate(diag.records):
        record_selection(hist, layer, rec.decision.selected, rec.expert_norms)

    _write(out / "loss_curve.csv", _csv(["step", "epoch", "split", "loss"], loss_rows, digest))
    _write(out / "metrics.csv", _csv(["metric", "value"], sorted(result.metrics.items()), digest))
    _write(out / "load_histogram.csv", hist.to_csv(f"config_hash={digest}"))
    _write(out / "norm_trace.csv", norm_trace_csv(norm_rows, f"config_hash={digest}"))
    save_checkpoint(out / "checkpoint.npz", {k: v.data for k, v in model.parameters().items()},
                    {"config_hash": digest, "config": cfg.to_dict()})
    timing = {
        "train_seconds": train_seconds,
        "steps": step,
        "mean_step_seconds": float(np.mean(step_times)) if step_times else 0.0,
        "median_step_seconds": float(np.median(step_times)) if step_times else 0.0,
    }
    _write(out / "timing.json", json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return result
