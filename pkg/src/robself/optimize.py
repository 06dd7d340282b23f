"""Per-pair online optimization: consistency loss, Adam and the step-decay schedule."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from .diffengine import Node, Parameter
from .errors import ContractError, DivergenceError
from .model import ModelState, RobSelfConfig, forward
from .model.network import Diagnostics

log = logging.getLogger(__name__)

TRACE_HEADER = ("iter", "lr", "loss_sr", "loss_trans", "loss_total", "ms")


def lr_at(iteration: int, lr_init: float, decay: float, every: int) -> float:
    if iteration < 0:
        raise ContractError(f"iteration must be >= 0, got {iteration}")
    return lr_init * decay ** (iteration // every)


def consistency_loss(sr: Node, trans: Node | None, lr_image, factor: int, lam: float = 1.0):
    """L1 between pooled predictions and the LR source.

    Returns ``(total, sr_term, trans_term)``; ``trans_term`` is ``None`` when
    the translation branch is absent.
    """
    lr_image = np.asarray(lr_image)
    pooled = de.avg_pool2d(sr, factor)
    if pooled.value.shape != lr_image.shape:
        raise ContractError(f"pooled prediction {pooled.value.shape} does not match LR source {lr_image.shape}")
    loss_sr = de.l1_mean(pooled, lr_image)
    if trans is None:
        return loss_sr, loss_sr, None
    loss_trans = de.l1_mean(de.avg_pool2d(trans, factor), lr_image)
    total = de.add(loss_sr, de.scale(loss_trans, lam)) if lam != 1.0 else de.add(loss_sr, loss_trans)
    return total, loss_sr, loss_trans


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Parameter], grads: dict[str, np.ndarray], lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    for p in params:
        if not np.isfinite(grads[p.name]).all():
            raise DivergenceError(f"non-finite gradient for parameter {p.name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p in params:
        g = grads[p.name]
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.value.dtype)


@dataclass
class TraceRecord:
    iter: int
    lr: float
    loss_sr: float
    loss_trans: float
    loss_total: float
    ms: float


@dataclass
class OptimTrace:
    records: list[TraceRecord] = field(default_factory=list)
    final_large_fraction: float | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in self.records:
            ms = f"{r.ms:.3f}" if include_time else "0"
            writer.writerow([r.iter, repr(r.lr), repr(r.loss_sr), repr(r.loss_trans), repr(r.loss_total), ms])
        return buf.getvalue()


@dataclass
class OptimResult:
    sr: np.ndarray
    trans: np.ndarray | None
    diagnostics: Diagnostics
    trace: OptimTrace
    state: ModelState


def optimize_pair(pair, config: RobSelfConfig, progress_every: int = 0) -> OptimResult:
    """Optimize a freshly initialized model on one pair and return its predictions.

    Sources with values above 1 (raw depth) are divided by their maximum
    for optimization and the predictions are scaled back.
    """
    source = de.as_tensor(pair.source_lr)
    guide = de.as_tensor(pair.guide_hr)
    peak = float(np.abs(source).max()) if source.size else 1.0
    norm = peak if peak > 1.0 else 1.0
    source_n = source / norm

    state = ModelState(config)
    params = state.parameters()
    adam = AdamState()
    trace = OptimTrace()
    for it in range(config.iterations):
        t0 = time.perf_counter()
        lr = lr_at(it, config.lr_init, config.lr_decay, config.lr_decay_every)
        try:
            out = forward(source_n, guide, state)
            total, l_sr, l_trans = consistency_loss(out.sr, out.trans, source_n, config.sr_factor, config.lam)
            if not np.isfinite(total.value):
                raise DivergenceError(f"loss became non-finite at iteration {it}")
            grads = de.backward(total, params)
            adam_step(adam, params, grads, lr)
        except FloatingPointError as exc:
            raise DivergenceError(f"iteration {it}: {exc}", trace) from exc
        trace.records.append(TraceRecord(
            iter=it,
            lr=lr,
            loss_sr=float(l_sr.value),
            loss_trans=float(l_trans.value) if l_trans is not None else 0.0,
            loss_total=float(total.value),
            ms=(time.perf_counter() - t0) * 1e3,
        ))
        if progress_every and (it % progress_every == 0 or it == config.iterations - 1):
            log.info("iter %d lr %.6g loss %.6g", it, lr, float(total.value))

    out = forward(source_n, guide, state)
    trace.final_large_fraction = out.diagnostics.large_fraction
    sr = out.sr.value * norm
    trans = out.trans.value * norm if out.trans is not None else None
    return OptimResult(sr, trans, out.diagnostics, trace, state)
