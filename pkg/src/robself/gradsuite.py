"""Finite-difference gradient checks for every operator and the whole model.

Each check builds a small random fixture, wraps the operator in a smooth
scalar probe (or the real consistency loss for the model) and compares the
analytic gradient against central differences in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffengine as de
from .diffengine import GradCheckReport, Parameter
from .model import PRESETS, ModelState, forward, importance_map, importance_threshold, reference_filter
from .optimize import consistency_loss

SIZE = 16


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    @property
    def max_error(self) -> float:
        return max(self.report.errors.values()) if self.report.errors else 0.0


def _off_grid(rng, shape, spread):
    # bilinear sampling has kinks at integer positions; keep samples clear of them
    off = rng.uniform(-spread, spread, size=shape)
    frac = off - np.round(off)
    off[np.abs(frac) < 0.05] += 0.1
    return off


def _probe(fn, rng, shape):
    pw = rng.normal(size=shape)
    return lambda: de.weighted_sum(fn(), pw)


def _op_checks(rng, size) -> dict[str, Callable[[], tuple]]:
    """Name -> factory returning ``(builder, params)``."""

    def conv():
        x = Parameter(rng.normal(size=(2, size, size)), "x")
        w = Parameter(rng.normal(size=(3, 2, 3, 3)), "weight")
        b = Parameter(rng.normal(size=3), "bias")
        return _probe(lambda: de.conv2d(x, w, b), rng, (3, size, size)), [x, w, b]

    def conv_stride2():
        x = Parameter(rng.normal(size=(2, size, size)), "x")
        w = Parameter(rng.normal(size=(2, 2, 3, 3)), "weight")
        return _probe(lambda: de.conv2d(x, w, None, stride=2), rng, (2, size // 2, size // 2)), [x, w]

    def pool():
        x = Parameter(rng.normal(size=(2, size, size)), "x")
        return _probe(lambda: de.avg_pool2d(x, 2), rng, (2, size // 2, size // 2)), [x]

    def resize():
        x = Parameter(rng.normal(size=(2, size // 2, size // 2)), "x")
        return _probe(lambda: de.bilinear_resize(x, size, size), rng, (2, size, size)), [x]

    def sample():
        x = Parameter(rng.normal(size=(2, size, size)), "x")
        off = Parameter(_off_grid(rng, (2, size, size), 2.5), "offsets")
        return _probe(lambda: de.grid_sample(x, off), rng, (2, size, size)), [x, off]

    def deform():
        x = Parameter(rng.normal(size=(2, size, size)), "x")
        w = Parameter(rng.normal(size=(2, 2, 3, 3)), "weight")
        off = Parameter(_off_grid(rng, (18, size, size), 1.5), "offsets")
        return _probe(lambda: de.deform_conv2d(x, w, off), rng, (2, size, size)), [x, w, off]

    def lrelu():
        xv = rng.normal(size=(2, size, size))
        xv[np.abs(xv) < 1e-3] = 0.1
        x = Parameter(xv, "x")
        return _probe(lambda: de.leaky_relu(x, 0.1), rng, (2, size, size)), [x]

    def concat_split():
        a = Parameter(rng.normal(size=(2, size, size)), "a")
        b = Parameter(rng.normal(size=(1, size, size)), "b")

        def build():
            head, tail = de.split_channels(de.concat_channels(a, b), 1)
            return de.concat_channels(tail, de.scale(head, 2.0))

        return _probe(build, rng, (3, size, size)), [a, b]

    def l1():
        a = Parameter(rng.normal(size=(2, size, size)), "a")
        target = rng.normal(size=(2, size, size))
        return (lambda: de.l1_mean(a, target)), [a]

    def ref_filter():
        fs = Parameter(rng.normal(size=(3, size, size)), "f_source")
        fa = Parameter(rng.normal(size=(3, size, size)), "f_aligned")
        m_imp = importance_map(fs.value)
        tau = importance_threshold(m_imp, 0.7)
        return _probe(lambda: reference_filter(fs, fa, m_imp, tau, 7, 5), rng, (3, size, size)), [fs, fa]

    return {
        "conv2d": conv,
        "conv2d_stride2": conv_stride2,
        "avg_pool2d": pool,
        "bilinear_resize": resize,
        "grid_sample": sample,
        "deform_conv2d": deform,
        "leaky_relu": lrelu,
        "concat_split": concat_split,
        "l1_mean": l1,
        "reference_filter": ref_filter,
    }


OPERATORS = tuple(_op_checks(np.random.default_rng(0), SIZE))


def model_config(preset_name: str, variant: str, size: int = SIZE, channels: int = 3):
    """Preset reduced to fit a ``size x size`` guide."""
    cfg = PRESETS[preset_name].replace(variant=variant, channels_C=channels)
    level = cfg.level_i
    while size % (2**level):
        level -= 1
    return cfg.replace(level_i=level)


def model_check(preset_name: str, variant: str, tolerance: float, max_entries: int, seed: int = 0,
                size: int = SIZE) -> GradCheckReport:
    cfg = model_config(preset_name, variant, size)
    rng = np.random.default_rng(seed)
    f = cfg.sr_factor
    source = rng.random((cfg.phi, size // f, size // f))
    guide = rng.random((cfg.psi, size, size))
    state = ModelState(cfg.replace(seed=seed))
    # move off the zero-initialised offset head so sampling positions are not integers
    head = state.params["translator.offset_head.weight"]
    head.value[...] = rng.normal(scale=0.3, size=head.value.shape)
    state.params["translator.offset_head.bias"].value[...] = _off_grid(rng, cfg.offset_channels, 0.8)
    params = state.parameters()

    def build():
        out = forward(source, guide, state)
        return consistency_loss(out.sr, out.trans, source, f, cfg.lam)[0]

    return de.grad_check(build, params, tolerance=tolerance, max_entries=max_entries, seed=seed)


def run_suite(ops=None, models: bool = True, tolerance: float = 1e-3, max_entries: int = 6,
              seed: int = 0, log=None) -> list[SuiteResult]:
    """Run operator checks (all, or those named in ``ops``) and optionally the model checks."""
    results = []
    with de.precision("f64"):
        factories = _op_checks(np.random.default_rng(seed), SIZE)
        names = list(factories) if ops is None else list(ops)
        for name in names:
            if name not in factories:
                raise KeyError(f"unknown operator {name!r}; choose from {', '.join(factories)}")
            builder, params = factories[name]()
            res = SuiteResult(name, de.grad_check(builder, params, tolerance=tolerance, seed=seed))
            results.append(res)
            if log:
                log(res)
        if models:
            for preset_name in PRESETS:
                for variant in ("Re", "De"):
                    rep = model_check(preset_name, variant, tolerance, max_entries, seed)
                    res = SuiteResult(f"model/{preset_name}/{variant}", rep)
                    results.append(res)
                    if log:
                        log(res)
    return results
