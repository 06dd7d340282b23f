"""The RobSelf network: extraction, translator, reference filter, heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffengine as de
from ..diffengine import Node, Parameter
from ..errors import ContractError
from .config import DEFORM_KERNEL, RobSelfConfig
from .filter import importance_map, importance_threshold, large_kernel_mask, reference_filter

SLOPE = 0.1


class ModelState:
    """All parameters of one model instance plus its configuration.

    Parameters are created in a fixed order from ``config.seed`` so two
    states built from equal configs are bitwise identical.
    """

    def __init__(self, config: RobSelfConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(config.seed)
        cfg = config
        c = cfg.channels_C

        for name, c_in in (("source", cfg.phi), ("guide", cfg.psi)):
            self._conv(f"extract.{name}.0", c_in, c, 3)
            self._conv(f"extract.{name}.1", c, c, 3)

        # bypassed alignment keeps its (unused) parameters so the random
        # draws for everything after it match the full model
        if cfg.use_translator:
            for s in range(cfg.level_i):
                self._conv(f"translator.encoder.{s}", 2 * c if s == 0 else c, c, 3)
            for s in range(cfg.level_i):
                # decoder stage s lands on resolution level (level_i - 1 - s)
                skip = c if s < cfg.level_i - 1 else 0
                self._conv(f"translator.decoder.{s}", c + skip, c, 3)
            self._conv("translator.offset_head", c, cfg.offset_channels, 1, zero=True)
            if cfg.variant == "De":
                k = DEFORM_KERNEL
                self._add("translator.deform.weight", self._uniform((c, c, k, k), c * k * k))

        heads = ["sr"]
        if cfg.use_translator and cfg.separate_heads:
            heads.append("translation")
        for h in heads:
            prefix = "head.shared" if h == "sr" and not cfg.separate_heads else f"head.{h}"
            self._conv(f"{prefix}.0", c, c, 3)
            self._conv(f"{prefix}.1", c, cfg.phi, 3)

        if not cfg.use_filter:
            self._conv("fusion", 2 * c, c, 1)

    # -- construction -------------------------------------------------------

    def _uniform(self, shape, fan_in):
        # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the common framework default.
        # The larger He bound started the heads far from the source range
        # and 1000 iterations were not enough to recover.
        bound = 1.0 / np.sqrt(fan_in)
        return self._rng.uniform(-bound, bound, size=shape)

    def _add(self, name, value):
        if name in self.params:
            raise ContractError(f"duplicate parameter {name}")
        self.params[name] = Parameter(value, name)

    def _conv(self, prefix, c_in, c_out, k, zero=False):
        shape = (c_out, c_in, k, k)
        weight = np.zeros(shape) if zero else self._uniform(shape, c_in * k * k)
        self._add(f"{prefix}.weight", weight)
        self._add(f"{prefix}.bias", np.zeros(c_out))

    # -- access ---------------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def conv(self, x, prefix, stride=1) -> Node:
        return de.conv2d(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"], stride=stride)

    def head_prefix(self, head: str) -> str:
        if head not in ("sr", "translation"):
            raise ContractError(f"unknown head {head!r}")
        if not self.config.separate_heads:
            return "head.shared"
        return f"head.{head}"


@dataclass
class Diagnostics:
    f_source: np.ndarray
    f_guide: np.ndarray
    f_aligned: np.ndarray
    field: np.ndarray | None
    m_imp: np.ndarray | None
    tau: float | None
    large_fraction: float | None


@dataclass
class ForwardResult:
    sr: Node
    trans: Node | None
    diagnostics: Diagnostics = field(repr=False)


def extract_features(up_source, guide, state: ModelState) -> tuple[Node, Node]:
    up_source, guide = de._node(up_source), de._node(guide)
    if up_source.value.shape[1:] != guide.value.shape[1:]:
        raise ContractError(
            f"source {up_source.value.shape[1:]} and guide {guide.value.shape[1:]} must share spatial extents")
    cfg = state.config
    if up_source.value.shape[0] != cfg.phi or guide.value.shape[0] != cfg.psi:
        raise ContractError(
            f"expected {cfg.phi} source and {cfg.psi} guide channels, "
            f"got {up_source.value.shape[0]} and {guide.value.shape[0]}")
    feats = []
    for name, x in (("source", up_source), ("guide", guide)):
        y = de.leaky_relu(state.conv(x, f"extract.{name}.0"), SLOPE)
        feats.append(state.conv(y, f"extract.{name}.1"))
    return feats[0], feats[1]


def estimate_deformation(f_source: Node, f_guide: Node, state: ModelState) -> Node:
    """Encoder-decoder offset estimator; returns ``N x H x W`` pixel offsets."""
    cfg = state.config
    h, w = f_source.value.shape[1:]
    mult = cfg.multiple
    if h % mult or w % mult:
        raise ContractError(f"estimator level {cfg.level_i} needs extents divisible by {mult}, got {h}x{w}")
    x = de.concat_channels(f_source, f_guide)
    skips = []
    for s in range(cfg.level_i):
        x = de.leaky_relu(state.conv(x, f"translator.encoder.{s}", stride=2), SLOPE)
        skips.append(x)
    for s in range(cfg.level_i):
        x = de.bilinear_resize(x, x.value.shape[1] * 2, x.value.shape[2] * 2)
        level = cfg.level_i - 1 - s
        if level > 0:
            x = de.concat_channels(x, skips[level - 1])
        x = de.leaky_relu(state.conv(x, f"translator.decoder.{s}"), SLOPE)
    return state.conv(x, "translator.offset_head")


def align_guide(f_guide: Node, field: Node, state: ModelState) -> Node:
    cfg = state.config
    n = field.value.shape[0]
    if n != cfg.offset_channels:
        raise ContractError(f"variant {cfg.variant} expects a {cfg.offset_channels}-channel field, got {n}")
    if cfg.variant == "Re":
        return de.grid_sample(f_guide, field)
    return de.deform_conv2d(f_guide, state.params["translator.deform.weight"], field)


def predict(feature: Node, head: str, state: ModelState) -> Node:
    prefix = state.head_prefix(head)
    y = de.leaky_relu(state.conv(feature, f"{prefix}.0"), SLOPE)
    return state.conv(y, f"{prefix}.1")


def upsample_source(source_lr, out_h: int, out_w: int) -> np.ndarray:
    return de.bilinear_resize(de.as_tensor(source_lr), out_h, out_w)


def standardize(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-channel zero mean and unit spread; constant channels map to zero.

    Network inputs only.  Predictions stay in source units because the
    consistency loss compares them with the raw LR source.
    """
    x = np.asarray(x)
    mean = x.mean(axis=(1, 2), keepdims=True)
    spread = x.std(axis=(1, 2), keepdims=True)
    return ((x - mean) / (spread + eps)).astype(x.dtype)


def forward(source_lr, guide, state: ModelState) -> ForwardResult:
    """Full pipeline from an LR source and HR guide to both predictions."""
    cfg = state.config
    source_lr = de.as_tensor(source_lr)
    guide = de.as_tensor(guide)
    big_h, big_w = guide.shape[1:]
    h, w = source_lr.shape[1:]
    if (h * cfg.sr_factor, w * cfg.sr_factor) != (big_h, big_w):
        raise ContractError(
            f"LR source {h}x{w} times factor {cfg.sr_factor} does not match guide {big_h}x{big_w}")
    if cfg.use_translator and not cfg.bypass_alignment and (big_h % cfg.multiple or big_w % cfg.multiple):
        raise ContractError(
            f"guide {big_h}x{big_w} must be divisible by {cfg.multiple} for estimator level {cfg.level_i}")

    up = upsample_source(source_lr, big_h, big_w)
    f_source, f_guide = extract_features(standardize(up), standardize(guide), state)

    field = None
    if cfg.use_translator and not cfg.bypass_alignment:
        field = estimate_deformation(f_source, f_guide, state)
        f_aligned = align_guide(f_guide, field, state)
    else:
        f_aligned = f_guide

    m_imp = tau = frac = None
    if cfg.use_filter:
        m_imp = importance_map(f_source)
        tau = None if cfg.eta is None else importance_threshold(m_imp, cfg.eta)
        frac = float(large_kernel_mask(m_imp, tau).mean())
        enhanced = reference_filter(f_source, f_aligned, m_imp, tau, cfg.kernel_m, cfg.kernel_n)
    else:
        enhanced = state.conv(de.concat_channels(f_source, f_aligned), "fusion")

    sr = predict(enhanced, "sr", state)
    trans = predict(f_aligned, "translation", state) if cfg.use_translator else None
    diag = Diagnostics(
        f_source=f_source.value,
        f_guide=f_guide.value,
        f_aligned=f_aligned.value,
        field=None if field is None else field.value,
        m_imp=m_imp,
        tau=tau,
        large_fraction=frac,
    )
    return ForwardResult(sr, trans, diag)
