"""Hyperparameter record, task presets and the key=value config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ContractError


@dataclass
class RobSelfConfig:
    variant: str = "Re"
    level_i: int = 4
    eta: float | None = 0.7
    kernel_m: int = 7
    kernel_n: int = 5
    sr_factor: int = 4
    channels_C: int = 32
    phi: int = 1
    psi: int = 3
    separate_heads: bool = False
    lam: float = 1.0
    iterations: int = 1000
    lr_init: float = 0.002
    lr_decay: float = 0.9998
    lr_decay_every: int = 5
    seed: int = 0
    # ablation switches; all on is the full model
    use_translator: bool = True
    use_filter: bool = True
    bypass_alignment: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in ("Re", "De"):
            raise ContractError(f"variant must be 'Re' or 'De', got {self.variant!r}")
        if self.kernel_m % 2 == 0 or self.kernel_n % 2 == 0:
            raise ContractError(f"kernel sizes must be odd, got m={self.kernel_m}, n={self.kernel_n}")
        if not self.kernel_m >= self.kernel_n >= 1:
            raise ContractError(f"need kernel_m >= kernel_n >= 1, got m={self.kernel_m}, n={self.kernel_n}")
        if self.level_i < 1:
            raise ContractError(f"level_i must be >= 1, got {self.level_i}")
        if self.eta is not None and self.eta <= 0:
            raise ContractError(f"eta must be positive or disabled, got {self.eta}")
        if self.sr_factor not in (2, 4, 8):
            raise ContractError(f"sr_factor must be 2, 4 or 8, got {self.sr_factor}")
        if self.channels_C < 1 or self.phi < 1 or self.psi < 1:
            raise ContractError("channel counts must be positive")
        if self.iterations < 0 or self.lr_decay_every < 1:
            raise ContractError("iterations must be >= 0 and lr_decay_every >= 1")

    @property
    def offset_channels(self) -> int:
        return 2 if self.variant == "Re" else 2 * DEFORM_KERNEL**2

    @property
    def multiple(self) -> int:
        return 2**self.level_i

    def replace(self, **changes) -> "RobSelfConfig":
        return dataclasses.replace(self, **changes)

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                value = "none"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RobSelfConfig | None" = None) -> "RobSelfConfig":
        """Parse ``key=value`` lines; ``#`` starts a comment.

        Keys that are not config fields are rejected unless they contain a
        dot or are manifest bookkeeping, so manifests double as configs.
        """
        values = dataclasses.asdict(base) if base is not None else {}
        known = {f.name: f for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "lambda":
                key = "lam"
            if key not in known:
                if "." in key or key in MANIFEST_KEYS:
                    continue
                raise ContractError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, value, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path, base: "RobSelfConfig | None" = None) -> "RobSelfConfig":
        return cls.from_text(Path(path).read_text(), base)


DEFORM_KERNEL = 3

MANIFEST_KEYS = {"tool_version", "started", "finished", "preset", "precision"}

_BOOL_FIELDS = {"separate_heads", "use_translator", "use_filter", "bypass_alignment"}
_INT_FIELDS = {"level_i", "kernel_m", "kernel_n", "sr_factor", "channels_C", "phi", "psi",
               "iterations", "lr_decay_every", "seed"}


def _parse_value(key, value, lineno):
    try:
        if key in _BOOL_FIELDS:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if key in _INT_FIELDS:
            return int(value)
        if key == "variant":
            return {"re": "Re", "de": "De"}.get(value.lower(), value)
        if key == "eta":
            return None if value.lower() in ("none", "off", "") else float(value)
        return float(value)
    except ValueError:
        raise ContractError(f"config line {lineno}: bad value {value!r} for {key}") from None


PRESETS: dict[str, RobSelfConfig] = {
    "syn-depth-x4": RobSelfConfig(level_i=4, kernel_m=7, kernel_n=5, eta=0.7, sr_factor=4),
    "syn-depth-x8": RobSelfConfig(level_i=5, kernel_m=13, kernel_n=7, eta=0.7, sr_factor=8),
    "real-depth-x2": RobSelfConfig(level_i=3, kernel_m=7, kernel_n=5, eta=0.7, sr_factor=2),
    "real-depth-x4": RobSelfConfig(level_i=4, kernel_m=7, kernel_n=5, eta=0.7, sr_factor=4),
    "real-nir-x2": RobSelfConfig(level_i=4, kernel_m=3, kernel_n=3, eta=None, sr_factor=2,
                                 separate_heads=True),
    "real-nir-x4": RobSelfConfig(level_i=5, kernel_m=3, kernel_n=3, eta=None, sr_factor=4,
                                 separate_heads=True),
}


def preset(name: str, **overrides) -> RobSelfConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return PRESETS[name].replace(**overrides)
