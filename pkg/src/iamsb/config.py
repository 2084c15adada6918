"""Run configuration: one dataclass per subsystem plus a flat
``key = value`` config-file format with bracketed section headers.

Unknown sections or keys are errors; values are parsed according to the
annotated field type of the target dataclass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .losses import LossConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: int = 32
    heads: int = 4
    n_events: int = 20          # candidate count per modality (training default)
    coarse_steps: int = 2       # S_c
    s_tgt: int = 12             # total refinement step budget
    sigma: float = 1.0
    alpha: float = 8.0 / 3.0    # FFN expansion
    top_k: int = 16
    tau: float = 1.0
    d_s: int = 32
    eps_reg: float = 0.05
    sinkhorn_iters: int = 50
    eps_stab: float = 1e-8
    slack_mass: float = 0.25
    energy_coef: float = 0.5    # fusion weight on the squashed prior-energy gap
    energy_squash: float = 0.01  # tanh scale bounding the raw energy gap

    def __post_init__(self):
        if self.channels % self.heads or self.d_s % self.heads:
            raise ConfigError("model-config: head count must divide channels and d_s")
        if self.s_tgt < 0 or self.s_tgt % 2:
            raise ConfigError("model-config: S_tgt must be even and >= 0")
        if self.n_events < 2 or self.n_events % 2:
            raise ConfigError("model-config: N_ev must be even and >= 2")


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    warmup_frac: float = 0.1
    epochs: int = 40
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_accum: int = 1
    seed: int = 0


@dataclass
class EvalConfig:
    ap_thresholds: tuple[float, ...] = (0.5, 0.75, 0.95)
    ar_budgets: tuple[int, ...] = (10, 20, 50, 100)
    nms_iou: float = 0.75
    per_modality: bool = False
    eval_clips: int = 128
    eval_offset: int = 1_000_000  # clip-seed offset separating eval from train


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def scaled(self, **model_updates) -> "RunConfig":
        return replace(self, model=replace(self.model, **model_updates))


_SECTIONS = {
    "data": SynthConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _parse_value(raw: str, annotation):
    raw = raw.strip()
    origin = getattr(annotation, "__origin__", None)
    if origin is tuple:
        inner = annotation.__args__[0]
        if raw == "":
            return ()
        return tuple(_parse_value(tok, inner) for tok in raw.split(","))
    if annotation is bool or annotation == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config-value: expected a boolean, got {raw!r}")
    if annotation is int or annotation == "int":
        return int(raw)
    if annotation is float or annotation == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse the flat key = value format into a RunConfig."""
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    current: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"config-section: unknown section [{name}] at line {lineno}")
            current = name
            continue
        if "=" not in stripped:
            raise ConfigError(f"config-line: expected key = value at line {lineno}")
        if current is None:
            raise ConfigError(f"config-line: key outside any section at line {lineno}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        cls = _SECTIONS[current]
        known = {f.name: f for f in fields(cls)}
        if key not in known:
            raise ConfigError(f"config-key: unknown key {key!r} in section [{current}]")
        ann = cls.__dataclass_fields__[key].type
        ann = _resolve_annotation(cls, key, ann)
        sections[current][key] = _parse_value(raw, ann)
    return RunConfig(**{name: cls(**sections[name]) for name, cls in _SECTIONS.items()})


def _resolve_annotation(cls, key: str, ann):
    if isinstance(ann, str):
        import typing

        hints = typing.get_type_hints(cls)
        return hints[key]
    return ann


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    """Render a RunConfig back into the config-file format."""
    lines = []
    for name, cls in _SECTIONS.items():
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(cls):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
