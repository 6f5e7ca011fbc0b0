from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


POSITIONAL = ("absolute", "rope")
NORMS = ("layernorm", "rmsnorm")
PLACEMENTS = ("pre", "post")
ACTIVATIONS = ("gelu", "swiglu")


def ffn_hidden_size(d_model: int) -> int:
    """Gated FFN width: 2/3 of the classic 4*d, rounded to the nearest multiple of 64."""
    target = 2.0 * 4 * d_model / 3.0
    return max(64, int(round(target / 64.0)) * 64)


@dataclass(frozen=True)
class RopeScaling:
    """YaRN-style frequency interpolation for context extension.

    ``factor`` stretches the usable context of a model trained at
    ``original_max``. Bands rotating fewer than ``beta_slow`` times over
    ``original_max`` are fully interpolated, bands rotating more than
    ``beta_fast`` times are left alone, and a linear ramp joins the two.
    """

    factor: float
    original_max: int
    beta_fast: float = 32.0
    beta_slow: float = 1.0

    def __post_init__(self) -> None:
        if self.factor < 1.0:
            raise ConfigError(f"rope scaling factor must be >= 1, got {self.factor}")
        if self.original_max < 1:
            raise ConfigError("rope scaling original_max must be positive")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 28
    d_model: int = 768
    n_heads: int = 12
    vocab_size: int = 30000
    max_positions: int = 4096
    positional: str = "rope"
    rope_theta: float = 10000.0
    rope_scaling: Optional[RopeScaling] = None
    norm: str = "rmsnorm"
    norm_placement: str = "pre"
    activation: str = "swiglu"
    ffn_hidden: int = 0  # 0: derived from activation and d_model
    use_bias: bool = False
    tie_mlm_head: bool = True
    mlm_bias: bool = True
    norm_eps: float = 1e-5
    align64: bool = True  # enforce multiple-of-64 widths

    def __post_init__(self) -> None:
        if self.ffn_hidden == 0:
            hidden = ffn_hidden_size(self.d_model) if self.activation == "swiglu" else 4 * self.d_model
            object.__setattr__(self, "ffn_hidden", hidden)
        self.validate()

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        for name, value, allowed in (
            ("positional", self.positional, POSITIONAL),
            ("norm", self.norm, NORMS),
            ("norm_placement", self.norm_placement, PLACEMENTS),
            ("activation", self.activation, ACTIVATIONS),
        ):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_positions", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.positional == "rope" and self.d_head % 2:
            raise ConfigError(f"rope needs an even head size, got d_head={self.d_head}")
        if self.align64:
            for name in ("d_model", "ffn_hidden"):
                if getattr(self, name) % 64:
                    raise ConfigError(f"{name}={getattr(self, name)} is not a multiple of 64")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be non-negative")

    def replace(self, **changes) -> "ModelConfig":
        if "activation" in changes or "d_model" in changes:
            changes.setdefault("ffn_hidden", 0)
        return dataclasses.replace(self, **changes)

    def position_capacity(self) -> int:
        """Longest sequence the model is declared to handle."""
        if self.positional == "rope" and self.rope_scaling is not None:
            return int(self.max_positions * self.rope_scaling.factor)
        return self.max_positions

    # flat key=value form shared by config files and checkpoints
    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "rope_scaling":
                if value is None:
                    out["rope_scaling"] = "none"
                else:
                    out["rope_scaling"] = f"{value.factor!r},{value.original_max},{value.beta_fast!r},{value.beta_slow!r}"
            else:
                out[f.name] = _fmt(value)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in flat.items():
            if key not in known:
                raise ConfigError(f"unknown model key: {key}")
            kwargs[key] = _parse_field(key, raw, known[key].default)
        return cls(**kwargs)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _parse_field(key: str, raw: str, default):
    raw = str(raw).strip()
    if key == "rope_scaling":
        if raw.lower() in ("none", ""):
            return None
        parts = [p.strip() for p in raw.split(",")]
        try:
            nums = [float(parts[0]), int(parts[1])] + [float(p) for p in parts[2:]]
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"rope_scaling expects 'factor,original_max[,beta_fast,beta_slow]', got {raw!r}") from exc
        return RopeScaling(*nums)
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def neobert_config(**overrides) -> ModelConfig:
    """28 layers x 768 wide, 12 heads, 30K vocabulary, SwiGLU, pre-RMSNorm, RoPE."""
    base = dict(
        n_layers=28,
        d_model=768,
        n_heads=12,
        vocab_size=30000,
        max_positions=4096,
        positional="rope",
        norm="rmsnorm",
        norm_placement="pre",
        activation="swiglu",
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_config(**overrides) -> ModelConfig:
    base = dict(n_layers=4, d_model=64, n_heads=4, vocab_size=512, max_positions=512)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    kind: str  # "embedding" | "linear" | "norm" | "bias"


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every parameter tensor the encoder owns, in canonical order."""
    d, h, v = cfg.d_model, cfg.ffn_hidden, cfg.vocab_size
    specs = [ParamSpec("embed.tokens", (v, d), "embedding")]
    if cfg.positional == "absolute":
        specs.append(ParamSpec("embed.positions", (cfg.max_positions, d), "embedding"))

    def norm(prefix):
        out = [ParamSpec(f"{prefix}.gain", (d,), "norm")]
        if cfg.norm == "layernorm" and cfg.use_bias:
            out.append(ParamSpec(f"{prefix}.bias", (d,), "norm"))
        return out

    def linear(prefix, shape):
        out = [ParamSpec(f"{prefix}.weight", shape, "linear")]
        if cfg.use_bias:
            out.append(ParamSpec(f"{prefix}.bias", (shape[1],), "bias"))
        return out

    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        specs += norm(f"{p}.attn_norm")
        for proj in ("wq", "wk", "wv", "wo"):
            specs += linear(f"{p}.attn.{proj}", (d, d))
        specs += norm(f"{p}.ffn_norm")
        specs += linear(f"{p}.ffn.w1", (d, h))
        if cfg.activation == "swiglu":
            specs += linear(f"{p}.ffn.w3", (d, h))
        specs += linear(f"{p}.ffn.w2", (h, d))
    if cfg.norm_placement == "pre":
        specs += norm("final_norm")
    if not cfg.tie_mlm_head:
        specs.append(ParamSpec("mlm.weight", (v, d), "linear"))
    if cfg.mlm_bias:
        specs.append(ParamSpec("mlm.bias", (v,), "bias"))
    return specs


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter total for ``cfg``."""
    d, h, v, L = cfg.d_model, cfg.ffn_hidden, cfg.vocab_size, cfg.n_layers
    b = 1 if cfg.use_bias else 0
    norm = d * (2 if cfg.norm == "layernorm" and cfg.use_bias else 1)
    n_ffn_in = 2 if cfg.activation == "swiglu" else 1
    attn = 4 * (d * d + b * d)
    ffn = n_ffn_in * (d * h + b * h) + (h * d + b * d)
    per_layer = attn + ffn + 2 * norm
    total = v * d + L * per_layer
    if cfg.positional == "absolute":
        total += cfg.max_positions * d
    if cfg.norm_placement == "pre":
        total += norm
    if not cfg.tie_mlm_head:
        total += v * d
    if cfg.mlm_bias:
        total += v
    return total


def per_layer_count(cfg: ModelConfig) -> int:
    return param_count(cfg.replace(n_layers=2)) - param_count(cfg.replace(n_layers=1))
