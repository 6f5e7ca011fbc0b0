"""INI-style run configuration: sections of flat ``key = value`` pairs.

Recognised sections are ``[model]``, ``[train]``, ``[stage.N]``, ``[data]``,
``[finetune]``, ``[eval]``, ``[bench]`` and ``[ablate]``. Unknown sections
and unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .model.config import ConfigError, ModelConfig, RopeScaling, toy_config
from .train.plan import Stage, TrainPlan, toy_plan

SECTIONS = ("model", "train", "data", "finetune", "eval", "bench", "ablate")

# free-form sections and the keys they accept, with defaults
DATA_DEFAULTS = {
    "corpus": "",  # text file, one document per line; empty = synthetic
    "vocab": "",  # vocab file; empty = built from the corpus
    "tokenizer": "whitespace-vocab",
    "synthetic_docs": 3000,
    "synthetic_median_len": 60.0,
    "synthetic_max_len": 400,
    "synthetic_seed": 0,
    "max_vocab": 30000,
}
FINETUNE_DEFAULTS = {
    "checkpoint": "",
    "pairs": "",  # pair file; empty = synthetic paired-pattern task
    "temperature": 0.07,
    "alpha": 0.5,
    "steps": 2000,
    "batch_size": 64,
    "lr": 2e-5,
    "weight_decay": 0.0,
    "similarity": "cosine",
    "synthetic_pairs": 400,
}
EVAL_DEFAULTS = {
    "checkpoint": "",
    "corpus": "",
    "bins": "64,128,256,512",
    "min_len": 1,
    "sample": 64,
    "chunk": 32,
    "pairs": "",
    "labeled": "",  # tsv: label<TAB>text
    "lrs": "1e-3",
    "batch_sizes": "16",
    "weight_decays": "0.0",
    "epochs": 3,
    "patience": 15,
}
BENCH_DEFAULTS = {
    "seq_lens": "64,128,256",
    "max_batch": 16,
    "steps": 10,
    "repeats": 3,
    "warmup": 5,
    "memory_budget_mb": 0.0,
}
ABLATE_DEFAULTS = {
    "steps": 60,
    "configs": "M0,M1,M2,M3,M4,M5,M6,M7,M8,M9",
    "eval_docs": 8,
}
FREEFORM = {
    "data": DATA_DEFAULTS,
    "finetune": FINETUNE_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "bench": BENCH_DEFAULTS,
    "ablate": ABLATE_DEFAULTS,
}


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(value: str, like: Any, key: str = "") -> Any:
    """Convert ``value`` to the type of the default ``like``."""
    try:
        if isinstance(like, bool):
            return parse_bool(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if like and isinstance(like[0], int) and not isinstance(like[0], bool):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return value.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key or 'key'}: {value!r} ({exc})") from None


def _field_defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def coerce_plan_fields(raw: Mapping[str, str]) -> dict[str, Any]:
    defaults = _field_defaults(TrainPlan)
    out = {}
    for k, v in raw.items():
        if k == "stages":
            continue
        if k not in defaults:
            raise ConfigError(f"unknown key train.{k}")
        out[k] = coerce(v, defaults[k], f"train.{k}")
    return out


def coerce_model_fields(raw: Mapping[str, str]) -> dict[str, Any]:
    defaults = _field_defaults(ModelConfig)
    out: dict[str, Any] = {}
    for k, v in raw.items():
        if k not in defaults:
            raise ConfigError(f"unknown key model.{k}")
        if k == "rope_scaling":
            out[k] = parse_rope_scaling(v)
        else:
            out[k] = coerce(v, defaults[k], f"model.{k}")
    return out


def parse_rope_scaling(text: str) -> Optional[RopeScaling]:
    t = text.strip().lower()
    if t in ("", "none"):
        return None
    parts = [p.strip() for p in t.split(",")]
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"rope_scaling must be 'none' or 'factor,original_max[,beta_fast,beta_slow]', got {text!r}")
    if len(nums) == 2:
        return RopeScaling(nums[0], int(nums[1]))
    if len(nums) == 4:
        return RopeScaling(nums[0], int(nums[1]), nums[2], nums[3])
    raise ConfigError(f"rope_scaling needs 2 or 4 numbers, got {text!r}")


def parse_stage(key: str, raw: Mapping[str, str]) -> Stage:
    allowed = {"max_len", "steps", "mixture"}
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"unknown key {key}.{k}")
    if "max_len" not in raw or "steps" not in raw:
        raise ConfigError(f"[{key}] needs max_len and steps")
    mixture = coerce(raw.get("mixture", "1,0,0"), (0.0,), f"{key}.mixture")
    try:
        return Stage(int(raw["max_len"]), int(raw["steps"]), mixture)
    except ValueError as exc:
        raise ConfigError(f"[{key}]: {exc}") from None


@dataclass
class RunConfig:
    """Everything a CLI subcommand needs, with typed values."""

    model: ModelConfig = field(default_factory=toy_config)
    plan: TrainPlan = field(default_factory=toy_plan)
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    finetune: dict = field(default_factory=lambda: dict(FINETUNE_DEFAULTS))
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    bench: dict = field(default_factory=lambda: dict(BENCH_DEFAULTS))
    ablate: dict = field(default_factory=lambda: dict(ABLATE_DEFAULTS))
    source_text: str = ""

    def digest(self) -> str:
        """SHA-256 of the canonical flattened configuration."""
        return hashlib.sha256(canonical_text(self).encode("utf-8")).hexdigest()


def canonical_text(run: RunConfig) -> str:
    lines = [f"model.{k}={v}" for k, v in sorted(run.model.to_flat().items())]
    from .train.pretrain import plan_to_flat

    lines += [f"{k}={v}" for k, v in sorted(plan_to_flat(run.plan).items())]
    for sec in FREEFORM:
        lines += [f"{sec}.{k}={v}" for k, v in sorted(getattr(run, sec).items())]
    return "\n".join(lines) + "\n"


def _split_sections(parser: configparser.ConfigParser) -> dict[str, dict[str, str]]:
    out = {}
    for name in parser.sections():
        if name not in SECTIONS and not name.startswith("stage."):
            raise ConfigError(f"unknown section [{name}]")
        out[name] = dict(parser.items(name))
    return out


def apply_overrides(sections: dict[str, dict[str, str]], overrides: Sequence[str]) -> None:
    """Apply ``section.key=value`` overrides in place (later wins)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        lhs = lhs.strip()
        if "." not in lhs:
            raise ConfigError(f"override key must be section.key, got {lhs!r}")
        section, key = lhs.rsplit(".", 1)
        if section not in SECTIONS and not section.startswith("stage."):
            raise ConfigError(f"unknown section in override {lhs!r}")
        sections.setdefault(section, {})[key] = value.strip()


def build(sections: Mapping[str, Mapping[str, str]], seed: Optional[int] = None) -> RunConfig:
    run = RunConfig()
    if "model" in sections:
        run.model = toy_config().replace(**coerce_model_fields(sections["model"]))
    plan_kw = coerce_plan_fields(sections.get("train", {}))
    stage_keys = sorted((k for k in sections if k.startswith("stage.")), key=_stage_order)
    if stage_keys:
        plan_kw["stages"] = tuple(parse_stage(k, sections[k]) for k in stage_keys)
    if seed is not None:
        plan_kw["seed"] = int(seed)
    run.plan = toy_plan(**plan_kw)
    for sec, defaults in FREEFORM.items():
        vals = dict(defaults)
        for k, v in sections.get(sec, {}).items():
            if k not in defaults:
                raise ConfigError(f"unknown key {sec}.{k}")
            vals[k] = coerce(v, defaults[k], f"{sec}.{k}")
        setattr(run, sec, vals)
    return run


def _stage_order(name: str) -> int:
    try:
        return int(name.split(".", 1)[1])
    except ValueError:
        raise ConfigError(f"stage sections are named [stage.N] with integer N, got [{name}]") from None


def load(path=None, overrides: Sequence[str] = (), seed: Optional[int] = None) -> RunConfig:
    """Read a config file (optional), apply overrides, then the seed flag."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str  # keep key case
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        try:
            parser.read_string(text, source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    sections = _split_sections(parser)
    apply_overrides(sections, overrides)
    run = build(sections, seed)
    run.source_text = text
    return run
