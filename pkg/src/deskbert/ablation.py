"""The M0..M9 ablation chain at desk scale and its driver."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import cross_entropy, gather_rows, reshape
from .data.masking import BERT_SCHEME, MASK_ONLY, mlm_corrupt
from .data.packing import collate, pack_sequences
from .data.synthetic import topic_markov_corpus, topic_vocabulary
from .data.tokenizer import SPECIALS, Tokenizer
from .eval.classify import Grid, classify_finetune
from .eval.pppl import pppl_curve
from .model.config import ConfigError, ModelConfig
from .model.encoder import Encoder
from .train.plan import Stage, TrainPlan
from .train.pretrain import plan_to_flat, pretrain


@dataclass(frozen=True)
class DataRecipe:
    dataset: str = "small"  # "small": few docs/topics; "large": more and more varied
    tokenizer: str = "word"  # "word" or "bpe" (bpe training is out of scope)


DATASETS = {
    "small": dict(n_docs=400, n_topics=3, seed=11),
    "large": dict(n_docs=3000, n_topics=8, seed=12),
}

# field changes allowed (required, derived) for each step of the chain
TABLE_DELTAS = {
    "M1": ({"model.positional", "model.activation", "model.norm"}, {"model.ffn_hidden"}),
    "M2": ({"data.dataset"}, set()),
    "M3": ({"data.tokenizer"}, set()),
    "M4": ({"plan.optimizer", "plan.schedule"}, set()),
    "M5": ({"plan.mask_rate", "plan.mask_scheme"}, set()),
    "M6": ({"plan.mask_mode"}, set()),
    "M7": ({"model.n_layers", "model.d_model"}, {"model.ffn_hidden", "model.n_heads"}),
    "M8": ({"model.n_layers", "model.d_model"}, {"model.ffn_hidden", "model.n_heads"}),
    "M9": ({"plan.batch_tokens", "plan.stages"}, set()),
}
DISCARDED = frozenset({"M3", "M6"})


@dataclass(frozen=True)
class AblationConfig:
    name: str
    model: ModelConfig
    plan: TrainPlan
    data: DataRecipe
    parent: Optional[str] = None
    skip: str = ""  # reason the config is not trained
    scaled: str = ""  # how the config departs from the full-scale setting

    def flat(self) -> dict[str, str]:
        out = {f"model.{k}": v for k, v in self.model.to_flat().items()}
        out.update(plan_to_flat(self.plan))
        out["data.dataset"] = self.data.dataset
        out["data.tokenizer"] = self.data.tokenizer
        return out


def config_diff(a: AblationConfig, b: AblationConfig) -> set[str]:
    fa, fb = a.flat(), b.flat()
    return {k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k)}


@dataclass(frozen=True)
class AblationSpec:
    """Ordered configs; each one changes exactly its own row of modifications.

    Discarded modifications (M3, M6) are not inherited: their successor's
    parent is the config before them.
    """

    configs: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "configs", tuple(self.configs))
        self.validate()

    def __getitem__(self, name: str) -> AblationConfig:
        for c in self.configs:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.configs]

    def validate(self) -> None:
        for c in self.configs:
            if c.parent is None:
                continue
            if c.parent in DISCARDED:
                raise ConfigError(f"{c.name} inherits from {c.parent}, whose change is discarded")
            required, derived = TABLE_DELTAS.get(c.name, (set(), set()))
            diff = config_diff(self[c.parent], c)
            extra = diff - required - derived
            missing = required - diff
            if extra:
                raise ConfigError(f"{c.name} changes fields outside its modification row: {sorted(extra)}")
            if missing:
                raise ConfigError(f"{c.name} leaves unchanged fields of its modification row: {sorted(missing)}")


def toy_ablation_spec(
    steps: int = 60,
    vocab_size: int = len(SPECIALS) + 200,
    base_len: int = 32,
    base_batch_tokens: int = 256,
    context_factor: int = 8,
    batch_factor: int = 16,
    seed: int = 0,
) -> AblationSpec:
    """Desk-scale chain. Widths and depths keep the full-scale ratios.

    Model size 120M -> 250M becomes 3x64 -> 4x88 (BERT-like aspect ratio),
    depth-width 16x1056 -> 28x768 becomes 4x88 -> 7x64. The last step
    multiplies context by ``context_factor`` (512 -> 4096) and batch tokens
    by ``batch_factor`` (131k -> 2M).
    """
    m0 = ModelConfig(
        n_layers=3,
        d_model=64,
        n_heads=4,
        vocab_size=vocab_size,
        max_positions=base_len * context_factor,
        positional="absolute",
        activation="gelu",
        norm="layernorm",
        align64=False,
    )
    p0 = TrainPlan(
        peak_lr=2e-3,
        warmup_steps=max(1, steps // 10),
        optimizer="adam",
        schedule="linear",
        mask_rate=0.15,
        mask_scheme=BERT_SCHEME,
        batch_tokens=base_batch_tokens,
        long_thresholds=(base_len, 2 * base_len),
        seed=seed,
        stages=(Stage(base_len, steps),),
    )
    d0 = DataRecipe()
    cfgs = [AblationConfig("M0", m0, p0, d0)]

    def nxt(name, parent, model=None, plan=None, data=None, **kw):
        base = next(c for c in cfgs if c.name == parent)
        cfgs.append(AblationConfig(name, model or base.model, plan or base.plan, data or base.data, parent, **kw))

    nxt("M1", "M0", model=m0.replace(positional="rope", activation="swiglu", norm="rmsnorm"))
    nxt("M2", "M1", data=DataRecipe("large", "word"))
    nxt("M3", "M2", data=DataRecipe("large", "bpe"), skip="subword tokenizer training is out of scope")
    p4 = p0.replace(optimizer="adamw", schedule="cosine")
    nxt("M4", "M2", plan=p4)
    p5 = p4.replace(mask_rate=0.2, mask_scheme=MASK_ONLY)
    nxt("M5", "M4", plan=p5)
    nxt("M6", "M5", plan=p5.replace(mask_mode="packed-naive"))
    m7 = cfgs[1].model.replace(n_layers=4, d_model=88)
    nxt("M7", "M5", model=m7, scaled="3x64 -> 4x88 stands in for 120M -> 250M")
    nxt("M8", "M7", model=m7.replace(n_layers=7, d_model=64), scaled="4x88 -> 7x64 stands in for 16x1056 -> 28x768")
    nxt(
        "M9",
        "M8",
        plan=p5.replace(
            batch_tokens=base_batch_tokens * batch_factor,
            stages=(Stage(base_len * context_factor, steps),),
        ),
        scaled=f"context x{context_factor}, batch tokens x{batch_factor}",
    )
    return AblationSpec(tuple(cfgs))


def cross_sequence_leakage(model: Encoder, doc: Sequence[int], other: Sequence[int], other_alt: Sequence[int], mode: str) -> float:
    """Largest change in ``doc``'s hidden states when a co-packed document is swapped.

    Zero (to rounding) means no information crosses sequence boundaries.
    """
    if len(other) != len(other_alt):
        raise ValueError("the two co-packed documents must have equal length")
    width = len(doc) + len(other)
    a = collate(pack_sequences([doc, other], width, mode))
    b = collate(pack_sequences([doc, other_alt], width, mode))
    ha = model.hidden_states(a).data[0, : len(doc)]
    hb = model.hidden_states(b).data[0, : len(doc)]
    return float(np.max(np.abs(ha.astype(np.float64) - hb)))


@dataclass
class AblationRow:
    name: str
    parent: Optional[str]
    status: str  # "trained" or "skipped"
    changed: tuple = ()
    note: str = ""
    params: int = 0
    train_loss: float = float("nan")
    mlm_loss: float = float("nan")
    pppl: float = float("nan")
    classify_acc: float = float("nan")
    losses: list = field(default_factory=list)


METRICS = ("train_loss", "mlm_loss", "pppl", "classify_acc")


@dataclass
class AblationReport:
    rows: list

    def row(self, name: str) -> Optional[AblationRow]:
        return next((r for r in self.rows if r.name == name), None)

    def relative_delta(self, name: str, metric: str) -> float:
        """``(metric - parent metric) / parent metric``; nan without a trained parent."""
        r = self.row(name)
        if r is None or r.parent is None or r.status != "trained":
            return float("nan")
        p = self.row(r.parent)
        if p is None or p.status != "trained":
            return float("nan")
        base = getattr(p, metric)
        if not np.isfinite(base) or base == 0:
            return float("nan")
        return (getattr(r, metric) - base) / base

    def to_tsv(self) -> str:
        head = ["name", "parent", "status", "changed", "params"] + list(METRICS)
        head += [f"d_{m}" for m in METRICS] + ["note"]
        lines = ["\t".join(head)]
        for r in self.rows:
            vals = [r.name, r.parent or "-", r.status, ",".join(r.changed) or "-", str(r.params)]
            vals += [f"{getattr(r, m):.6f}" for m in METRICS]
            vals += [f"{self.relative_delta(r.name, m):+.4f}" for m in METRICS]
            vals.append(r.note)
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"


@dataclass
class ToyData:
    tokenizer: Tokenizer
    train: dict  # dataset name -> token-id docs
    eval_docs: list
    eval_texts: list
    eval_topics: list


def toy_data(eval_docs: int = 8, classify_docs: int = 80, max_eval_len: int = 48) -> ToyData:
    tok = Tokenizer(list(SPECIALS) + topic_vocabulary())
    train = {
        name: [tok.encode(t, add_special=True) for t in topic_markov_corpus(median_len=40, **kw)]
        for name, kw in DATASETS.items()
    }
    texts, topics = topic_markov_corpus(
        max(eval_docs, classify_docs), n_topics=8, median_len=20, max_len=max_eval_len, seed=99, with_topics=True
    )
    docs = [tok.encode(t, add_special=True) for t in texts[:eval_docs]]
    return ToyData(tok, train, docs, texts[:classify_docs], topics[:classify_docs])


def heldout_mlm_loss(model: Encoder, docs: Sequence[Sequence[int]], seed: int = 1234) -> float:
    """Mean masked-token cross-entropy with a fixed 15% mask-only corruption."""
    rng = np.random.default_rng(seed)
    rows = []
    for r in pack_sequences(docs, max(len(d) for d in docs), "padded"):
        inputs, labels = mlm_corrupt(r.token_ids, 0.15, MASK_ONLY, rng)
        rows.append(r.with_labels(inputs, labels))
    col = collate(rows)
    labels = col.mlm_labels.reshape(-1)
    idx = np.nonzero(labels != -100)[0]
    flat = reshape(model.hidden_states(col), (-1, model.cfg.d_model))
    return cross_entropy(model.mlm_logits(gather_rows(flat, idx)), labels[idx]).item()


def run_ablation_matrix(
    spec: AblationSpec,
    data: Optional[ToyData] = None,
    suite: Sequence[str] = ("mlm", "pppl", "classify"),
    names: Optional[Sequence[str]] = None,
) -> AblationReport:
    """Train each config in order on an identical seed and data stream, then evaluate it."""
    data = data or toy_data()
    unknown = set(suite) - {"mlm", "pppl", "classify"}
    if unknown:
        raise ConfigError(f"unknown evaluation suite entries: {sorted(unknown)}")
    rows = []
    for c in spec.configs:
        if names is not None and c.name not in names:
            continue
        changed = tuple(sorted(config_diff(spec[c.parent], c))) if c.parent else ()
        note = "; ".join(x for x in (c.scaled and f"scaled: {c.scaled}", c.skip and f"skipped: {c.skip}") if x)
        if c.skip:
            rows.append(AblationRow(c.name, c.parent, "skipped", changed, note))
            continue
        if c.data.tokenizer != "word":
            raise ConfigError(f"{c.name}: tokenizer {c.data.tokenizer!r} is not available")
        res = pretrain(c.model, data.train[c.data.dataset], c.plan)
        model = res.model
        row = AblationRow(c.name, c.parent, "trained", changed, note, model.num_parameters(), losses=res.losses)
        tail = [x for x in res.losses[-10:] if np.isfinite(x)]
        row.train_loss = float(np.mean(tail)) if tail else float("nan")
        if "mlm" in suite:
            row.mlm_loss = heldout_mlm_loss(model, data.eval_docs)
        if "pppl" in suite:
            rep = pppl_curve(model, data.eval_docs, bins=(1e9,))
            row.pppl = float(np.mean([r.pppl for r in rep.records]))
        if "classify" in suite:
            labels = [t % 2 for t in data.eval_topics]
            res_c = classify_finetune(
                model, data.tokenizer, data.eval_texts, labels, Grid((1e-3,), (16,), (0.0,)), epochs=2, patience=15
            )
            row.classify_acc = res_c.best_score
        rows.append(row)
    return AblationReport(rows)
