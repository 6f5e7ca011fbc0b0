"""Masked-language-model pretraining loop with a staged length curriculum."""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from ..autodiff import IGNORE_INDEX, GradTape, backward, cross_entropy, gather_rows, reshape
from ..data.masking import mlm_corrupt
from ..data.packing import Collated, PackedBatch, collate, pack_sequences
from ..data.sampler import LengthMixtureSampler
from ..model import checkpoint
from ..model.config import ModelConfig, param_specs
from ..model.encoder import Encoder
from .optim import AdamW, NO_DECAY_KINDS, clip_grad_norm, lr_schedule
from .plan import Stage, TrainPlan

log = logging.getLogger(__name__)


def no_decay_names(cfg: ModelConfig) -> frozenset:
    return frozenset(s.name for s in param_specs(cfg) if s.kind in NO_DECAY_KINDS)


@dataclass
class Optimizer:
    """AdamW state plus the schedule position."""

    plan: TrainPlan
    adam: AdamW
    step: int = 0

    @classmethod
    def for_model(cls, model: Encoder, plan: TrainPlan) -> "Optimizer":
        adam = AdamW(
            betas=plan.betas,
            eps=plan.eps,
            weight_decay=plan.weight_decay,
            decoupled=plan.optimizer == "adamw",
            no_decay=no_decay_names(model.cfg),
        )
        return cls(plan, adam)

    def lr(self) -> float:
        return lr_schedule(self.step, self.plan.total_schedule_steps, self.plan)


def mlm_loss(model: Encoder, batch) -> Optional[object]:
    """Cross-entropy over labeled positions of ``batch``; None if nothing is labeled."""
    col = batch if isinstance(batch, Collated) else collate(batch)
    labels = col.mlm_labels.reshape(-1)
    idx = np.nonzero(labels != IGNORE_INDEX)[0]
    if idx.size == 0:
        return None
    hs = model.hidden_states(col)
    flat = reshape(hs, (-1, model.cfg.d_model))
    return cross_entropy(model.mlm_logits(gather_rows(flat, idx)), labels[idx])


def train_step(model: Encoder, batch, opt: Optimizer) -> Optional[float]:
    """Forward, masked cross-entropy, backward, clip, AdamW update, schedule advance."""
    with GradTape():
        loss = mlm_loss(model, batch)
    if loss is None:
        log.warning("step %d: batch has no labeled positions; skipped", opt.step)
        return None
    grads = backward(loss)
    by_name = {name: grads[p].data for name, p in model.params.items() if p in grads}
    by_name, _ = clip_grad_norm(by_name, opt.plan.clip_norm)
    opt.adam.step(model.params, by_name, opt.lr())
    opt.step += 1
    return loss.item()


def fill_rows(draw, rows: int, max_len: int, mode: str) -> list[PackedBatch]:
    """Draw documents into ``rows`` rows; packed modes keep drawing until the next document no longer fits."""
    if mode == "padded":
        return pack_sequences([draw() for _ in range(rows)], max_len, mode)
    docs: list = []
    fill: list[int] = []
    while True:
        doc = list(draw())[:max_len]
        if not any(used + len(doc) <= max_len for used in fill):
            if len(fill) == rows:
                break
            fill.append(0)
        docs.append(doc)
        for r, used in enumerate(fill):
            if used + len(doc) <= max_len:
                fill[r] += len(doc)
                break
    return pack_sequences(docs, max_len, mode)


@dataclass
class BatchInfo:
    step: int
    stage: int
    rows: int
    width: int
    max_position: int
    longest: int
    labeled: int


@dataclass
class StageCheckpoint:
    stage: int
    step: int
    path: Optional[Path]


class Pretrainer:
    """Runs a :class:`TrainPlan` over tokenized documents.

    Every batch is a function of the seed, the step and the sampler cursors,
    so a run resumed from a checkpoint replays the original exactly.
    """

    def __init__(self, model: Encoder, plan: TrainPlan, docs: Sequence[Sequence[int]]):
        self.model = model
        self.plan = plan
        self.docs = docs
        self.opt = Optimizer.for_model(model, plan)
        self.sampler = LengthMixtureSampler(docs, plan.long_thresholds, seed=plan.seed, cycle=plan.cycle)
        self.losses: list[float] = []
        self.batch_log: list[BatchInfo] = []

    @property
    def step(self) -> int:
        return self.opt.step

    def stage_at(self, step: int) -> tuple[int, Stage]:
        edge = 0
        for i, st in enumerate(self.plan.stages):
            edge += st.steps
            if step < edge:
                return i, st
        raise IndexError(f"step {step} is past the end of the plan ({self.plan.total_steps} steps)")

    def make_batch(self, step: int) -> Collated:
        idx, stage = self.stage_at(step)
        rng = np.random.default_rng([self.plan.seed, step])
        draw = lambda: self.sampler.draw(stage.mixture, rng)[1]  # noqa: E731
        rows = fill_rows(draw, self.plan.rows_for(stage), stage.max_len, self.plan.mask_mode)
        out = []
        for row in rows:
            inputs, labels = mlm_corrupt(
                row.token_ids, self.plan.mask_rate, self.plan.mask_scheme, rng, vocab_size=self.model.cfg.vocab_size
            )
            out.append(row.with_labels(inputs, labels))
        col = collate(out, trim=True)
        self.batch_log.append(
            BatchInfo(
                step,
                idx,
                col.shape[0],
                col.shape[1],
                int(col.positions.max()),
                int(col.positions.max()) + 1,
                int((col.mlm_labels != IGNORE_INDEX).sum()),
            )
        )
        return col

    def _batches(self, start: int, stop: int, prefetch: int) -> Iterator[Collated]:
        if prefetch <= 0:
            for s in range(start, stop):
                yield self.make_batch(s)
            return
        q: queue.Queue = queue.Queue(maxsize=prefetch)
        done = object()

        def produce():
            try:
                for s in range(start, stop):
                    q.put(self.make_batch(s))
            except BaseException as exc:  # surfaced in the consumer
                q.put(exc)
            q.put(done)

        threading.Thread(target=produce, daemon=True).start()
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def run(
        self,
        until: Optional[int] = None,
        out_dir=None,
        checkpoint_every: int = 0,
        prefetch: int = 0,
    ) -> list[StageCheckpoint]:
        """Train from the current step to ``until`` (default: end of plan).

        A checkpoint is taken at the end of every stage (and every
        ``checkpoint_every`` steps); it is written to ``out_dir`` when given.
        """
        stop = self.plan.total_steps if until is None else min(until, self.plan.total_steps)
        ends = set(np.cumsum([s.steps for s in self.plan.stages]).tolist())
        saved = []
        for batch in self._batches(self.step, stop, prefetch):
            loss = train_step(self.model, batch, self.opt)
            self.losses.append(float("nan") if loss is None else loss)
            s = self.step
            if s in ends or (checkpoint_every and s % checkpoint_every == 0):
                stage_idx = self.stage_at(s - 1)[0]
                path = None
                if out_dir is not None:
                    path = Path(out_dir) / f"ckpt_stage{stage_idx}_step{s:07d}.nbkt"
                    self.save(path)
                saved.append(StageCheckpoint(stage_idx, s, path))
        return saved

    # -- persistence ------------------------------------------------------
    def state(self) -> tuple[dict[str, str], dict[str, np.ndarray]]:
        config = {f"model.{k}": v for k, v in self.model.cfg.to_flat().items()}
        config.update(plan_to_flat(self.plan))
        config["state.step"] = str(self.step)
        config["state.adam_steps"] = str(self.opt.adam.step_count)
        config["state.sampler_cursors"] = ",".join(str(c) for c in self.sampler.cursors)
        tensors = {f"param/{k}": v.data for k, v in sorted(self.model.params.items())}
        tensors.update(self.opt.adam.state_tensors())
        return config, tensors

    def save(self, path) -> Path:
        config, tensors = self.state()
        return checkpoint.save(path, config, tensors)

    @classmethod
    def resume(cls, path, docs: Sequence[Sequence[int]], plan: Optional[TrainPlan] = None) -> "Pretrainer":
        config, tensors = checkpoint.load(path)
        model = model_from_checkpoint(config, tensors)
        plan = plan if plan is not None else plan_from_flat(config)
        trainer = cls(model, plan, docs)
        trainer.opt.adam.load_state_tensors(tensors, int(config["state.adam_steps"]))
        trainer.opt.step = int(config["state.step"])
        trainer.sampler.cursors = [int(c) for c in config["state.sampler_cursors"].split(",")]
        return trainer


def model_from_checkpoint(config, tensors) -> Encoder:
    from ..autodiff import Tensor

    cfg = ModelConfig.from_flat({k[len("model."):]: v for k, v in config.items() if k.startswith("model.")})
    params = {
        k[len("param/"):]: Tensor(v, requires_grad=True, name=k[len("param/"):])
        for k, v in tensors.items()
        if k.startswith("param/")
    }
    return Encoder(cfg, params)


def load_model(path) -> Encoder:
    return model_from_checkpoint(*checkpoint.load(path))


def save_model(model: Encoder, path, extra: Optional[dict] = None) -> Path:
    config = {f"model.{k}": v for k, v in model.cfg.to_flat().items()}
    config.update(extra or {})
    return checkpoint.save(path, config, {f"param/{k}": v.data for k, v in sorted(model.params.items())})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def stages_to_text(stages) -> str:
    return ";".join(f"{s.max_len}:{s.steps}:{'/'.join(repr(p) for p in s.mixture)}" for s in stages)


def stages_from_text(text: str) -> tuple:
    out = []
    for part in text.split(";"):
        max_len, steps, mix = part.split(":")
        out.append(Stage(int(max_len), int(steps), tuple(float(p) for p in mix.split("/"))))
    return tuple(out)


def plan_to_flat(plan: TrainPlan) -> dict[str, str]:
    import dataclasses

    out = {}
    for f in dataclasses.fields(plan):
        v = getattr(plan, f.name)
        out[f"plan.{f.name}"] = stages_to_text(v) if f.name == "stages" else _fmt(v)
    return out


def plan_from_flat(config: dict[str, str]) -> TrainPlan:
    from ..configfile import coerce_plan_fields

    raw = {k[len("plan."):]: v for k, v in config.items() if k.startswith("plan.")}
    stages = stages_from_text(raw.pop("stages"))
    return TrainPlan(stages=stages, **coerce_plan_fields(raw))


@dataclass
class PretrainResult:
    model: Encoder
    checkpoints: list[StageCheckpoint]
    losses: list[float]
    batch_log: list[BatchInfo] = field(default_factory=list)


def pretrain(
    cfg: ModelConfig,
    docs: Sequence[Sequence[int]],
    plan: TrainPlan,
    out_dir=None,
    model: Optional[Encoder] = None,
    checkpoint_every: int = 0,
    prefetch: int = 0,
) -> PretrainResult:
    """Run every stage of ``plan`` in order, carrying optimizer state across stage boundaries."""
    model = model if model is not None else Encoder(cfg, seed=plan.seed)
    trainer = Pretrainer(model, plan, docs)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    ckpts = trainer.run(out_dir=out_dir, checkpoint_every=checkpoint_every, prefetch=prefetch)
    return PretrainResult(model, ckpts, trainer.losses, trainer.batch_log)
