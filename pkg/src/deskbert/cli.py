"""Command-line entry point: ``deskbert <subcommand> [--config PATH] [--seed N] [--out DIR] [--override k=v]``."""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import configfile
from .model.checkpoint import load as load_checkpoint
from .model.config import ConfigError, param_count

SUBCOMMANDS = (
    "pretrain",
    "finetune",
    "eval-pppl",
    "eval-retrieval",
    "eval-classify",
    "bench",
    "ablate",
    "inspect-ckpt",
)


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deskbert", description="Train, fine-tune, evaluate and benchmark small encoders.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        if name == "inspect-ckpt":
            s.add_argument("checkpoint")
            continue
        s.add_argument("--config", help="INI run configuration")
        s.add_argument("--seed", type=int, help="overrides train.seed")
        s.add_argument("--out", default="runs", help="output directory (default: runs)")
        s.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    return p


# -- helpers -----------------------------------------------------------------


def version_string() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0.0.0"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def write_manifest(out: Path, command: str, run: configfile.RunConfig, walls: dict, outputs: list) -> Path:
    manifest = {
        "command": command,
        "config_sha256": run.digest(),
        "seed": run.plan.seed,
        "version": version_string(),
        "wall_seconds": {k: round(v, 6) for k, v in walls.items()},
        "outputs": sorted(outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_lines(path) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    return [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]


def corpus_texts(run: configfile.RunConfig, path: str = "") -> list[str]:
    from .data.synthetic import topic_markov_corpus

    if path:
        return read_lines(path)
    d = run.data
    return topic_markov_corpus(
        int(d["synthetic_docs"]),
        median_len=float(d["synthetic_median_len"]),
        max_len=int(d["synthetic_max_len"]),
        seed=int(d["synthetic_seed"]),
    )


def make_tokenizer(run: configfile.RunConfig, texts: Sequence[str]):
    from .data.tokenizer import Tokenizer, build_vocab

    if run.data["vocab"]:
        p = Path(run.data["vocab"])
        if not p.is_file():
            raise ConfigError(f"vocab file not found: {p}")
        return Tokenizer.from_file(p, mode=run.data["tokenizer"])
    return build_vocab(texts, max_size=int(run.data["max_vocab"]), mode=run.data["tokenizer"])


def load_trained(path: str):
    """Model and tokenizer from a checkpoint and the ``vocab.txt`` beside it."""
    from .data.tokenizer import Tokenizer
    from .train.pretrain import load_model

    if not path:
        raise ConfigError("a checkpoint path is required (set checkpoint= in the section or via --override)")
    ck = Path(path)
    if not ck.is_file():
        raise ConfigError(f"checkpoint not found: {ck}")
    vocab = ck.parent / "vocab.txt"
    if not vocab.is_file():
        raise ConfigError(f"vocab.txt not found beside checkpoint {ck}")
    return load_model(ck), Tokenizer.from_file(vocab, mode="whitespace-vocab")


def floats(text: str) -> tuple:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def ints(text: str) -> tuple:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


# -- subcommands ---------------------------------------------------------------


def cmd_pretrain(run, out: Path, walls: dict) -> list[str]:
    from .train.pretrain import pretrain

    t = time.perf_counter()
    texts = corpus_texts(run, run.data["corpus"])
    tok = make_tokenizer(run, texts)
    docs = [tok.encode(x, add_special=True) for x in texts]
    model_cfg = run.model.replace(vocab_size=tok.vocab_size)
    walls["data"] = time.perf_counter() - t
    t = time.perf_counter()
    res = pretrain(model_cfg, docs, run.plan, out_dir=out)
    walls["train"] = time.perf_counter() - t
    tok.save(out / "vocab.txt")
    lines = ["step\tstage\tloss\trows\twidth\tlongest"]
    for info, loss in zip(res.batch_log, res.losses):
        lines.append(f"{info.step}\t{info.stage}\t{loss:.6f}\t{info.rows}\t{info.width}\t{info.longest}")
    (out / "losses.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"trained {len(res.losses)} steps; final loss {res.losses[-1]:.4f}")
    for c in res.checkpoints:
        print(f"checkpoint stage {c.stage} step {c.step}: {c.path}")
    return ["vocab.txt", "losses.tsv"] + [c.path.name for c in res.checkpoints]


def _pairs(run, section: dict, tok=None):
    from .contrastive import read_pairs
    from .data.synthetic import paired_pattern_task

    if section["pairs"]:
        return read_pairs(section["pairs"])
    n = int(run.finetune["synthetic_pairs"])
    return paired_pattern_task(n, seed=run.plan.seed)


def cmd_finetune(run, out: Path, walls: dict) -> list[str]:
    from .contrastive import ContrastiveConfig, finetune_contrastive, group_by_task, split_pairs
    from .data.tokenizer import build_vocab
    from .eval.retrieval import pair_retrieval
    from .model.encoder import Encoder
    from .train.pretrain import save_model

    f = run.finetune
    pairs = _pairs(run, f)
    if f["checkpoint"]:
        model, tok = load_trained(f["checkpoint"])
    else:
        texts = [t for ex in pairs for t in (ex.instruction, ex.query, ex.positive, *ex.hard_negatives)]
        tok = build_vocab(texts)
        model = Encoder(run.model.replace(vocab_size=tok.vocab_size), seed=run.plan.seed)
    split = split_pairs(pairs, 0.2, seed=run.plan.seed)
    cfg = ContrastiveConfig(
        temperature=float(f["temperature"]),
        similarity=str(f["similarity"]),
        alpha=float(f["alpha"]),
        steps=int(f["steps"]),
        batch_size=int(f["batch_size"]),
        lr=float(f["lr"]),
        weight_decay=float(f["weight_decay"]),
        seed=run.plan.seed,
    )
    history: list = []
    t = time.perf_counter()
    finetune_contrastive(model, tok, group_by_task(split.train), cfg, history)
    walls["finetune"] = time.perf_counter() - t
    score = pair_retrieval(model, tok, split.held_out)
    save_model(model, out / "finetuned.nbkt")
    tok.save(out / "vocab.txt")
    lines = ["step\tdataset\tloss"] + [f"{i}\t{name}\t{loss:.6f}" for i, (name, loss) in enumerate(history)]
    (out / "finetune_log.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "retrieval.tsv").write_text(
        f"split\tqueries\tacc_at_1\tmrr\nheld_out\t{len(split.held_out)}\t{score.acc_at_1:.6f}\t{score.mrr:.6f}\n",
        encoding="utf-8",
    )
    print(f"held-out retrieval acc@1 {score.acc_at_1:.4f}  MRR {score.mrr:.4f}")
    return ["finetuned.nbkt", "vocab.txt", "finetune_log.tsv", "retrieval.tsv"]


def cmd_eval_pppl(run, out: Path, walls: dict) -> list[str]:
    from .eval.pppl import pppl_curve

    e = run.eval
    model, tok = load_trained(e["checkpoint"])
    texts = corpus_texts(run, e["corpus"])
    seqs = [tok.encode(x, add_special=True) for x in texts]
    cap = model.cfg.position_capacity()
    seqs = [s for s in seqs if len(s) <= cap]
    t = time.perf_counter()
    rep = pppl_curve(
        model, seqs, bins=floats(e["bins"]), sample=int(e["sample"]), min_len=int(e["min_len"]),
        seed=run.plan.seed, chunk=int(e["chunk"]),
    )
    walls["eval"] = time.perf_counter() - t
    (out / "pppl_records.tsv").write_text(rep.records_tsv(), encoding="utf-8")
    (out / "pppl_bins.tsv").write_text(rep.bins_tsv(), encoding="utf-8")
    (out / "pppl_bins.csv").write_text(rep.bins_csv(), encoding="utf-8")
    print(rep.bins_tsv(), end="")
    return ["pppl_records.tsv", "pppl_bins.tsv", "pppl_bins.csv"]


def cmd_eval_retrieval(run, out: Path, walls: dict) -> list[str]:
    from .eval.retrieval import pair_retrieval

    model, tok = load_trained(run.eval["checkpoint"])
    pairs = _pairs(run, run.eval)
    t = time.perf_counter()
    score = pair_retrieval(model, tok, pairs)
    walls["eval"] = time.perf_counter() - t
    (out / "retrieval.tsv").write_text(
        f"queries\tacc_at_1\tmrr\n{len(pairs)}\t{score.acc_at_1:.6f}\t{score.mrr:.6f}\n", encoding="utf-8"
    )
    print(f"acc@1 {score.acc_at_1:.4f}  MRR {score.mrr:.4f}")
    return ["retrieval.tsv"]


def cmd_eval_classify(run, out: Path, walls: dict) -> list[str]:
    from .data.synthetic import topic_markov_corpus
    from .eval.classify import Grid, classify_finetune

    e = run.eval
    model, tok = load_trained(e["checkpoint"])
    if e["labeled"]:
        texts, labels = [], []
        for ln in read_lines(e["labeled"]):
            lab, _, text = ln.partition("\t")
            labels.append(float(lab) if "." in lab else int(lab))
            texts.append(text)
        labels = np.asarray(labels)
    else:
        texts, topics = topic_markov_corpus(120, median_len=20, max_len=60, seed=run.plan.seed + 99, with_topics=True)
        labels = np.asarray(topics) % 2
    grid = Grid(floats(e["lrs"]), ints(e["batch_sizes"]), floats(e["weight_decays"]))
    t = time.perf_counter()
    res = classify_finetune(model, tok, texts, labels, grid, int(e["epochs"]), int(e["patience"]), seed=run.plan.seed)
    walls["eval"] = time.perf_counter() - t
    lines = ["lr\tbatch_size\tweight_decay\tbest\tevaluations\tstopped_early"]
    for r in res.runs:
        lines.append(f"{r.lr!r}\t{r.batch_size}\t{r.weight_decay!r}\t{r.best:.6f}\t{len(r.evals)}\t{r.stopped_early}")
    (out / "classify.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best dev {res.task} score {res.best_score:.4f} with {res.best_params}")
    return ["classify.tsv"]


def cmd_bench(run, out: Path, walls: dict) -> list[str]:
    from .bench import throughput_bench

    b = run.bench
    budget = float(b["memory_budget_mb"])
    t = time.perf_counter()
    rep = throughput_bench(
        run.model,
        ints(b["seq_lens"]),
        max_batch=int(b["max_batch"]),
        steps=int(b["steps"]),
        repeats=int(b["repeats"]),
        warmup=int(b["warmup"]),
        memory_budget=int(budget * 2**20) if budget > 0 else None,
        seed=run.plan.seed,
    )
    walls["bench"] = time.perf_counter() - t
    (out / "bench.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    print(rep.to_tsv(), end="")
    return ["bench.tsv"]


def cmd_ablate(run, out: Path, walls: dict) -> list[str]:
    from .ablation import run_ablation_matrix, toy_ablation_spec, toy_data

    a = run.ablate
    spec = toy_ablation_spec(steps=int(a["steps"]), seed=run.plan.seed)
    names = [n.strip() for n in str(a["configs"]).split(",") if n.strip()]
    unknown = set(names) - set(spec.names)
    if unknown:
        raise ConfigError(f"unknown ablation configs: {sorted(unknown)}")
    t = time.perf_counter()
    rep = run_ablation_matrix(spec, toy_data(eval_docs=int(a["eval_docs"])), names=names)
    walls["ablate"] = time.perf_counter() - t
    (out / "ablation.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    print(rep.to_tsv(), end="")
    return ["ablation.tsv"]


def cmd_inspect(path: str) -> int:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    config, tensors = load_checkpoint(p)
    print("[config]")
    for k in sorted(config):
        print(f"{k} = {config[k]}")
    print("[tensors]")
    total = 0
    groups: dict[str, int] = {}
    for name in sorted(tensors):
        arr = tensors[name]
        print(f"{name}\t{'x'.join(str(s) for s in arr.shape) or 'scalar'}\t{arr.size}")
        group = name.split("/", 1)[0] if "/" in name else "other"
        groups[group] = groups.get(group, 0) + arr.size
        total += arr.size
    print("[totals]")
    for g in sorted(groups):
        print(f"{g}\t{groups[g]}")
    print(f"all\t{total}")
    if any(k.startswith("model.") for k in config):
        from .train.pretrain import model_from_checkpoint

        cfg = model_from_checkpoint(config, tensors).cfg
        expected = param_count(cfg)
        got = groups.get("param", 0)
        print(f"param_count\t{expected}\t{'match' if expected == got else 'MISMATCH'}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval-pppl": cmd_eval_pppl,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-classify": cmd_eval_classify,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand. Exit 0 on success, 1 on invalid input, 2 on a runtime failure."""
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        if args.command == "inspect-ckpt":
            return cmd_inspect(args.checkpoint)
        run = configfile.load(args.config, args.override, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        walls: dict = {}
        t = time.perf_counter()
        outputs = COMMANDS[args.command](run, out, walls)
        walls["total"] = time.perf_counter() - t
        (out / "config.resolved").write_text(configfile.canonical_text(run), encoding="utf-8")
        write_manifest(out, args.command, run, walls, outputs + ["config.resolved"])
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())
