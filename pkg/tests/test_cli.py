import json
import subprocess
import sys

import pytest

from deskbert.cli import cli_main

TINY = """\
[model]
n_layers = 1
d_model = 16
n_heads = 2
max_positions = 128
align64 = false

[train]
warmup_steps = 2
batch_tokens = 256
long_thresholds = 32,64

[stage.1]
max_len = 32
steps = 4

[stage.2]
max_len = 128
steps = 2
mixture = 0.2,0.4,0.4

[data]
synthetic_docs = 150
synthetic_median_len = 30

[finetune]
steps = 3
batch_size = 8
synthetic_pairs = 40

[eval]
bins = 16,32
sample = 4
epochs = 1

[bench]
seq_lens = 16,256
max_batch = 2
steps = 1
repeats = 1
warmup = 0
"""


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def pretrained(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert cli_main(["pretrain", "--config", str(cfg_path), "--seed", "3", "--out", str(out)]) == 0
    return out


def test_pretrain_outputs(pretrained):
    names = {p.name for p in pretrained.iterdir()}
    assert {"vocab.txt", "losses.tsv", "config.resolved", "manifest.json"} <= names
    assert {"ckpt_stage0_step0000004.nbkt", "ckpt_stage1_step0000006.nbkt"} <= names
    manifest = json.loads((pretrained / "manifest.json").read_text())
    assert manifest["command"] == "pretrain" and manifest["seed"] == 3
    assert len(manifest["config_sha256"]) == 64
    assert "plan.seed=3" in (pretrained / "config.resolved").read_text()


def test_same_seed_gives_identical_files(cfg_path, pretrained, tmp_path):
    assert cli_main(["pretrain", "--config", str(cfg_path), "--seed", "3", "--out", str(tmp_path)]) == 0
    for name in ("ckpt_stage1_step0000006.nbkt", "losses.tsv", "vocab.txt", "config.resolved"):
        assert (tmp_path / name).read_bytes() == (pretrained / name).read_bytes(), name


def test_different_seed_changes_checkpoint(cfg_path, pretrained, tmp_path):
    assert cli_main(["pretrain", "--config", str(cfg_path), "--seed", "4", "--out", str(tmp_path)]) == 0
    name = "ckpt_stage1_step0000006.nbkt"
    assert (tmp_path / name).read_bytes() != (pretrained / name).read_bytes()


def test_inspect_checkpoint(pretrained, capsys):
    assert cli_main(["inspect-ckpt", str(pretrained / "ckpt_stage0_step0000004.nbkt")]) == 0
    out = capsys.readouterr().out
    assert "[config]" in out and "[tensors]" in out and "[totals]" in out
    assert "state.step = 4" in out
    assert out.rstrip().splitlines()[-1].endswith("match")


def test_eval_pppl_reports_are_reproducible(cfg_path, pretrained, tmp_path):
    ck = str(pretrained / "ckpt_stage1_step0000006.nbkt")
    for d in ("a", "b"):
        args = ["eval-pppl", "--config", str(cfg_path), "--out", str(tmp_path / d), "--override", f"eval.checkpoint={ck}"]
        assert cli_main(args) == 0
    for name in ("pppl_records.tsv", "pppl_bins.tsv", "pppl_bins.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "pppl_bins.tsv").read_text().splitlines()[0] == "length_bin\tmean_pppl\tcount"


def test_finetune_then_retrieval(cfg_path, pretrained, tmp_path):
    ck = pretrained / "ckpt_stage1_step0000006.nbkt"
    args = ["finetune", "--config", str(cfg_path), "--out", str(tmp_path / "ft"), "--override", f"finetune.checkpoint={ck}"]
    assert cli_main(args) == 0
    assert len((tmp_path / "ft" / "finetune_log.tsv").read_text().splitlines()) == 4
    ft = tmp_path / "ft" / "finetuned.nbkt"
    args = ["eval-retrieval", "--config", str(cfg_path), "--out", str(tmp_path / "r"), "--override", f"eval.checkpoint={ft}"]
    assert cli_main(args) == 0
    head, row = (tmp_path / "r" / "retrieval.tsv").read_text().splitlines()
    assert head == "queries\tacc_at_1\tmrr" and row.startswith("40\t")


def test_eval_classify(cfg_path, pretrained, tmp_path):
    ck = pretrained / "ckpt_stage0_step0000004.nbkt"
    args = ["eval-classify", "--config", str(cfg_path), "--out", str(tmp_path), "--override", f"eval.checkpoint={ck}"]
    assert cli_main(args) == 0
    assert (tmp_path / "classify.tsv").read_text().startswith("lr\tbatch_size")


def test_bench_marks_unsupported_lengths(cfg_path, tmp_path):
    assert cli_main(["bench", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    rows = [ln.split("\t") for ln in (tmp_path / "bench.tsv").read_text().splitlines()[1:]]
    assert [(r[0], r[1]) for r in rows] == [("16", "ok"), ("256", "unsupported")]


def test_ablate_single_config(cfg_path, tmp_path):
    args = ["ablate", "--config", str(cfg_path), "--out", str(tmp_path), "--override", "ablate.steps=2",
            "--override", "ablate.configs=M0,M3"]
    assert cli_main(args) == 0
    lines = (tmp_path / "ablation.tsv").read_text().splitlines()
    assert [ln.split("\t")[:3] for ln in lines[1:]] == [["M0", "-", "trained"], ["M3", "M2", "skipped"]]


@pytest.mark.parametrize(
    "argv",
    [
        ["pretrain", "--config", "/nonexistent.cfg"],
        ["pretrain", "--bogus"],
        ["frobnicate"],
        ["pretrain", "--override", "train.nonsense=1"],
        ["pretrain", "--override", "nosection"],
        ["ablate", "--override", "ablate.configs=M42"],
        ["inspect-ckpt", "/nonexistent.nbkt"],
    ],
)
def test_invalid_input_exits_one(argv, tmp_path, capsys):
    if argv[0] == "pretrain" or argv[0] == "ablate":
        argv = argv + ["--out", str(tmp_path)]
    assert cli_main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exits_two(cfg_path, tmp_path):
    bad = tmp_path / "bad.nbkt"
    bad.write_bytes(b"not a checkpoint")
    (tmp_path / "vocab.txt").write_text("x\n")
    args = ["eval-pppl", "--config", str(cfg_path), "--out", str(tmp_path / "o"), "--override", f"eval.checkpoint={bad}"]
    assert cli_main(args) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "deskbert", "pretrain", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 1
    proc = subprocess.run([sys.executable, "-m", "deskbert", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pretrain" in proc.stdout
