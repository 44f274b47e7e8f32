import subprocess
import sys

import numpy as np
import pytest

from temde.bench import fit_exponent, parse_results
from temde.cli import build_parser, main
from temde.model import ModelConfig, RetrievalModel, load_model
from temde.coder import TemdeConfig

SUBCOMMANDS = ["generate-data", "train", "eval", "bench", "sketch-dump"]
SMALL_DATA = ["--n-items", "200", "--n-latents", "6", "--vocab-size", "64", "--feat-dim", "16"]
SMALL_MODEL = ["--n", "4", "--k", "4", "--d", "4", "--embed-dim", "16", "--attn-width", "16", "--batch-size", "16"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate-data", "--out", str(out), "--seed", "1"] + SMALL_DATA) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    # summed-negative loss throughout; this size collapses under hardest negatives at high lr
    args = ["train", "--data", str(dataset), "--out", str(out), "--epochs", "20", "--lr", "1e-3",
            "--warmup-epochs", "100", "--n", "8", "--k", "8", "--d", "4", "--embed-dim", "32", "--batch-size", "16"]
    assert main(args) == 0
    return out


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "temde", *args], capture_output=True, text=True)


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_documents_every_flag(command):
    proc = run_cli(command, "--help")
    assert proc.returncode == 0
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in proc.stdout
        assert action.help, f"{action.dest} has no help text"


def test_bad_flags_exit_2():
    assert run_cli("train", "--epochs", "many").returncode == 2
    assert run_cli("frobnicate").returncode == 2
    assert run_cli("train").returncode == 2  # missing --data/--out


def test_generate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["generate-data", "--out", str(tmp_path / name), "--seed", "5"] + SMALL_DATA) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_zero_epochs_checkpoint_is_the_initialization(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--epochs", "0", "--seed", "4"]
                + SMALL_MODEL) == 0
    saved = load_model(tmp_path / "best.temd")
    fresh = RetrievalModel(saved.cfg, seed=4)
    for (_, a), (_, b) in zip(saved.state_arrays(), fresh.state_arrays()):
        np.testing.assert_array_equal(a, b)
    assert "epochs=0" in (tmp_path / "manifest.txt").read_text()


def test_reference_configuration_flags(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--backend", "temde",
                 "--n", "16", "--k", "8", "--d", "8", "--epochs", "0"]) == 0
    cfg = load_model(tmp_path / "best.temd").cfg.temde
    assert (cfg.n_divisions, cfg.n_centroids, cfg.inner_dim) == (16, 8, 8)


@pytest.mark.parametrize("backend", ["temde", "attention"])
def test_train_twice_gives_identical_metric_files(dataset, tmp_path, backend):
    for name in ("a", "b"):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path / name), "--epochs", "2",
                     "--backend", backend] + SMALL_MODEL) == 0
    assert (tmp_path / "a" / "history.tsv").read_bytes() == (tmp_path / "b" / "history.tsv").read_bytes()
    assert (tmp_path / "a" / "best.temd").read_bytes() == (tmp_path / "b" / "best.temd").read_bytes()


def test_grid_writes_summary(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--epochs", "1",
                 "--embed-dim", "16", "--batch-size", "16", "--d", "4", "--n", "2,4", "--k", "3,4"]) == 0
    lines = (tmp_path / "summary.tsv").read_text().splitlines()
    assert lines[0].startswith("# N\tK")
    assert [tuple(line.split("\t")[:2]) for line in lines[1:]] == [("2", "3"), ("2", "4"), ("4", "3"), ("4", "4")]
    assert all(len(line.split("\t")) == 8 for line in lines[1:])
    assert (tmp_path / "n4_k3" / "best.temd").exists()


def _eval(model, data, split, out):
    assert main(["eval", "--model", str(model), "--data", str(data), "--split", split, "--out", str(out)]) == 0
    rows = [line.split("\t") for line in out.read_text().splitlines() if not line.startswith("#")]
    return [float(r[2]) for r in rows]


def test_eval_reports_both_directions_and_overfits(trained, dataset, tmp_path):
    # the converged model is the final one; best.temd may come from an early epoch
    train_r1 = _eval(trained / "last.temd", dataset, "train", tmp_path / "train.tsv")
    val_r1 = _eval(trained / "last.temd", dataset, "val", tmp_path / "val.tsv")
    text = (tmp_path / "val.tsv").read_text()
    assert "direction=text_retrieval" in text and "direction=image_retrieval" in text
    assert len(train_r1) == len(val_r1) == 2
    assert all(t >= v for t, v in zip(train_r1, val_r1))


def test_missing_model_is_a_runtime_failure(dataset, tmp_path):
    assert main(["eval", "--model", str(tmp_path / "nope.temd"), "--data", str(dataset)]) == 1
    assert main(["sketch-dump", "--model", str(tmp_path / "nope.temd"), "--data", str(dataset)]) == 1


@pytest.mark.parametrize("modality", ["text", "image"])
def test_sketch_dump_rows(trained, dataset, tmp_path, modality):
    out = tmp_path / "dump.txt"
    assert main(["sketch-dump", "--model", str(trained / "best.temd"), "--data", str(dataset),
                 "--item", "3", "--modality", modality, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# temde-sketch N=8 K=8"
    captions = (dataset / "captions.tsv").read_text().splitlines()
    seg_counts = dict(line.split("\t") for line in (dataset / "segments.tsv").read_text().splitlines())
    t = len(captions[3].split("\t")[1].split()) if modality == "text" else int(seg_counts["3"])
    assert len(lines) - 1 == t * 8


def test_config_file_with_flag_override(dataset, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sketch shape\nn=2\nk = 3\nembed-dim=16\nd=4\nepochs=0\nseed=7  # trailing comment\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "o"),
                 "--k", "5"]) == 0
    model = load_model(tmp_path / "o" / "best.temd")
    assert (model.cfg.temde.n_divisions, model.cfg.temde.n_centroids, model.cfg.embed_dim) == (2, 5, 16)
    manifest = (tmp_path / "o" / "manifest.txt").read_text()
    assert "# seed=7" in manifest and "# k=[5]" in manifest


def test_config_file_rejects_unknown_keys(dataset, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    assert run_cli("train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path)).returncode == 2


def test_bench_table(tmp_path):
    out = tmp_path / "bench.tsv"
    assert main(["bench", "--t", "64,256,1024,4096", "--out", str(out)]) == 0
    text = out.read_text()
    rows = [line for line in text.splitlines() if not line.startswith("#")]
    slopes = [line for line in text.splitlines() if line.startswith("# slope=")]
    assert len(rows) == 12 and len(slopes) == 3
    assert text.startswith("# machine=")
    parsed = parse_results(text)
    assert sorted(parsed) == ["full_self_attention", "global_sim_attention", "temde"]
    for table in parsed.values():
        slope, r2 = fit_exponent(table)
        assert np.isfinite(slope) and np.isfinite(r2)


def test_bench_rejects_too_few_repeats():
    proc = run_cli("bench", "--t", "8,16,32,64", "--repeats", "1")
    assert proc.returncode == 2
    assert "repeats" in proc.stderr


def test_manifest_echoed_before_running(dataset, tmp_path):
    proc = run_cli("generate-data", "--out", str(tmp_path / "g"), "--n-items", "40", "--vocab-size", "64",
                   "--n-latents", "4", "--feat-dim", "8")
    assert proc.returncode == 0
    assert "# n_items=40" in proc.stderr and "# seed=0" in proc.stderr
