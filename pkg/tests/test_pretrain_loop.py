"""End-to-end pretraining loop at tiny scale: run/loss-CSV determinism,
mid-run checkpoint resume, and output layout."""

import csv

import numpy as np
import pytest

from memssl.config import parse_config
from memssl.data import CorpusSpec, generate_synthetic_corpus, load_manifest
from memssl.trainer import pretrain

TINY_OVERRIDES = {
    "encoder.patch_size": "8",
    "encoder.embed_dim": "32",
    "encoder.depth": "1",
    "encoder.heads": "2",
    "encoder.global_view_px": "32",
    "encoder.local_view_px": "16",
    "encoder.proj_hidden_dim": "32",
    "encoder.proj_out_dim": "16",
    "memory.capacity": "64",
    "memory.block_size": "16",
    "pretrain.batch_size": "4",
    "pretrain.epochs": "2",
    "pretrain.checkpoint_every": "1",
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(n_modalities=2, n_classes=2, samples_per_class=6, image_px=32)
    manifest = generate_synthetic_corpus(spec, seed=5, out_dir=out)
    return load_manifest(manifest)


def cfg(**extra):
    overrides = dict(TINY_OVERRIDES)
    overrides.update(extra)
    return parse_config(None, overrides=overrides)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_two_runs_identical(tmp_path, corpus):
    final_a = pretrain(cfg(), corpus, tmp_path / "a")
    final_b = pretrain(cfg(), corpus, tmp_path / "b")
    assert (tmp_path / "a/losses.csv").read_bytes() == (tmp_path / "b/losses.csv").read_bytes()
    assert final_a.read_bytes() == final_b.read_bytes()
    assert (tmp_path / "a/run_manifest.ini").read_bytes() == (tmp_path / "b/run_manifest.ini").read_bytes()


def test_seed_changes_losses(tmp_path, corpus):
    pretrain(cfg(), corpus, tmp_path / "a")
    pretrain(cfg(**{"run.seed": "1"}), corpus, tmp_path / "b")
    assert (tmp_path / "a/losses.csv").read_bytes() != (tmp_path / "b/losses.csv").read_bytes()


def test_resume_is_bitwise_identical(tmp_path, corpus):
    config = cfg(**{"pretrain.epochs": "4", "pretrain.checkpoint_every": "2"})
    final_full = pretrain(config, corpus, tmp_path / "full")
    mid = tmp_path / "full/ckpt_epoch0002.mmfm"
    assert mid.exists()
    final_resumed = pretrain(config, corpus, tmp_path / "resumed", resume_from=mid)
    assert final_resumed.read_bytes() == final_full.read_bytes()

    full_rows = read_rows(tmp_path / "full/losses.csv")
    resumed_rows = read_rows(tmp_path / "resumed/losses.csv")
    overlap = len(resumed_rows) - 1
    assert overlap > 0
    assert resumed_rows[1:] == full_rows[-overlap:]


def test_zero_epochs_emits_only_initial_checkpoint(tmp_path, corpus):
    out = tmp_path / "zero"
    final = pretrain(cfg(**{"pretrain.epochs": "0"}), corpus, out)
    assert final.name == "initial.mmfm"
    assert not (out / "final.mmfm").exists()
    rows = read_rows(out / "losses.csv")
    assert rows == [["step", "epoch", "lr", "wd", "tau_t", "momentum", "loss"]]


def test_output_layout_and_loss_csv_columns(tmp_path, corpus):
    out = tmp_path / "run"
    pretrain(cfg(), corpus, out)
    assert (out / "initial.mmfm").exists()
    assert (out / "ckpt_epoch0001.mmfm").exists()
    assert (out / "ckpt_epoch0002.mmfm").exists()
    assert (out / "final.mmfm").exists()
    assert (out / "run_manifest.ini").exists()
    rows = read_rows(out / "losses.csv")
    assert rows[0] == ["step", "epoch", "lr", "wd", "tau_t", "momentum", "loss"]
    # 12 train records per modality, 2 drawn per batch: 6 steps/epoch, 2 epochs
    assert len(rows) == 1 + 12
    steps = [int(r[0]) for r in rows[1:]]
    assert steps == list(range(12))
    losses = [float(r[6]) for r in rows[1:]]
    assert all(np.isfinite(losses))
