"""Seed-averaged behaviour of the full pipelines (slow)."""

import numpy as np
import pytest

from mhrnnt.experiments import build_datasets, decode_dataset, train_base
from mhrnnt.scoring import score_set

import pipeline_runs as runs

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("seed", runs.SEEDS)
def test_second_iteration_no_worse(seed):
    record = runs.finetune_record(seed)
    for label in ("SH fine-tuning (1 hypothesis)", "MH fine-tuning (2 hypotheses)"):
        first = record.wer(f"{label}, iteration 1", "noisy")
        second = record.wer(f"{label}, iteration 2", "noisy")
        assert second <= first + 0.5, (label, first, second)


def test_dropout_variants_disagree():
    record = runs.finetune_record(0)
    b1 = record.hypotheses[("test-noisy", "base1")]
    b2 = record.hypotheses[("test-noisy", "base2")]
    ids = sorted(b1)[:50]
    assert sum(b1[u].transcript != b2[u].transcript for u in ids) >= 1


def test_noisy_is_harder_than_clean():
    clean, noisy = [], []
    for seed in runs.SEEDS:
        cfg = runs.config(seed, test_conditions=("clean", "noisy"))
        data = build_datasets(cfg)
        model = runs.bases(seed, 2)["base1"]
        for cond, out in (("clean", clean), ("noisy", noisy)):
            ds = data[f"test-{cond}"]
            out.append(score_set(ds.label_map(), decode_dataset(model, ds, cfg.beam, "base1")).wer)
    assert np.mean(noisy) > np.mean(clean), (clean, noisy)


def test_cached_bases_match_fresh_training():
    cfg = runs.config(0)
    data = build_datasets(cfg)
    fresh = train_base(cfg, data["train"], data["dev"], 1)
    assert fresh.model == runs.bases(0, 2)["base2"].model


def test_mh_finetuning_helps_on_most_seeds():
    wins = 0
    for seed in runs.SEEDS:
        record = runs.finetune_record(seed)
        wins += record.wer("MH fine-tuning (2 hypotheses), iteration 1", "noisy") < record.wer("Base model 1", "noisy")
    assert wins >= 4
