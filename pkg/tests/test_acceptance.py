"""Acceptance criteria 1-9, one PASS/FAIL line each in the terminal summary.

Criteria 5-7 train real pipelines over five seeds and take several minutes.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import random_lattice, tiny_config
from mhrnnt.decode import beam_decode, sequence_score
from mhrnnt.experiments import run_finetune
from mhrnnt.gradcheck import run_gradcheck
from mhrnnt.loss import brute_force_loss, multi_hypothesis_loss, multi_hypothesis_loss_grad, rnnt_loss, rnnt_loss_grad
from mhrnnt.model import TransducerModel, init_model, loss_and_param_grads
from mhrnnt.scoring import edit_distance, score_set, wer

import pipeline_runs as runs


def test_criterion_1_loss_matches_brute_force(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, n = 0.0, 0
    for T, L, V in itertools.product(range(1, 5), range(0, 4), range(1, 5)):
        for _ in range(5):
            logits, target = random_lattice(rng, T, L, V)
            worst = max(worst, abs(rnnt_loss(logits, target) - brute_force_loss(logits, target)))
            n += 1
    elapsed = time.perf_counter() - start
    ok = n >= 200 and worst < 1e-9 and elapsed < 10
    criterion(1, ok, f"{n} cases, max |diff| {worst:.2e} (< 1e-9), {elapsed:.1f}s (< 10s)")
    assert ok


def test_criterion_2_parameter_gradients(criterion):
    start = time.perf_counter()
    results = run_gradcheck(n_cases=20, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in results)
    kinds = {(r.multi, r.train_mode) for r in results}
    ok = len(results) >= 20 and worst < 1e-3 and elapsed < 60
    criterion(2, ok, f"{len(results)} cases {sorted(kinds)}, max rel err {worst:.2e} (< 1e-3), {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_3_multi_hypothesis_sum(criterion):
    rng = np.random.default_rng(7)
    sum_err = grad_err = 0.0
    exact = True
    for _ in range(50):
        T, V, M = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        pairs = [random_lattice(rng, T, int(rng.integers(0, 4)), V) for _ in range(M)]
        singles = [rnnt_loss(lp, t) for lp, t in pairs]
        sum_err = max(sum_err, abs(multi_hypothesis_loss(pairs) - sum(singles)))
        total, grads = multi_hypothesis_loss_grad(pairs)
        for (lp, t), g in zip(pairs, grads):
            grad_err = max(grad_err, np.abs(g - rnnt_loss_grad(lp, t)[1]).max())
        exact &= multi_hypothesis_loss([pairs[0]] * M) == M * singles[0]

    # through the model: the parameter gradient of an M-hypothesis target is the sum of single gradients
    model = init_model(tiny_config(dropout_rate=0.3))
    x = rng.normal(size=(4, 3))
    hyps = [(1, 2), (3,), (2, 2, 4)]
    loss, g = loss_and_param_grads(model, x, hyps, True, 11)
    parts = [loss_and_param_grads(model, x, h, True, 11) for h in hyps]
    sum_err = max(sum_err, abs(loss - sum(p[0] for p in parts)))
    for k in g:
        grad_err = max(grad_err, np.abs(g[k] - sum(p[1][k] for p in parts)).max())
    same, _ = loss_and_param_grads(model, x, [hyps[0]] * 3, True, 11)
    exact &= same == 3 * parts[0][0]

    ok = sum_err < 1e-12 and grad_err < 1e-10 and exact
    criterion(3, ok, f"|MH - sum| {sum_err:.1e} (< 1e-12), grad diff {grad_err:.1e} (< 1e-10), "
                     f"M identical == M x single: {exact}")
    assert ok


def test_criterion_4_beam_matches_exhaustive(criterion):
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng([seed, 4])
        V, T = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        m = init_model(tiny_config(vocab_size=V, feat_dim=2, seed=seed))
        model = TransducerModel(m.config, {k: 3.0 * v for k, v in m.params.items()})
        x = 2.0 * rng.normal(size=(T, 2))
        candidates = [s for L in range(4) for s in itertools.product(range(1, V + 1), repeat=L)]
        best = max(candidates, key=lambda s: sequence_score(model, x, s))
        hits += beam_decode(model, x, beam_size=20, max_length=3)[0].transcript == best
    ok = hits == 50
    criterion(4, ok, f"{hits}/50 tiny cases agree with exhaustive search")
    assert ok


@pytest.mark.slow
def test_criterion_5_finetuning_ordering(criterion):
    start = time.perf_counter()
    records = [runs.finetune_record(s) for s in runs.SEEDS]
    elapsed = time.perf_counter() - start
    base = runs.mean_wer(records, "Base model 1")
    # compared after two fine-tuning iterations
    sh = runs.mean_wer(records, "SH fine-tuning (1 hypothesis), iteration 2")
    mh = runs.mean_wer(records, "MH fine-tuning (2 hypotheses), iteration 2")
    ok = mh < sh < base and sh - mh >= 1.0 and elapsed < 15 * 60
    criterion(5, ok, f"{len(records)} seeds, 2 iterations: base1 {base:.2f} > SH {sh:.2f} > MH {mh:.2f}, "
                     f"SH - MH = {sh - mh:.2f} (>= 1.0), {elapsed / 60:.1f} min (< 15)")
    assert ok


@pytest.mark.slow
def test_criterion_6_stronger_base(criterion):
    records = [runs.stronger_base_record(s) for s in runs.SEEDS]
    b1 = runs.mean_wer(records, "Base model 1")
    b3 = runs.mean_wer(records, "Base model 3")
    mh2 = runs.mean_wer(records, "MH fine-tuning (2 hypotheses, bases 1+3)")
    mh4 = runs.mean_wer(records, "MH fine-tuning (4 hypotheses)")
    ok = mh2 < min(b1, b3) and mh4 <= mh2
    criterion(6, ok, f"{len(records)} seeds: base1 {b1:.2f}, base3 {b3:.2f}, MH(1+3) {mh2:.2f} < best base, "
                     f"MH(1-4) {mh4:.2f} <= MH(1+3)")
    assert ok


@pytest.mark.slow
def test_criterion_7_selftraining_ordering(criterion):
    records = [runs.selftrain_record(s) for s in runs.SEEDS]
    base = runs.mean_wer(records, "Base model 1")
    sh = runs.mean_wer(records, "SH self-training (1 hypothesis)")
    mh = runs.mean_wer(records, "MH self-training (2 hypotheses)")
    sup = runs.mean_wer(records, "Supervised training")
    ok = base > sh > mh > sup
    criterion(7, ok, f"{len(records)} seeds: base {base:.2f} > SH {sh:.2f} > MH {mh:.2f} > supervised {sup:.2f}")
    assert ok


def _tree(path):
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(criterion, tmp_path):
    from test_experiments import small_config

    cfg = small_config(iterations=2)
    trees = []
    for i in range(2):
        run_finetune(cfg, modes=("sh", "mh"), run_dir=tmp_path / str(i))
        trees.append(_tree(tmp_path / str(i)))
    ckpts = [k for k in trees[0] if k.endswith(".ckpt")]
    reports = [k for k in trees[0] if k.startswith("reports/") or k == "summary.tsv"]
    ok = trees[0] == trees[1] and len(ckpts) > 0 and len(reports) > 0
    criterion(8, ok, f"two runs: {len(trees[0])} files ({len(ckpts)} checkpoints, {len(reports)} reports) "
                     f"bit-identical: {trees[0] == trees[1]}")
    assert ok


def test_criterion_9_wer_hand_cases(criterion):
    same = score_set({"u": "a b c".split()}, {"u": "a b c".split()}).wer
    s, i, d = edit_distance("a b c".split(), "a x c d".split())
    mixed = wer(s + i + d, 3)
    ok = same == 0.0 and round(mixed, 2) == 66.67 and (s, i, d) == (1, 1, 0)
    criterion(9, ok, f"identical -> {same:.2f}%, 'a b c' vs 'a x c d' -> {mixed:.2f}% (sub={s} ins={i} del={d})")
    assert ok
