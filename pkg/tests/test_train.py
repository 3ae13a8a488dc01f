import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gctf import data as D, tensor as T
from gctf.config import ModelConfig
from gctf.model import DualBranchModel
from gctf.tensor import Parameter, Tensor
from gctf.train import (
    OptimState,
    Schedule,
    TrainingDiverged,
    classification_report,
    cross_entropy,
    decays,
    disagreements,
    evaluate,
    format_p,
    lr_at,
    mcnemar_exact,
    opt_step,
    train_loop,
    write_trace,
)

FULL_SCALE = Schedule(55, 5, 1e-4)


# -- schedule ------------------------------------------------------------------------

def test_lr_warmup_end():
    assert lr_at(FULL_SCALE, 5) == pytest.approx(1e-4, rel=1e-15)


def test_lr_end_is_min():
    assert lr_at(FULL_SCALE, 55) == pytest.approx(1e-6, rel=1e-12)


def test_lr_midpoint():
    expected = 1e-6 + 0.5 * (1e-4 - 1e-6) * (1 + math.cos(math.pi * 25 / 50))
    assert lr_at(FULL_SCALE, 30) == pytest.approx(expected, rel=1e-12)
    assert lr_at(FULL_SCALE, 30) == pytest.approx((1e-4 + 1e-6) / 2, rel=1e-12)


def test_lr_starts_at_min_and_is_continuous():
    assert lr_at(FULL_SCALE, 0) == pytest.approx(1e-6)
    assert lr_at(FULL_SCALE, 5 - 1e-9) == pytest.approx(lr_at(FULL_SCALE, 5), rel=1e-8)


@pytest.mark.parametrize("epoch", [-0.1, 55.1])
def test_lr_out_of_range(epoch):
    with pytest.raises(ValueError):
        lr_at(FULL_SCALE, epoch)


@pytest.mark.parametrize("kw", [dict(total_epochs=5, warmup_epochs=5), dict(min_lr=1.0)])
def test_schedule_invariants(kw):
    with pytest.raises(ValueError):
        Schedule(**{**dict(total_epochs=55, warmup_epochs=5, base_lr=1e-4), **kw})


# -- optimiser ---------------------------------------------------------------------------

def _p(x, name="w.weight"):
    return Parameter(np.array(x, dtype=float), name)


def test_zero_grad_no_decay_unchanged():
    p = _p([[1.0, -2.0]])
    opt_step([p], OptimState(weight_decay=0.0), 0.1, grads=[np.zeros((1, 2))])
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])


def test_zero_grad_decoupled_decay():
    p = _p([[1.0, -2.0]])
    opt_step([p], OptimState(weight_decay=0.05), 0.1, grads=[np.zeros((1, 2))])
    np.testing.assert_allclose(p.data, np.array([[1.0, -2.0]]) * (1 - 0.1 * 0.05), rtol=1e-15)


def test_unit_gradient_first_step_moves_lr():
    p = _p([0.0], "scalar")
    opt_step([p], OptimState(weight_decay=0.0), 1e-3, grads=[np.ones(1)])
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-7)


def test_opt_step_purity():
    a, b = _p([[0.5, 1.5]]), _p([[0.5, 1.5]])
    sa, sb = OptimState(weight_decay=0.0), OptimState(weight_decay=0.0)
    g = np.array([[0.3, -0.7]])
    for _ in range(3):
        opt_step([a], sa, 1e-2, grads=[g])
        opt_step([b], sb, 1e-2, grads=[g])
    np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("name, shape, expected", [
    ("branch1.block0.in_proj", (4, 4), True),
    ("branch1.tokenizer.pos_spatial", (5, 4), False),
    ("branch1.block0.norm", (4,), False),
    ("lateral.l0.gate", (4,), False),
    ("head.bias", (2,), False),
])
def test_decay_groups(name, shape, expected):
    assert decays(Parameter(np.zeros(shape), name)) is expected


# -- loss ----------------------------------------------------------------------------------

@pytest.mark.parametrize("logits, label, expected", [
    ([0.0, 0.0], 0, math.log(2.0)),
    ([30.0, -30.0], 0, math.log1p(math.exp(-60.0))),
    ([1.0, 0.0], 0, 0.313262),
])
def test_cross_entropy_examples(logits, label, expected):
    assert cross_entropy(Tensor(np.array(logits)), label).item() == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_large_logits_stable():
    assert cross_entropy(Tensor(np.array([1000.0, -1000.0])), 1).item() == pytest.approx(2000.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=2), st.floats(-50, 50), st.integers(0, 1))
def test_cross_entropy_shift_invariance(logits, c, label):
    a = cross_entropy(Tensor(np.array(logits)), label).item()
    b = cross_entropy(Tensor(np.array(logits) + c), label).item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a)) * 10


# -- metrics -----------------------------------------------------------------------------

def test_report_all_correct():
    r = classification_report([0, 1, 1, 0], [0, 1, 1, 0])
    assert r.top1 == 100.0 and r.f1_violent == 1.0 and r.f1_non_violent == 1.0
    assert r.confusion.sum() == 4


def test_report_all_violent_balanced():
    r = classification_report([0, 0, 0, 0], [0, 0, 1, 1])
    assert r.f1_violent == pytest.approx(2 / 3) and r.f1_non_violent == 0.0
    np.testing.assert_array_equal(r.confusion, [[2, 0], [2, 0]])


@pytest.mark.parametrize("pred, top1", [([0], 100.0), ([1], 0.0)])
def test_report_single_example(pred, top1):
    assert classification_report(pred, [0]).top1 == top1


def test_report_empty():
    with pytest.raises(ValueError):
        classification_report([], [])


def test_disagreements_and_report_pairing():
    y = np.array([0, 0, 1, 1, 0])
    a = np.array([0, 1, 1, 0, 0])   # wrong on 1, 3
    b = np.array([1, 0, 1, 1, 0])   # wrong on 0
    assert disagreements(a == y, b == y) == (2, 1)
    r = classification_report(a, y, compare_to=b)
    assert (r.n01, r.n10) == (2, 1)


def test_evaluate_empty(tiny_model):
    with pytest.raises(ValueError):
        evaluate(tiny_model, np.zeros((0, 3, 2, 8, 8)), [])


# -- McNemar -------------------------------------------------------------------------------

@pytest.mark.parametrize("n01, n10, printed", [(15, 46, "8.84e-05"), (32, 52, "0.0375")])
def test_mcnemar_published_values(n01, n10, printed):
    assert format_p(mcnemar_exact(n01, n10).p) == printed


def test_mcnemar_symmetric_counts():
    assert mcnemar_exact(7, 7).p == 1.0


def test_mcnemar_both_zero_flagged():
    r = mcnemar_exact(0, 0)
    assert r.p == 1.0 and r.degenerate


def test_mcnemar_small_exact():
    # n=3, k=0: 2 * (1/8)
    assert mcnemar_exact(0, 3).p == 0.25


def test_mcnemar_negative():
    with pytest.raises(ValueError):
        mcnemar_exact(-1, 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 300), st.integers(0, 300))
def test_mcnemar_properties(a, b):
    pa, pb = mcnemar_exact(a, b).p, mcnemar_exact(b, a).p
    assert pa == pb and 0.0 < pa <= 1.0


# -- training loop -------------------------------------------------------------------------------

SMALL = ModelConfig(layers=2, d=8, frames=(4, 4), size=(16, 16), patch=(1, 8, 8))


@pytest.fixture(scope="module")
def small_corpus():
    return D.synth_corpus(0, 16, (4, 16, 16)), D.synth_corpus(1, 8, (4, 16, 16))


def _run(corpus, schedule, seed=0):
    tr, te = corpus
    m = DualBranchModel(SMALL, np.random.default_rng(seed))
    return m, train_loop(m, tr.videos, tr.labels, te.videos, te.labels, schedule, seed=seed)


def test_zero_learning_rate_keeps_parameters(small_corpus):
    m0 = DualBranchModel(SMALL, np.random.default_rng(0))
    m, _ = _run(small_corpus, Schedule(2, 1, 0.0, 0.0))
    for a, b in zip(m0.parameters(), m.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_same_seed_bit_identical(small_corpus, tmp_path):
    s = Schedule(3, 1, 3e-3)
    runs = [_run(small_corpus, s) for _ in range(2)]
    for i, (_, res) in enumerate(runs):
        write_trace(tmp_path / f"t{i}.csv", res.trace)
    assert (tmp_path / "t0.csv").read_bytes() == (tmp_path / "t1.csv").read_bytes()
    for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()):
        assert np.array_equal(a.data, b.data)


def test_trace_columns_and_best_epoch(small_corpus, tmp_path):
    _, res = _run(small_corpus, Schedule(3, 1, 3e-3))
    write_trace(tmp_path / "m.csv", res.trace)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc,val_acc,f1_v,f1_nv"
    assert len(lines) == 4
    best = max(res.trace, key=lambda r: r["val_acc"])["val_acc"]
    assert res.trace[res.best_epoch]["val_acc"] == best


def test_best_state_is_restored(small_corpus):
    tr, te = small_corpus
    m, res = _run(small_corpus, Schedule(3, 1, 3e-3))
    assert evaluate(m, te.videos, te.labels).top1 == res.trace[res.best_epoch]["val_acc"]


def test_divergence_reports_step(small_corpus):
    tr, te = small_corpus
    bad = tr.videos.copy()
    bad[:] = np.nan
    m = DualBranchModel(SMALL)
    with pytest.raises(TrainingDiverged) as info:
        train_loop(m, bad, tr.labels, te.videos, te.labels, Schedule(2, 1, 1e-3))
    assert info.value.epoch == 0 and info.value.step == 0


def test_learns_separable_task():
    tr = D.synth_corpus(5, 32, (4, 16, 16))
    m = DualBranchModel(SMALL, np.random.default_rng(0))
    res = train_loop(m, tr.videos, tr.labels, tr.videos, tr.labels, Schedule(20, 2, 3e-3), seed=0)
    assert max(r["train_acc"] for r in res.trace) >= 95.0
