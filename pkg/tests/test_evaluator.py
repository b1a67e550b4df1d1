import json
import math

import numpy as np
import pytest
from stubs import FunctionStub, learned_stub, true_stub

from lengthgen.datagen import DomainSpec, enumerate_domain, eval_suites, sample, sample_distinct
from lengthgen.evaluator import (
    DynamicsTrace,
    ModelPredictor,
    binomial_sigma,
    consistency_violations,
    digitwise_accuracy,
    eval_accuracy,
    hypothesis_report,
    make_eval_hook,
    r2_correlation,
    r2_per_position,
    r2_scores,
    trace_from_rows,
)
from lengthgen.model import ModelConfig, init
from lengthgen.numtheory import Op, TaskKind, count_modadd_pairs, theoretical_modadd_acc
from lengthgen.tokenizer import LineLayout

ADD = TaskKind(Op.ADD)


def test_true_stub_scores_one():
    lay = LineLayout.for_task(ADD, 5)
    suite = sample(DomainSpec.of(ADD, 5), 500, seed=0)
    res = eval_accuracy(true_stub(ADD, lay), suite, ADD)
    assert res.accuracy == 1.0 and res.failures == 0


def test_learned_stub_scores_one_vs_learned():
    lay = LineLayout.for_task(ADD, 6)
    suite = sample(DomainSpec.of(ADD, 6), 500, seed=0)
    stub = learned_stub(ADD, 4, lay)
    assert eval_accuracy(stub, suite, ADD, "learned", 4).accuracy == 1.0
    assert eval_accuracy(stub, suite, ADD, "true").accuracy == 0.0


def test_empty_suite_rejected():
    lay = LineLayout(2, 3)
    suite = sample(DomainSpec.of(ADD, 2), 10, seed=0).subset(slice(0, 0))
    with pytest.raises(ValueError):
        eval_accuracy(true_stub(ADD, lay), suite, ADD)
    with pytest.raises(ValueError):
        eval_accuracy(true_stub(ADD, lay), suite, ADD, "learned")


def test_decode_failures_tallied_separately():
    lay = LineLayout(2, 3)
    suite = enumerate_domain(DomainSpec.of(ADD, 2))
    stub = FunctionStub(lay, lambda a, b: np.where(a % 3 == 0, a + b + 1, a + b), garble=lambda a, b: a % 5 == 0)
    res = eval_accuracy(stub, suite, ADD)
    assert res.correct + res.wrong + res.failures == len(suite)
    assert res.accuracy + res.failure_rate + res.wrong_rate == pytest.approx(1.0, abs=0)
    assert res.failures == int((suite.a % 5 == 0).sum())
    assert res.wrong == int(((suite.a % 3 == 0) & (suite.a % 5 != 0)).sum())


@pytest.mark.parametrize("p, n, m", [(151, 1, 3), (101, 1, 3), (150, 2, 3), (100, 1, 3), (7, 1, 3), (13, 2, 3)])
def test_oracle_sandwich_exhaustive(p, n, m):
    task = TaskKind(Op.MODADD, p)
    suite = enumerate_domain(DomainSpec.of(task, m, exact_both=True))
    lay = LineLayout.for_task(task, m)
    res = eval_accuracy(learned_stub(task, n, lay), suite, task)
    assert res.accuracy * len(suite) == count_modadd_pairs(p, n, m, exact_length=True) * len(suite)
    assert eval_accuracy(learned_stub(task, n, lay), suite, task, "learned", n).accuracy == 1.0


@pytest.mark.parametrize("p, n, m", [(101, 3, 5), (151, 4, 6), (201, 4, 7), (150, 4, 5)])
def test_oracle_cross_check_sampled(p, n, m):
    task = TaskKind(Op.MODADD, p)
    suite = sample_distinct(DomainSpec.of(task, m, exact_both=True), 10_000, seed=3)
    lay = LineLayout.for_task(task, m)
    acc = eval_accuracy(learned_stub(task, n, lay), suite, task).accuracy
    theory = float(theoretical_modadd_acc(p, n, m).accuracy)
    assert abs(acc - theory) <= 2 * binomial_sigma(theory, len(suite)) + 1e-12 or theory == 0 and acc == 0
    exact = float(count_modadd_pairs(p, n, m, exact_length=True))
    assert abs(acc - exact) <= 3 * binomial_sigma(exact, len(suite))


# --- digit-wise ------------------------------------------------------------------


def test_digitwise_perfect_stub():
    lay = LineLayout.for_task(ADD, 3)
    suite = sample(DomainSpec.of(ADD, 3), 300, seed=1)
    vec = digitwise_accuracy(true_stub(ADD, lay), suite, ADD)
    assert vec.shape == (lay.answer_width,)
    assert np.all(vec == 1.0)
    assert np.all(digitwise_accuracy(true_stub(ADD, lay), suite, ADD, teacher_forcing=False) == 1.0)


def test_digitwise_learned_stub_pattern():
    n = 3
    lay = LineLayout.for_task(ADD, 6)
    suite = sample(DomainSpec.of(ADD, 6), 4000, seed=2)
    vec = digitwise_accuracy(learned_stub(ADD, n, lay), suite, ADD)
    assert np.all(vec[:n] == 1.0)
    assert vec[n] < 1.0
    # the stub writes zeros above n + 1; the truth has a nonzero digit there most of the time
    assert np.all(vec[n + 1 : 6] < 0.2)
    # the top position of the layout is the final carry, usually zero in both
    expected_top = np.mean((suite.a + suite.b) // 10**6 == 0)
    assert vec[6] == pytest.approx(expected_top)


# --- R² --------------------------------------------------------------------------


def test_r2_definitions():
    ref = np.array([[1, 0], [2, 0], [3, 0], [4, 0]])
    assert r2_scores(ref, ref)[0] == 1.0
    assert np.isnan(r2_scores(ref, ref)[1])
    const = np.full_like(ref, 2.5, dtype=float)
    assert r2_scores(const, ref)[0] == pytest.approx(0.0)
    # hand value: residuals (1, 0, 0, 1) over variance 5
    pred = np.array([[2, 0], [2, 0], [3, 0], [5, 0]])
    assert r2_scores(pred, ref)[0] == pytest.approx(1 - 2 / 5)


def test_r2_per_position_stub():
    lay = LineLayout.for_task(ADD, 4)
    probe = sample(DomainSpec.of(ADD, 3), 2000, seed=4)
    r2 = r2_per_position(true_stub(ADD, lay), probe, ADD)
    assert np.all(r2[:4] == 1.0)
    assert np.isnan(r2[4])  # the fifth digit is always zero on 3-digit probes


def test_r2_correlation():
    t = np.linspace(0, 1, 6)
    data = np.stack([t, t, -t, np.ones_like(t), t**2], axis=1)
    corr = r2_correlation(data)
    assert corr[0, 1] == pytest.approx(1.0)
    assert corr[0, 2] == pytest.approx(-1.0)
    assert np.isnan(corr[0, 3]) and np.isnan(corr[3, 3])
    assert np.allclose(corr[[0, 1, 2, 4]][:, [0, 1, 2, 4]], corr[[0, 1, 2, 4]][:, [0, 1, 2, 4]].T)
    np.testing.assert_allclose(np.diag(corr)[[0, 1, 2, 4]], 1.0)
    np.testing.assert_allclose(corr[0, 4], np.corrcoef(t, t**2)[0, 1])
    with pytest.raises(ValueError):
        r2_correlation(data[:2])
    trace = DynamicsTrace()
    for i, row in enumerate(data):
        trace.add(i, row)
    np.testing.assert_array_equal(np.isnan(r2_correlation(trace)), np.isnan(corr))
    rows = [{"step": i, "r2_1": float(a), "r2_2": float(b)} for i, (a, b) in enumerate(data[:, :2])]
    assert trace_from_rows(rows).matrix().shape == (6, 2)


# --- reports ---------------------------------------------------------------------


def _suites(task, lengths, exact_outward=True, n=4, per_set=2000):
    out = {}
    for m in lengths:
        exact = exact_outward and m > n
        s = eval_suites(task, [m], per_set, exact, seed=m)[m]
        out[s.name] = s
    return out


def test_report_learned_stub_addition():
    n = 4
    lay = LineLayout.for_task(ADD, 7)
    suites = _suites(ADD, [1, 2, 3, 4, 5, 6, 7], exact_outward=False)
    rep = hypothesis_report(learned_stub(ADD, n, lay), ADD, n, suites, digitwise=False)
    for row in rep.rows:
        assert row.acc_vs_learned == 1.0
        assert row.acc_vs_true == (1.0 if row.length <= n else 0.0)
        assert row.oracle is None
    assert consistency_violations(rep) == []
    assert rep.rows[0].mode == "exhaustive" and rep.rows[-1].mode == "sampled"


def test_report_modadd_100_both_columns_one():
    task = TaskKind(Op.MODADD, 100)
    lay = LineLayout.for_task(task, 7)
    rep = hypothesis_report(learned_stub(task, 4, lay), task, 4, _suites(task, [2, 3, 5, 6, 7]), digitwise=False)
    assert all(r.acc_vs_true == 1.0 and r.acc_vs_learned == 1.0 for r in rep.rows)
    assert all(r.oracle == 1.0 for r in rep.rows)


def test_report_oracle_column_151():
    task = TaskKind(Op.MODADD, 151)
    lay = LineLayout.for_task(task, 8)
    rep = hypothesis_report(learned_stub(task, 4, lay), task, 4, _suites(task, [5, 6, 7, 8], per_set=500), digitwise=False)
    by_m = {r.length: r for r in rep.rows}
    assert by_m[5].oracle == 0.0 and by_m[5].acc_vs_true == 0.0
    for m in (6, 7, 8):
        assert by_m[m].oracle_exact == "1/151"
        # exact count over both-length-m operands sits within 1/(10^(m-n)-1) of 1/151
        assert abs(by_m[m].oracle_count - 1 / 151) <= 1 / (10 ** (m - 4) - 1)
    text = rep.pretty()
    assert "vs f" in text and "theory" in text
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0].startswith("suite,length,samples,mode,acc_vs_true")
    assert json.loads(rep.to_json())["rows"][0]["oracle_exact"] == "0"


def test_report_is_deterministic():
    task = TaskKind(Op.MODADD, 101)
    lay = LineLayout.for_task(task, 5)
    suites = _suites(task, [2, 5], n=3, per_set=300)
    a = hypothesis_report(learned_stub(task, 3, lay), task, 3, suites).to_json()
    b = hypothesis_report(learned_stub(task, 3, lay), task, 3, suites).to_json()
    assert a == b


def test_consistency_flags_disagreement():
    lay = LineLayout.for_task(ADD, 4)
    suites = _suites(ADD, [2], n=4)
    # a stub that is wrong in a way that differs between f and f̂ cannot exist on
    # inward suites, so fake a report row instead
    rep = hypothesis_report(true_stub(ADD, lay), ADD, 4, suites, digitwise=False)
    rep.rows[0].acc_vs_learned = 0.5
    assert consistency_violations(rep) == [rep.rows[0].suite]


def test_eval_hook_and_model_predictor_on_untrained_model():
    lay = LineLayout.for_task(ADD, 3)
    model = init(ModelConfig(num_layers=1, num_heads=2, embed_dim=16))
    suites = {"D_{1}": enumerate_domain(DomainSpec.of(ADD, 1))}
    probe = sample(DomainSpec.of(ADD, 2), 200, seed=0)
    metrics = make_eval_hook(ADD, 2, lay, suites, probe)(model, 0)
    keys = list(metrics)
    assert keys[:3] == ["acc_true[D_{1}]", "acc_learned[D_{1}]", "fail[D_{1}]"]
    assert [k for k in keys if k.startswith("digit_")] == [f"digit_{i}" for i in range(1, 5)]
    assert all(0 <= metrics[k] <= 1 for k in keys if k.startswith(("acc", "fail", "digit")))
    assert metrics["acc_true[D_{1}]"] == metrics["acc_learned[D_{1}]"]
    pred = ModelPredictor(model, lay, chunk=64)
    tf = pred.teacher_forced(np.zeros((130, lay.seq_len), dtype=np.uint8))
    assert tf.shape == (130, lay.answer_width, 16)
    assert math.isnan(metrics["r2_4"])
