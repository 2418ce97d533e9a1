"""Metrics, sweep driver, and report serialization tests.

Every aggregate metric is checked against a plain-python loop oracle on
random fixtures; CSV and SVG writers are pinned to golden files because
byte-identical artifacts are part of the contract.
"""

import math
import xml.etree.ElementTree as ET
from fractions import Fraction
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamraid.attack import (
    AttackConfig,
    ClairvoyantSource,
    GreedySource,
    IidSource,
    PredictiveSource,
    SumObjective,
    make_schedule,
    run_online_attack_batch,
)
from streamraid.datasets import IidPool
from streamraid.errors import ConfigError, DataError
from streamraid.eval import (
    CSV_HEADER,
    MetricsReport,
    MetricsRow,
    SweepError,
    _safe_ratio,
    fool_metrics,
    objective_showcase,
    read_csv,
    render_svg,
    sequence_metrics,
    surprise_error,
    sweep,
    tasr,
    tmse,
    write_csv,
)
from streamraid.models import VictimTrainConfig, init_predictor, init_victim, train_victim

DATA_DIR = Path(__file__).parent / "data"


def _golden_report():
    rows = []
    for eps, g_tasr, p_tasr in ((0.05, 0.25, 1 / 3), (0.1, 0.5, 0.625)):
        for attack, val in (("greedy", g_tasr), ("predictive", p_tasr)):
            rows.append(MetricsRow("toy", attack, "sum", eps, 8, 100, 0.0, 0, "tasr", val, 0.0))
            rows.append(MetricsRow("toy", attack, "sum", eps, 8, 100, 0.0, 0, "fool_rate",
                                   round(val * 0.8, 6), 0.25))
    rows.append(MetricsRow("toy", "greedy", "sum", 0.05, 8, 100, 0.0, 1, "tasr", 0.375, 0.125))
    return MetricsReport(rows=rows)


# ---------------------------------------------------------------------------
# metric values


def _logits_for(preds, n_classes=3):
    out = np.zeros((len(preds), n_classes))
    out[np.arange(len(preds)), preds] = 1.0
    return out


def test_tasr_pinned_examples():
    assert tasr(_logits_for([1, 0, 1, 1], 2), np.array([1, 1, 1, 1])) == 0.75
    assert tasr(_logits_for([2, 0, 1]), np.array([2, 0, 1])) == 1.0


def test_tasr_breaks_argmax_ties_at_lowest_index():
    logits = np.array([[0.5, 0.5, 0.1]])
    assert tasr(logits, np.array([0])) == 1.0
    assert tasr(logits, np.array([1])) == 0.0


def test_tmse_pinned_examples():
    assert tmse(np.array([0.5, 1.0]), np.array([0.0, 1.0])) == 0.125
    assert tmse(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0


def test_fool_metrics_pinned():
    logits = _logits_for([1, 0, 1, 1], 2)
    per, agg = fool_metrics(logits, np.array([1, 0, 1, 1]), "classification")
    npt.assert_array_equal(per, np.zeros(4))
    assert agg == 0.0
    per, agg = fool_metrics(logits, np.array([0, 0, 1, 1]), "classification")
    npt.assert_array_equal(per, [1.0, 0.0, 0.0, 0.0])
    assert agg == 0.25


def test_fool_mse_pinned():
    per, agg = fool_metrics(np.array([0.5, 1.0]), np.array([0.0, 1.0]), "regression")
    npt.assert_array_equal(per, [0.25, 0.0])
    assert agg == 0.125


def test_surprise_error_pinned():
    assert surprise_error(np.array([0.7, 0.7, 0.7]), np.array([0.2, 0.2, 0.2])) == 0.0
    assert surprise_error(np.array([0.0, 0.0, 3.0]), np.zeros(3)) == 2.0


@settings(deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_metrics_match_loop_oracles(seed, length):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(length, 4))
    classes = rng.integers(0, 4, size=length)
    truth = rng.integers(0, 4, size=length)
    values = rng.uniform(size=length)
    targets = rng.uniform(size=length)

    hits = sum(1 for i in range(length) if int(np.argmax(logits[i])) == classes[i])
    assert tasr(logits, classes) == hits / length

    sq = [(values[i] - targets[i]) ** 2 for i in range(length)]
    assert tmse(values, targets) == np.mean(sq)

    wrong = sum(1 for i in range(length) if int(np.argmax(logits[i])) != truth[i])
    assert fool_metrics(logits, truth, "classification")[1] == wrong / length

    errs = [abs(values[i] - targets[i]) for i in range(length)]
    assert surprise_error(values, targets) == np.max(errs) - np.mean(errs)


@settings(deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50))
def test_tasr_plus_miss_rate_is_exactly_one(seed, length):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(length, 3))
    targets = rng.integers(0, 3, size=length)
    hits = int((logits.argmax(axis=1) == targets).sum())
    assert tasr(logits, targets) == hits / length
    miss = (length - hits) / length
    assert Fraction(hits, length) + Fraction(length - hits, length) == 1
    # the float identity holds because both terms are exact integer ratios
    assert tasr(logits, targets) + miss == pytest.approx(1.0, abs=0.0, rel=1e-15)


def test_metric_input_validation():
    with pytest.raises(DataError):
        tasr(np.zeros((2, 3)), np.array([0, 1, 2]))
    with pytest.raises(DataError):
        tasr(np.zeros((2, 3)), np.array([0.5, 1.0]))
    with pytest.raises(DataError):
        tasr(np.zeros((0, 3)), np.array([], dtype=int))
    with pytest.raises(DataError):
        tmse(np.zeros(3), np.zeros(4))
    with pytest.raises(DataError):
        surprise_error(np.zeros(0), np.zeros(0))
    with pytest.raises(DataError):
        fool_metrics(np.zeros((2, 3)), np.array([0.1, 0.2]), "classification")


def test_metric_permutation_invariance():
    rng = np.random.default_rng(31)
    logits = rng.normal(size=(12, 3))
    targets = rng.integers(0, 3, size=12)
    perm = rng.permutation(12)
    assert tasr(logits, targets) == tasr(logits[perm], targets[perm])
    vals, tgts = rng.uniform(size=12), rng.uniform(size=12)
    assert tmse(vals, tgts) == tmse(vals[perm], tgts[perm])


# ---------------------------------------------------------------------------
# trace-level metrics and the epsilon -> 0 limit


@pytest.fixture(scope="module")
def toy_attack():
    victim = init_victim(3, 4, 6, 5, "classification", np.random.default_rng(0))
    rng = np.random.default_rng(2)
    seqs = rng.uniform(0, 1, (3, 6, 3))
    schedule = make_schedule(adv=np.array([1, 1, 2, 2, 0, 0]),
                             labels=np.array([3, 4, 0]), length=6)
    return victim, seqs, schedule


def test_sequence_metrics_match_direct_calls(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=2, max_count=3, seed=5)
    trace = run_online_attack_batch(victim, seqs, schedule, GreedySource(), cfg)[0]
    got = sequence_metrics(trace, "classification")
    assert set(got) == {"tasr", "fool_rate", "clean_acc"}
    assert got["tasr"] == tasr(trace.adv_outputs, trace.targets_adv)
    assert got["fool_rate"] == fool_metrics(trace.adv_outputs, trace.targets_true,
                                            "classification")[1]
    clean_hits = (trace.clean_outputs.argmax(axis=1) == trace.targets_true).mean()
    assert got["clean_acc"] == clean_hits


def test_sequence_metrics_regression_keys():
    victim = init_victim(2, 3, 5, 1, "regression", np.random.default_rng(3))
    seqs = np.random.default_rng(4).uniform(0, 1, (2, 5, 2))
    schedule = make_schedule(adv=np.full(5, 0.9), true=np.full((2, 5), 0.4), task="regression")
    cfg = AttackConfig(epsilon=0.1, max_count=2, seed=0)
    trace = run_online_attack_batch(victim, seqs, schedule, GreedySource(), cfg)[0]
    got = sequence_metrics(trace, "regression")
    assert set(got) == {"tmse", "fool_mse", "clean_mse", "surprise_error"}


def test_vanishing_epsilon_leaves_decisions_clean(toy_attack):
    """As the budget vanishes the fool rate must equal the clean error rate."""
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=1e-12, k=0, max_count=2, seed=5)
    for trace in run_online_attack_batch(victim, seqs, schedule, GreedySource(), cfg):
        fool = fool_metrics(trace.adv_outputs, trace.targets_true, "classification")[1]
        clean_err = fool_metrics(trace.clean_outputs, trace.targets_true, "classification")[1]
        assert fool == clean_err


# ---------------------------------------------------------------------------
# report rows and CSV


def test_metrics_row_rejects_unknown_metric_and_bad_text():
    with pytest.raises(ConfigError):
        MetricsRow("d", "a", "o", 0.1, 1, 1, 0.0, 0, "accuracy", 1.0, 0.0)
    with pytest.raises(ConfigError):
        MetricsRow("d,1", "a", "o", 0.1, 1, 1, 0.0, 0, "tasr", 1.0, 0.0)


def test_write_csv_matches_golden_bytes(tmp_path):
    report = _golden_report()
    out = tmp_path / "report.csv"
    write_csv(report, out)
    assert out.read_bytes() == (DATA_DIR / "report_golden.csv").read_bytes()


def test_write_csv_sorts_rows_deterministically(tmp_path):
    report = _golden_report()
    shuffled = MetricsReport(rows=list(reversed(report.rows)))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(report, a)
    write_csv(shuffled, b)
    assert a.read_bytes() == b.read_bytes()


def test_write_csv_empty_report_creates_nothing(tmp_path):
    out = tmp_path / "empty.csv"
    with pytest.raises(DataError):
        write_csv(MetricsReport(), out)
    assert not out.exists()


def test_read_csv_round_trip(tmp_path):
    report = _golden_report()
    out = tmp_path / "report.csv"
    write_csv(report, out)
    back = read_csv(out)
    assert sorted(back.rows, key=MetricsRow.sort_key) == sorted(report.rows,
                                                                key=MetricsRow.sort_key)


def test_read_csv_rejects_wrong_header_and_bad_rows(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("dataset,attack\n")
    with pytest.raises(DataError):
        read_csv(bad)
    bad.write_text(CSV_HEADER + "\ntoy,greedy,sum,0.1,8,100,0.0,0,tasr,oops,0.0\n")
    with pytest.raises(DataError, match="2"):
        read_csv(bad)


def test_report_values_filter():
    report = _golden_report()
    vals = report.values("tasr", attack="greedy", epsilon=0.05)
    npt.assert_array_equal(sorted(vals), [0.25, 0.375])


# ---------------------------------------------------------------------------
# SVG


def test_render_svg_matches_golden_bytes(tmp_path):
    out = tmp_path / "chart.svg"
    render_svg(_golden_report(), "epsilon", "tasr", out, title="tasr vs epsilon")
    assert out.read_bytes() == (DATA_DIR / "chart_golden.svg").read_bytes()


def test_render_svg_is_well_formed_with_one_polyline_per_attack(tmp_path):
    out = tmp_path / "chart.svg"
    render_svg(_golden_report(), "epsilon", "fool_rate", out)
    root = ET.fromstring(out.read_text())
    polylines = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert len(polylines) == 2
    texts = " ".join(e.text or "" for e in root.iter() if e.tag.endswith("text"))
    assert "greedy" in texts and "predictive" in texts and "fool_rate" in texts


def test_render_svg_validation(tmp_path):
    report = _golden_report()
    with pytest.raises(DataError):
        render_svg(report, "epsilon", "tmse", tmp_path / "x.svg")
    with pytest.raises(ConfigError):
        render_svg(report, "dataset", "tasr", tmp_path / "x.svg")
    with pytest.raises(ConfigError):
        render_svg(report, "epsilon", "bogus", tmp_path / "x.svg")


def test_render_svg_single_point_and_flat_series(tmp_path):
    rows = [MetricsRow("d", "greedy", "sum", 0.1, 0, 5, 0.0, 0, "tasr", 0.5, 0.0)]
    out = tmp_path / "one.svg"
    render_svg(MetricsReport(rows=rows), "epsilon", "tasr", out)
    ET.fromstring(out.read_text())


# ---------------------------------------------------------------------------
# sweep


def test_single_cell_sweep_equals_direct_run(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=2, max_count=3, seed=99)  # seed overridden per cell
    report = sweep(victim, seqs, schedule, [GreedySource()], cfg, "epsilon", [0.1], [5],
                   dataset="toy")
    direct_cfg = AttackConfig(epsilon=0.1, k=2, max_count=3, seed=5)
    traces = run_online_attack_batch(victim, seqs, schedule, GreedySource(), direct_cfg)
    per_seq = [sequence_metrics(tr, "classification") for tr in traces]
    assert len(report.rows) == 3 and not report.errors
    for row in report.rows:
        assert row.seed == 5 and row.epsilon == 0.1
        assert row.value == np.mean([m[row.metric] for m in per_seq])


def test_sweep_covers_grid_and_seeds_deterministically(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=1, max_count=2, seed=0)
    kwargs = dict(sources=[GreedySource()], base_cfg=cfg, axis="epsilon",
                  grid=[0.05, 0.2], seeds=[0, 1], dataset="toy")
    a = sweep(victim, seqs, schedule, **kwargs)
    b = sweep(victim, seqs, schedule, **kwargs)
    assert len(a.rows) == 2 * 2 * 3
    assert {r.epsilon for r in a.rows} == {0.05, 0.2}
    assert {r.seed for r in a.rows} == {0, 1}
    for ra, rb in zip(a.rows, b.rows):
        assert (ra.sort_key(), ra.value) == (rb.sort_key(), rb.value)


def test_sweep_is_order_insensitive(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=1, max_count=2, seed=0)
    fwd = sweep(victim, seqs, schedule, [GreedySource()], cfg, "epsilon", [0.05, 0.2], [0, 1])
    rev = sweep(victim, seqs, schedule, [GreedySource()], cfg, "epsilon", [0.2, 0.05], [1, 0])
    assert [(r.sort_key(), r.value) for r in fwd.rows] == \
        [(r.sort_key(), r.value) for r in rev.rows]


def test_sweep_axis_changes_the_right_config_field(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=1, max_count=2, seed=0)
    rep = sweep(victim, seqs, schedule, [ClairvoyantSource()], cfg, "k", [0, 2], [0])
    assert {r.k for r in rep.rows} == {0, 2}
    assert {r.epsilon for r in rep.rows} == {0.1}
    rep = sweep(victim, seqs, schedule, [ClairvoyantSource()], cfg, "max_count", [1, 3], [0])
    assert {r.max_count for r in rep.rows} == {1, 3}


def test_sweep_errors_are_recorded_and_do_not_stop_the_run(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=1, max_count=2, seed=0)
    bad = IidSource(IidPool(np.zeros((4, 2)), seed=0))  # wrong feature width
    rep = sweep(victim, seqs, schedule, [GreedySource(), bad], cfg, "epsilon",
                [0.05, 0.1], [0], dataset="toy")
    assert len(rep.rows) == 2 * 3  # greedy cells still produced rows
    assert len(rep.errors) == 2
    for err in rep.errors:
        assert isinstance(err, SweepError)
        assert err.attack == "iid" and "features" in err.message


def test_sweep_parallel_jobs_match_serial(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=1, max_count=2, seed=0)
    serial = sweep(victim, seqs, schedule, [GreedySource(), ClairvoyantSource()], cfg,
                   "epsilon", [0.05, 0.1], [0, 1], jobs=1)
    parallel = sweep(victim, seqs, schedule, [GreedySource(), ClairvoyantSource()], cfg,
                     "epsilon", [0.05, 0.1], [0, 1], jobs=4)
    assert [(r.sort_key(), r.value) for r in serial.rows] == \
        [(r.sort_key(), r.value) for r in parallel.rows]


def test_sweep_target_frequency_rebuilds_schedules(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, k=1, max_count=2, seed=0)

    def for_freq(freq):
        pattern = np.where((np.arange(6) // (6 // (2 * freq))) % 2 == 0, 1, 2)
        return make_schedule(adv=pattern, labels=np.array([3, 4, 0]), length=6)

    rep = sweep(victim, seqs, schedule, [GreedySource()], cfg, "target_frequency",
                [1], [0], dataset="toy", schedule_for_frequency=for_freq)
    assert {r.dataset for r in rep.rows} == {"toy|freq=1"}
    with pytest.raises(ConfigError):
        sweep(victim, seqs, schedule, [GreedySource()], cfg, "target_frequency", [1], [0])


def test_sweep_validation(toy_attack):
    victim, seqs, schedule = toy_attack
    cfg = AttackConfig(epsilon=0.1, seed=0)
    with pytest.raises(ConfigError):
        sweep(victim, seqs, schedule, [GreedySource()], cfg, "gamma", [1], [0])
    with pytest.raises(ConfigError):
        sweep(victim, seqs, schedule, [GreedySource()], cfg, "epsilon", [], [0])
    with pytest.raises(ConfigError):
        sweep(victim, seqs, schedule, [GreedySource()], cfg, "epsilon", [0.1], [])
    with pytest.raises(ConfigError):
        sweep(victim, seqs, schedule, [], cfg, "epsilon", [0.1], [0])


# ---------------------------------------------------------------------------
# objective showcases


def _trained_victim_setup():
    """Small two-class victim trained well enough for objective contrasts."""
    rng = np.random.default_rng(40)
    labels = rng.integers(0, 2, size=24)
    base = np.where(labels[:, None, None] == 0, 0.2, 0.8)
    seqs = np.clip(base + rng.normal(0, 0.05, size=(24, 8, 3)), 0.0, 1.0)
    data = SimpleNamespace(sequences=seqs, labels=labels,
                           meta=SimpleNamespace(task="classification", n_classes=2))
    cfg = VictimTrainConfig(hidden=3, head_width=6, epochs=20, batch_size=4, lr=0.05, seed=11)
    victim = train_victim(data, cfg).model
    eval_seqs = seqs[:6]
    adv = 1 - labels[:6]  # aim at the opposite class
    schedule = make_schedule(adv=np.broadcast_to(adv[:, None], (6, 8)),
                             labels=labels[:6], length=8)
    return victim, eval_seqs, schedule


@pytest.fixture(scope="module")
def trained_setup():
    return _trained_victim_setup()


def test_showcase_timewindow_defaults_and_series(trained_setup):
    victim, seqs, schedule = trained_setup
    cfg = AttackConfig(epsilon=0.25, k=2, max_count=10, seed=0)
    result = objective_showcase("timewindow", victim, seqs, schedule, ClairvoyantSource(), cfg,
                                dataset="stripes")
    assert (result.series["a"], result.series["b"]) == (6, 8)  # ceil(3*8/4) = 6
    assert result.series["fool_timewindow"].shape == (8,)
    assert {r.objective for r in result.report.rows} == {"timewindow", "sum"}
    assert {r.metric for r in result.report.rows} == {"tasr", "fool_rate", "clean_acc"}
    # the window objective concentrates fooling inside [a, b]
    assert result.series["fool_inside_timewindow"] >= result.series["fool_outside_timewindow"]


def test_showcase_realtime_final_step_beats_greedy(trained_setup):
    victim, seqs, schedule = trained_setup
    cfg = AttackConfig(epsilon=0.12, k=4, max_count=10, seed=0)
    result = objective_showcase("realtime", victim, seqs, schedule, ClairvoyantSource(), cfg)
    assert result.series["final_fool_realtime"] >= result.series["final_fool_greedy"]
    assert result.series["fool_realtime"].shape == (8,)


def test_showcase_surprise_orders_objectives():
    rng = np.random.default_rng(41)
    victim = init_victim(2, 3, 5, 1, "regression", rng)
    seqs = rng.uniform(0, 1, (4, 6, 2))
    schedule = make_schedule(adv=np.full(6, 0.95), true=rng.uniform(0.3, 0.5, (4, 6)),
                             task="regression")
    cfg = AttackConfig(epsilon=0.2, k=2, max_count=8, seed=0)
    result = objective_showcase("surprise", victim, seqs, schedule, ClairvoyantSource(), cfg)
    assert set(result.series) >= {"abs_error_surprise", "abs_error_sum", "abs_error_greedy",
                                  "surprise_error_surprise", "surprise_error_sum",
                                  "surprise_error_greedy", "step"}
    assert result.series["surprise_error_surprise"] >= result.series["surprise_error_sum"]


def test_showcase_validation(trained_setup):
    victim, seqs, schedule = trained_setup
    cfg = AttackConfig(epsilon=0.1, seed=0)
    with pytest.raises(ConfigError):
        objective_showcase("bogus", victim, seqs, schedule, GreedySource(), cfg)
    with pytest.raises(ConfigError):  # surprise needs regression
        objective_showcase("surprise", victim, seqs, schedule, GreedySource(), cfg)
    no_true = make_schedule(adv=np.ones(8, dtype=int))
    with pytest.raises(ConfigError):
        objective_showcase("realtime", victim, seqs, no_true, GreedySource(), cfg)


def test_safe_ratio_sentinel():
    assert _safe_ratio(0.5, 0.25) == 2.0
    assert _safe_ratio(0.5, 0.0) == math.inf
    assert math.isinf(_safe_ratio(0.0, 0.0)) or _safe_ratio(0.0, 0.0) == math.inf
