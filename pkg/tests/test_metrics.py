import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfbrain import metrics as M
from halfbrain.errors import ConfigError, DimensionError, UndefinedError
from halfbrain.pipeline import TIMEPOINTS, ScanLabel
from oracles import oracle_summary, oracle_tables, random_case


def test_metrics_match_bruteforce_oracle():
    rng = np.random.default_rng(7)
    preds, labels, tps = random_case(rng, 1000)
    got = M.classify_metrics(preds, labels, tps)
    rows = [{"pred": p, "truth": l.four_class, "tp": t} for p, l, t in zip(preds, labels, tps)]
    expect = oracle_summary(rows)
    for k, v in expect.items():
        assert got[k] == v
    for tp in TIMEPOINTS:
        sub = oracle_summary([r for r in rows if r["tp"] == tp])
        for k, v in sub.items():
            assert got["by_timepoint"][tp][k] == v

    tables = M.subgroup_tables(preds, labels, tps)
    expect = oracle_tables(preds, labels, tps)
    seen = set()
    for rows_ in tables.values():
        for r in rows_:
            key = (r.table, r.group, r.timepoint)
            assert (r.n, r.correct) == expect[key], key
            seen.add(key)
    assert seen == set(expect)


def test_hand_case_eight_scans():
    L, R = ("MCA", "left"), ("MCA", "right")
    labels = [
        ScanLabel.from_locations([L], 3), ScanLabel.from_locations([R], 1),
        ScanLabel.from_locations([L, R], 4), ScanLabel.negative(),
        ScanLabel.negative(["atrophy"]), ScanLabel.from_locations([L], 2),
        ScanLabel.negative(), ScanLabel.from_locations([R], 4, ["old_stroke"]),
    ]
    preds = ["left", "left", "both", "none", "right", "none", "none", "right"]
    m = M.classify_metrics(preds, labels)
    assert m["confusion"] == {"tp": 4, "fp": 1, "tn": 2, "fn": 1}
    assert m["acc4"] == 5 / 8
    assert m["acc_task1"] == 6 / 8
    assert m["acc_task2_on_positives"] == 3 / 4
    assert m["sensitivity"] == 4 / 5
    assert m["specificity"] == 2 / 3
    bg = {r.group: r for r in M.subgroup_tables(preds, labels)["background"]}
    assert bg["atrophy"].rate == 1.0 and bg["old_stroke"].rate == 0.0
    assert bg["leukoaraiosis"].rate is None


def test_undefined_ratios_are_none():
    labels = [ScanLabel.negative(), ScanLabel.negative()]
    m = M.classify_metrics(["none", "left"], labels)
    assert m["sensitivity"] is None and m["acc_task2_on_positives"] is None
    assert m["specificity"] == 0.5


def test_metric_input_errors():
    with pytest.raises(DimensionError):
        M.classify_metrics(["none"], [])
    with pytest.raises(ConfigError):
        M.classify_metrics(["sideways"], [ScanLabel.negative()])


def test_csv_outputs_are_stable():
    rng = np.random.default_rng(1)
    preds, labels, tps = random_case(rng, 50)
    a = M.subgroup_csv(M.subgroup_tables(preds, labels, tps))
    b = M.subgroup_csv(M.subgroup_tables(preds, labels, tps))
    assert a == b and a.startswith("table,group,timepoint")
    assert "acc4" in M.metrics_csv(M.classify_metrics(preds, labels, tps))


# ------------------------------------------------------------------ alpha
def test_alpha_perfect_agreement():
    assert M.kalpha([["L", "L"], ["R", "R"], ["N", "N"]]) == 1.0


def test_alpha_two_unit_disagreement():
    # two raters, units (A, B) and (B, A): D_o = 1, D_e = 4/3 with the n-1 correction
    assert M.kalpha([["A", "B"], ["B", "A"]]) == pytest.approx(-0.5, abs=1e-12)


def test_alpha_single_category_is_degenerate():
    r = M.krippendorff_alpha([["N", "N"], ["N", "N"]])
    assert r.degenerate and r.alpha == 1.0


def test_alpha_no_pairable_units():
    with pytest.raises(UndefinedError):
        M.kalpha([["L", None], [None, "R"]])


def oracle_alpha(grid):
    """Textbook pairable-value formulation, written with plain loops."""
    units = [[v for v in row if v is not None] for row in grid]
    units = [u for u in units if len(u) >= 2]
    values = [v for u in units for v in u]
    n = len(values)
    d_o = 0.0
    for u in units:
        m = len(u)
        d_o += sum(1 for i in range(m) for j in range(m) if i != j and u[i] != u[j]) / (m - 1)
    d_o /= n
    d_e = sum(1 for i in range(n) for j in range(n) if i != j and values[i] != values[j]) / (n * (n - 1))
    return 1.0 - d_o / d_e


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["L", "R", "B", "N", None]), min_size=3, max_size=3),
                min_size=2, max_size=8))
def test_alpha_matches_loop_oracle(grid):
    try:
        got = M.krippendorff_alpha(grid)
    except UndefinedError:
        assert all(sum(v is not None for v in row) < 2 for row in grid)
        return
    if got.degenerate:
        return
    assert got.alpha == pytest.approx(oracle_alpha(grid), abs=1e-12)


def test_alpha_matches_reference_package():
    krippendorff = pytest.importorskip("krippendorff")
    rng = np.random.default_rng(3)
    codes = {"L": 0, "R": 1, "B": 2, "N": 3}
    for _ in range(30):
        grid = [[["L", "R", "B", "N"][int(rng.integers(4))] for _ in range(3)] for _ in range(10)]
        data = np.array([[codes[v] for v in row] for row in grid], dtype=float).T
        expect = krippendorff.alpha(reliability_data=data, level_of_measurement="nominal")
        assert M.kalpha(grid) == pytest.approx(expect, abs=1e-10)


def test_alpha_rater_permutation_invariance():
    rng = np.random.default_rng(4)
    grid = [[["L", "R", "N"][int(rng.integers(3))] for _ in range(4)] for _ in range(12)]
    a = M.kalpha(grid)
    assert M.kalpha([row[::-1] for row in grid]) == pytest.approx(a, abs=1e-12)
    assert M.kalpha(grid[::-1]) == pytest.approx(a, abs=1e-12)


def test_bundled_table_pairwise_values():
    ratings = M.bundled_ratings()
    ref = M.bundled_reference()
    assert ratings.shape == (14, 10)
    report = M.pairwise_agreement(ratings, n_boot=200, seed=0, reference=ref)
    by = {p["rater"]: p["alpha"] for p in report["pairwise"]}
    assert by["expert5"] == by["expert7"]
    for name, value in by.items():
        assert 0.0 <= value < 1.0
        assert value == pytest.approx(ref[name], abs=5e-5)
    assert abs(report["average"] - ref["average"]) <= 0.10
    lo, hi = report["ci"]
    assert lo <= report["average"] <= hi
    assert "reference" in M.format_agreement(report)


def test_bootstrap_is_seeded():
    ratings = M.bundled_ratings().select(["expert1", "model"])
    a = M.kalpha_bootstrap(ratings, n_boot=150, seed=5)
    b = M.kalpha_bootstrap(ratings, n_boot=150, seed=5)
    assert a == b
    assert a["n_used"] + a["n_skipped"] == 150
    with pytest.raises(ConfigError):
        M.kalpha_bootstrap(ratings, n_boot=10)


def test_ratings_csv_validation():
    with pytest.raises(ConfigError):
        M.RatingsMatrix.read_csv("a,b,c\n1,x,L\n")
    with pytest.raises(ConfigError):
        M.RatingsMatrix.read_csv("unit,rater,category\n1,x,Q\n2,x,L\n")
    with pytest.raises(ConfigError):
        M.RatingsMatrix.read_csv("unit,rater,category\n1,x,L\n1,x,R\n")
    m = M.RatingsMatrix.read_csv("unit,rater,category\n1,a,L\n1,b,\n2,a,R\n2,b,R\n")
    assert m.values == [["L", None], ["R", "R"]]
    assert math.isclose(M.kalpha(m), 1.0)
