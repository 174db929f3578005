"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the pass/fail lines
as they happen; they are repeated in the terminal summary either way.
The desk-scale training fixture takes roughly a quarter of an hour.
"""

import json
import math
import time
import warnings

import numpy as np
import pytest

from halfbrain import cli
from halfbrain import explain as X
from halfbrain import metrics as Me
from halfbrain import model as Mo
from halfbrain import phantom as Ph
from halfbrain import pipeline as Pi
from halfbrain.engine.gradcheck import check_op
from halfbrain.engine.tensor import Tensor, no_grad
from halfbrain.errors import ConvergenceWarning, SaturationError
from oracles import gradient_cases, oracle_summary, oracle_tables, random_case

RESULTS = {}
SEED = 0
CORPUS = 600
SHAPE = (11, 64, 64)
PLAN = Mo.TrainPlan({"half_pretrain": 20, "head_train": 15, "finetune": 2, "baseline": 10},
                    batch_size=16, seed=SEED)
AE_EPOCHS = 6


def record(number, title, passed, detail):
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    RESULTS[number] = line
    print(line, flush=True)
    return passed


# ------------------------------------------------------------ shared runs
@pytest.fixture(scope="module")
def desk():
    """Seeded 600-scan corpus, patient split, both models and their test predictions."""
    start = time.perf_counter()
    corpus = Ph.generate(Ph.PhantomConfig(n_scans=CORPUS, shape=SHAPE, seed=SEED))
    parts = Pi.patient_split(corpus, seed=SEED)
    train, val, test = (Mo.Dataset.from_corpus(parts[k]) for k in ("train", "val", "test"))
    _, ck1, _ = Mo.stage1_train(train, val, PLAN)
    mtl, _, _ = Mo.stage2_train(ck1, train, val, PLAN)
    base, _, _ = Mo.baseline_train(train, val, PLAN)
    elapsed = time.perf_counter() - start
    mtl_pred = [p["four_class"] for p in Mo.predict_dataset(mtl, test)]
    base_pred = [p["four_class"] for p in Mo.predict_dataset(base, test)]
    return {"train": train, "val": val, "test": test, "mtl": mtl, "base": base,
            "mtl_pred": mtl_pred, "base_pred": base_pred, "train_seconds": elapsed}


@pytest.fixture(scope="module")
def autoencoder(desk):
    ae, _ = X.train_autoencoder(desk["train"].x, None, AE_EPOCHS, 32, SEED)
    return ae


def _explain_detected(model, preds, data, ae):
    """Counterfactuals for every positive test scan the model classifies correctly."""
    out = []
    for i, lab in enumerate(data.labels):
        if not lab.presence or preds[i] != lab.four_class:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            try:
                res = X.counterfactual(data.x[i], model, ae)
            except SaturationError:
                res = None
        out.append((i, res))
    return out


@pytest.fixture(scope="module")
def explained(desk, autoencoder):
    return {name: _explain_detected(desk[name], desk[f"{name}_pred"], desk["test"], autoencoder)
            for name in ("mtl", "base")}


# ------------------------------------------------------------- criteria
def test_c01_gradient_checks():
    rng = np.random.default_rng(2024)
    cases = gradient_cases(rng) + gradient_cases(np.random.default_rng(2025))
    start = time.perf_counter()
    worst = max(check_op(op, arrays, rng, h=1e-3) for _, op, arrays in cases)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 60 and len(cases) >= 20
    record(1, "gradient check", ok, f"{len(cases)} cases, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_c02_mirror_algebra(desk):
    rng = np.random.default_rng(5)
    exact = 0
    for _ in range(100):
        v = rng.standard_normal((11, 16, 2 * int(rng.integers(8, 33)))).astype(np.float32)
        a = Pi.split_midline(Pi.mirror(v))
        b = Pi.split_midline(v).swapped()
        exact += np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)
    model = desk["mtl"]
    x = desk["test"].x[:16]
    xm = np.ascontiguousarray(x[..., ::-1])
    with no_grad():
        f = model.features(Tensor(x)).data
        fm = model.features(Tensor(xm)).data
    d = f.shape[1] // 2
    gap = max(np.abs(fm[:, :d] - f[:, d:]).max(), np.abs(fm[:, d:] - f[:, :d]).max())
    ok = exact == 100 and gap <= 1e-5
    record(2, "mirror algebra", ok, f"{exact}/100 bit-exact splits, feature swap gap {gap:.1e}")
    assert ok


def test_c03_desk_training(desk):
    test = desk["test"]
    mtl = Me.classify_metrics(desk["mtl_pred"], test.labels, test.timepoints)["acc4"]
    base = Me.classify_metrics(desk["base_pred"], test.labels, test.timepoints)["acc4"]
    minutes = desk["train_seconds"] / 60
    ok = mtl >= 0.85 and base >= 0.60 and minutes <= 30
    record(3, "desk training", ok,
           f"MTL {mtl:.3f} (>=0.85), baseline {base:.3f} (>=0.60), gap {mtl - base:+.3f}, "
           f"training {minutes:.1f} min")
    assert ok


def test_c04_contrast_monotonicity(desk):
    means = []
    for scale in (0.5, 1.0, 1.5, 2.0):
        cfg = Ph.PhantomConfig(n_scans=50, shape=SHAPE, seed=SEED + 101, contrast_scale=scale)
        data = Mo.Dataset.from_corpus(Ph.generate(cfg))
        p, _, _ = desk["mtl"].predict_arrays(data.x)
        means.append(float(p.mean()))
    ok = all(b - a >= -0.01 for a, b in zip(means, means[1:]))
    record(4, "contrast monotonicity", ok, "mean p_lesion " + " ".join(f"{m:.3f}" for m in means))
    assert ok


def _band_accuracy(preds, data, keep):
    idx = [i for i, lab in enumerate(data.labels) if keep(i, lab)]
    return sum(preds[i] == data.labels[i].four_class for i in idx) / len(idx), len(idx)


def test_c05_size_and_timepoint_ordering(desk):
    preds, test = desk["mtl_pred"], desk["test"]
    big, nb = _band_accuracy(preds, test, lambda i, lab: lab.size_grade >= 3)
    small, ns = _band_accuracy(preds, test, lambda i, lab: lab.size_grade in (1, 2))
    fu, nf = _band_accuracy(preds, test, lambda i, lab: test.timepoints[i] == "followup")
    bl, nbl = _band_accuracy(preds, test, lambda i, lab: test.timepoints[i] == "baseline")
    ok = big - small >= 0.05 and fu - bl >= 0.05
    record(5, "size/timepoint ordering", ok,
           f"size3-4 {big:.3f} (n={nb}) vs size1-2 {small:.3f} (n={ns}); "
           f"follow-up {fu:.3f} (n={nf}) vs baseline {bl:.3f} (n={nbl})")
    assert ok


def test_c06_counterfactual_contract(explained):
    runs = explained["mtl"]
    reached = sum(r is not None and r.converged and r.steps <= 50 for _, r in runs)
    masks_ok = all(r.attribution.threshold_mask.sum() == math.ceil(0.01 * r.attribution.values.size)
                   and r.attribution.values[r.attribution.threshold_mask].min()
                   >= r.attribution.values[~r.attribution.threshold_mask].max()
                   for _, r in runs if r is not None)
    rate = reached / len(runs) if runs else 0.0
    ok = bool(runs) and rate >= 0.90 and masks_ok
    record(6, "counterfactual contract", ok,
           f"p<0.01 within 50 steps on {reached}/{len(runs)} ({rate:.1%}); top-1% masks exact: {masks_ok}")
    assert ok


def _hit(runs, data, atlas):
    keep = [(r.attribution, data.labels[i]) for i, r in runs if r is not None]
    return X.hit_score([a for a, _ in keep], [lab for _, lab in keep], atlas)


def test_c07_hit_score(desk, explained):
    atlas = Ph.build_atlas(SHAPE)
    s_mtl = _hit(explained["mtl"], desk["test"], atlas)
    s_base = _hit(explained["base"], desk["test"], atlas)
    ok = s_mtl.score >= 0.6 and s_mtl.score > s_base.score
    record(7, "saliency hit score", ok,
           f"MTL S={s_mtl.score:.3f} ({s_mtl.hits}/{s_mtl.hits + s_mtl.misses}), "
           f"baseline S={s_base.score:.3f} ({s_base.hits}/{s_base.hits + s_base.misses})")
    assert ok


def test_c08_agreement_oracle():
    ratings, ref = Me.bundled_ratings(), Me.bundled_reference()
    report = Me.pairwise_agreement(ratings, n_boot=1000, seed=SEED, reference=ref)
    print()
    print(Me.format_agreement(report))
    by = {p["rater"]: p["alpha"] for p in report["pairwise"]}
    in_range = all(0.0 <= v < 1.0 for v in by.values())
    perfect = Me.kalpha([["L", "L"], ["R", "R"], ["B", "B"], ["N", "N"]]) == 1.0
    swapped = Me.kalpha([["A", "B"], ["B", "A"]]) == -0.5
    ok = (by["expert5"] == by["expert7"] and in_range
          and abs(report["average"] - ref["average"]) <= 0.10 and perfect and swapped)
    record(8, "agreement oracle", ok,
           f"expert5 == expert7 ({by['expert5']:.4f}), average {report['average']:.4f} "
           f"vs {ref['average']:.4f}, hand cases ok: {perfect and swapped}")
    assert ok


def test_c09_metric_oracle():
    rng = np.random.default_rng(99)
    preds, labels, tps = random_case(rng, 1000)
    got = Me.classify_metrics(preds, labels, tps)
    rows = [{"pred": p, "truth": lab.four_class, "tp": t} for p, lab, t in zip(preds, labels, tps)]
    mismatches = sum(got[k] != v for k, v in oracle_summary(rows).items())
    for tp in ("baseline", "followup"):
        sub = oracle_summary([r for r in rows if r["tp"] == tp])
        mismatches += sum(got["by_timepoint"][tp][k] != v for k, v in sub.items())
    expect = oracle_tables(preds, labels, tps)
    rows_seen = 0
    for table in Me.subgroup_tables(preds, labels, tps).values():
        for r in table:
            rows_seen += 1
            mismatches += (r.n, r.correct) != expect.get((r.table, r.group, r.timepoint))
    mismatches += rows_seen != len(expect)
    ok = mismatches == 0
    record(9, "metric oracle", ok, f"1000 pairs, {rows_seen} subgroup rows, {mismatches} mismatches")
    assert ok


DETERMINISM_CONFIG = {
    "phantom": {"n_scans": 40},
    "pipeline": {"shape": [11, 32, 32]},
    "model": {"epochs": {"half_pretrain": 2, "head_train": 5, "finetune": 1, "baseline": 1},
              "batch_size": 8},
    "explain": {"ae_epochs": 1, "max_scans": 3, "max_steps": 5, "ae_channels": [8, 8, 8, 8]},
    "metrics": {"n_boot": 200},
}


def _run_all(out, cfg_path):
    for argv in (["gen"], ["split"], ["train", "--stage", "all"], ["eval"], ["explain"],
                 ["agree"], ["sweep", "--depths", "2,3"]):
        code = cli.main([*argv, "--config", str(cfg_path), "--out", str(out), "--quiet"])
        assert code == 0, argv


def test_c10_determinism(tmp_path, capsys):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(DETERMINISM_CONFIG))
    trees = []
    for name in ("first", "second"):
        _run_all(tmp_path / name, cfg)
        root = tmp_path / name
        trees.append({p.relative_to(root).as_posix(): p.read_bytes()
                      for p in sorted(root.rglob("*")) if p.is_file()})
    capsys.readouterr()
    differ = sorted(k for k in set(trees[0]) | set(trees[1]) if trees[0].get(k) != trees[1].get(k))
    ok = not differ and len(trees[0]) > 10
    record(10, "determinism", ok, f"{len(trees[0])} files compared, {len(differ)} differ {differ[:3]}")
    assert ok
