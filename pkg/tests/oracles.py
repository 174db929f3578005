"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np

from halfbrain.engine import functional as F
from halfbrain.engine.tensor import concat, flip, sigmoid
from halfbrain.pipeline import BACKGROUNDS, FOUR_CLASSES, REGIONS, TIMEPOINTS, ScanLabel


def gradient_cases(rng):
    """(name, op, input arrays) for every differentiable op, shapes randomized."""

    def dims(lo, hi, n):
        return tuple(int(v) for v in rng.integers(lo, hi + 1, n))

    cases = []
    for _ in range(4):
        n, c, h, w = dims(2, 3, 1) + dims(1, 3, 1) + dims(3, 6, 2)
        f = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        cases.append(("conv2d", lambda x, wt, b, s=stride: F.conv2d(x, wt, b, stride=s),
                      [rng.standard_normal((n, c, h, w)), rng.standard_normal((f, c, 3, 3)),
                       rng.standard_normal(f)]))
    for _ in range(3):
        n, c, h, w = dims(2, 4, 1) + dims(1, 3, 1) + dims(2, 5, 2)
        rm, rv = np.zeros(c), np.ones(c)
        cases.append(("batchnorm_train",
                      lambda x, g, b, rm=rm, rv=rv: F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), True),
                      [rng.standard_normal((n, c, h, w)), rng.uniform(0.5, 1.5, c),
                       rng.standard_normal(c)]))
        cases.append(("batchnorm_eval",
                      lambda x, g, b, c=c: F.batchnorm2d(x, g, b, np.full(c, 0.3), np.full(c, 2.0), False),
                      [rng.standard_normal((n, c, h, w)), rng.uniform(0.5, 1.5, c),
                       rng.standard_normal(c)]))
    for _ in range(2):
        shape = dims(1, 3, 2) + dims(2, 6, 2)
        x = rng.standard_normal(shape)
        x[np.abs(x) < 0.05] = 0.3    # keep clear of the kink
        cases.append(("leaky_relu", F.leaky_relu, [x]))
    for _ in range(3):
        shape = dims(1, 3, 2) + dims(2, 7, 2)
        cases.append(("avgpool2d", lambda x: F.avgpool2d(x, 2), [rng.standard_normal(shape)]))
    cases.append(("avgpool2d_stride1", lambda x: F.avgpool2d(x, 2, 1), [rng.standard_normal((2, 2, 4, 5))]))
    cases.append(("avgpool2d_rect", lambda x: F.avgpool2d(x, (2, 1)), [rng.standard_normal((2, 2, 4, 1))]))
    for _ in range(2):
        n, d, o = dims(1, 5, 3)
        cases.append(("fully_connected", F.fully_connected,
                      [rng.standard_normal((n, d)), rng.standard_normal((o, d)), rng.standard_normal(o)]))
    cases.append(("upsample2d", F.upsample2d, [rng.standard_normal((2, 2, 3, 2))]))
    cases.append(("softmax", F.softmax, [rng.standard_normal((3, 4))]))
    target = rng.integers(0, 3, 5)
    cases.append(("cross_entropy", lambda z: F.softmax_cross_entropy(z, target),
                  [rng.standard_normal((5, 3))]))
    wts = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    cases.append(("masked_cross_entropy", lambda z: F.softmax_cross_entropy(z, target, weights=wts),
                  [rng.standard_normal((5, 3))]))
    cases.append(("mse", lambda a, b: F.mse_loss(a, b), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]))
    cases.append(("sigmoid", sigmoid, [rng.standard_normal((4, 3))]))
    cases.append(("concat", lambda a, b: concat([a, b], axis=1), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]))
    cases.append(("flip", lambda a: flip(a, -1), [rng.standard_normal((2, 5))]))
    cases.append(("mean_sum_reshape", lambda a: a.reshape(3, 4).mean(axis=0) * a.sum(),
                  [rng.standard_normal((2, 6))]))
    cases.append(("getitem", lambda a: a[:, 1:3], [rng.standard_normal((3, 4))]))
    return cases


def random_label(rng):
    if rng.random() < 0.4:
        bg = [b for b in BACKGROUNDS if rng.random() < 0.3]
        return ScanLabel.negative(bg)
    k = int(rng.integers(1, 3))
    locs = set()
    for _ in range(k):
        locs.add((REGIONS[int(rng.integers(len(REGIONS)))], ("left", "right")[int(rng.integers(2))]))
    bg = [b for b in BACKGROUNDS if rng.random() < 0.3]
    return ScanLabel.from_locations(locs, int(rng.integers(1, 5)), bg)


def random_case(rng, n):
    labels = [random_label(rng) for _ in range(n)]
    preds = [FOUR_CLASSES[int(rng.integers(4))] if rng.random() < 0.5 else lab.four_class
             for lab in labels]
    tps = [TIMEPOINTS[int(rng.integers(2))] for _ in range(n)]
    return preds, labels, tps


# brute-force reference: every number is a filter over explicit rows, then a count
def oracle_summary(rows):
    def count(f):
        return len([r for r in rows if f(r)])

    def div(a, b):
        return a / b if b else None

    pos = lambda r: r["truth"] != "none"
    ppos = lambda r: r["pred"] != "none"
    tp = count(lambda r: pos(r) and ppos(r))
    tn = count(lambda r: not pos(r) and not ppos(r))
    fp = count(lambda r: not pos(r) and ppos(r))
    fn = count(lambda r: pos(r) and not ppos(r))
    return {
        "n": len(rows),
        "acc4": div(count(lambda r: r["pred"] == r["truth"]), len(rows)),
        "acc_task1": div(tp + tn, len(rows)),
        "acc_task2_on_positives": div(count(lambda r: pos(r) and ppos(r) and r["pred"] == r["truth"]), tp),
        "sensitivity": div(tp, tp + fn),
        "specificity": div(tn, tn + fp),
        "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
    }


def oracle_tables(preds, labels, tps):
    rows = [{"pred": p, "truth": l.four_class, "label": l, "tp": t} for p, l, t in zip(preds, labels, tps)]
    out = {}

    def tally(f):
        sel = [r for r in rows if f(r)]
        return len(sel), len([r for r in sel if r["pred"] == r["truth"]])

    for tp in list(TIMEPOINTS) + ["all"]:
        at = lambda r, tp=tp: tp == "all" or r["tp"] == tp
        for reg in REGIONS:
            out["region", reg, tp] = tally(lambda r, reg=reg, at=at: at(r)
                                           and any(loc[0] == reg for loc in r["label"].locations))
        for band, grades in (("0", {0}), ("1-2", {1, 2}), ("3-4", {3, 4})):
            out["size_band", band, tp] = tally(lambda r, g=grades, at=at: at(r) and r["label"].size_grade in g)
    for b in BACKGROUNDS:
        out["background", b, "all"] = tally(lambda r, b=b: b in r["label"].background)
    combos = {frozenset(loc[0] for loc in r["label"].locations) for r in rows if r["label"].presence}
    for c in combos:
        name = "+".join(x for x in REGIONS if x in c)
        out["lesion_count", f"{len(c)}:{name}", "all"] = tally(
            lambda r, c=c: r["label"].presence and frozenset(loc[0] for loc in r["label"].locations) == c)
    return out


