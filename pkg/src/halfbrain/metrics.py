"""Classification metrics, subgroup breakdowns and Krippendorff's alpha."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ConfigError, DimensionError, UndefinedError
from .pipeline import BACKGROUNDS, FOUR_CLASSES, REGIONS, TIMEPOINTS

CATEGORIES = ("L", "R", "B", "N")
SIZE_BANDS = (("0", (0,)), ("1-2", (1, 2)), ("3-4", (3, 4)))
CATEGORY_OF_CLASS = {"left": "L", "right": "R", "both": "B", "none": "N"}


def _ratio(num, den):
    return num / den if den else None


def _four(pred):
    if isinstance(pred, str):
        cls = pred
    elif isinstance(pred, dict):
        cls = pred["four_class"]
    else:
        cls = FOUR_CLASSES[int(pred)]
    if cls not in FOUR_CLASSES:
        raise ConfigError(f"unknown class {cls!r}")
    return cls


def _aligned(preds, labels, timepoints):
    preds = [_four(p) for p in preds]
    labels = list(labels)
    if not preds or len(preds) != len(labels):
        raise DimensionError(f"need aligned nonempty lists, got {len(preds)} vs {len(labels)}")
    if timepoints is None:
        timepoints = ["baseline"] * len(preds)
    timepoints = list(timepoints)
    if len(timepoints) != len(preds):
        raise DimensionError("timepoints must align with predictions")
    return preds, labels, timepoints


# ------------------------------------------------------------ classification
def _summary(preds, labels):
    n = len(preds)
    truth = [lab.four_class for lab in labels]
    pos_true = [t != "none" for t in truth]
    pos_pred = [p != "none" for p in preds]
    tp = sum(a and b for a, b in zip(pos_true, pos_pred))
    tn = sum(not a and not b for a, b in zip(pos_true, pos_pred))
    fp = sum(not a and b for a, b in zip(pos_true, pos_pred))
    fn = sum(a and not b for a, b in zip(pos_true, pos_pred))
    side_ok = sum(p == t for p, t, a, b in zip(preds, truth, pos_true, pos_pred) if a and b)
    return {
        "n": n,
        "acc4": _ratio(sum(p == t for p, t in zip(preds, truth)), n),
        "acc_task1": _ratio(tp + tn, n),
        "acc_task2_on_positives": _ratio(side_ok, tp),
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
    }


def classify_metrics(preds, labels, timepoints=None):
    """Four-class, presence and side accuracy plus sensitivity/specificity.

    ``preds`` holds four-class names (or prediction dicts). Side accuracy is
    measured on scans that are positive in truth and in prediction. Metrics with
    an empty denominator are ``None``. The same summary is repeated per timepoint.
    """
    preds, labels, timepoints = _aligned(preds, labels, timepoints)
    out = _summary(preds, labels)
    out["by_timepoint"] = {}
    for tp in TIMEPOINTS:
        idx = [i for i, t in enumerate(timepoints) if t == tp]
        if idx:
            out["by_timepoint"][tp] = _summary([preds[i] for i in idx], [labels[i] for i in idx])
    return out


# ------------------------------------------------------------------ subgroups
@dataclass(frozen=True)
class SubgroupRow:
    table: str
    group: str
    timepoint: str
    n: int
    correct: int
    measure: str = "accuracy"

    @property
    def rate(self):
        if not self.n:
            return None
        if self.measure == "error_rate":
            return (self.n - self.correct) / self.n
        return self.correct / self.n


def _tally(table, group, tp, flags, measure="accuracy"):
    return SubgroupRow(table, group, tp, len(flags), int(sum(flags)), measure)


def combination_name(regions):
    return "+".join(r for r in REGIONS if r in regions)


def subgroup_tables(preds, labels, timepoints=None):
    """Tables ``region``, ``lesion_count``, ``size_band`` and ``background``.

    Region rows overlap (a scan counts under every region it involves); the
    lesion-count rows partition positive scans; size-band rows partition all
    scans; background rows report error rates and overlap.
    """
    preds, labels, timepoints = _aligned(preds, labels, timepoints)
    ok = [p == lab.four_class for p, lab in zip(preds, labels)]
    tps = list(TIMEPOINTS) + ["all"]

    def pick(tp, cond):
        return [ok[i] for i, lab in enumerate(labels)
                if (tp == "all" or timepoints[i] == tp) and cond(lab)]

    region = [_tally("region", r, tp, pick(tp, lambda lab, r=r: r in lab.regions))
              for tp in tps for r in REGIONS]

    combos = sorted({(len(lab.regions), combination_name(lab.regions))
                     for lab in labels if lab.presence},
                    key=lambda c: (c[0], [REGIONS.index(x) for x in c[1].split("+")]))
    count = [_tally("lesion_count", f"{k}:{name}", "all",
                    pick("all", lambda lab, name=name: lab.presence
                         and combination_name(lab.regions) == name))
             for k, name in combos]

    size = [_tally("size_band", band, tp, pick(tp, lambda lab, g=grades: lab.size_grade in g))
            for tp in tps for band, grades in SIZE_BANDS]

    background = [_tally("background", c, "all", pick("all", lambda lab, c=c: c in lab.background),
                         "error_rate")
                  for c in BACKGROUNDS]
    return {"region": region, "lesion_count": count, "size_band": size, "background": background}


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def subgroup_csv(tables):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "group", "timepoint", "n", "correct", "measure", "rate"])
    for rows in tables.values():
        for r in rows:
            w.writerow([r.table, r.group, r.timepoint, r.n, r.correct, r.measure, _fmt(r.rate)])
    return buf.getvalue()


def metrics_csv(summary):
    """One row per (scope, metric) from a :func:`classify_metrics` result."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scope", "metric", "value"])
    keys = ("n", "acc4", "acc_task1", "acc_task2_on_positives", "sensitivity", "specificity")
    scopes = [("all", summary)] + list(summary.get("by_timepoint", {}).items())
    for scope, s in scopes:
        for k in keys:
            v = s[k]
            w.writerow([scope, k, v if k == "n" else _fmt(v)])
        for k, v in s["confusion"].items():
            w.writerow([scope, k, v])
    return buf.getvalue()


# ------------------------------------------------------------------ agreement
class RatingsMatrix:
    """Units x raters grid of nominal categories; ``None`` marks a missing rating."""

    def __init__(self, values, units=None, raters=None):
        rows = [list(r) for r in values]
        if len(rows) < 2:
            raise ConfigError("need at least 2 units")
        width = len(rows[0])
        if width < 2 or any(len(r) != width for r in rows):
            raise ConfigError("need a rectangular grid with at least 2 raters")
        self.values = rows
        self.units = list(units) if units is not None else [str(i + 1) for i in range(len(rows))]
        self.raters = list(raters) if raters is not None else [str(j + 1) for j in range(width)]
        if len(self.units) != len(rows) or len(self.raters) != width:
            raise DimensionError("unit/rater names do not match the grid")

    @property
    def shape(self):
        return len(self.values), len(self.raters)

    def select(self, raters):
        cols = [self.raters.index(r) for r in raters]
        return RatingsMatrix([[row[c] for c in cols] for row in self.values], self.units, raters)

    def take_units(self, index):
        return RatingsMatrix([self.values[i] for i in index],
                             [self.units[i] for i in index], self.raters)

    @classmethod
    def from_long(cls, records):
        """Build from ``(unit, rater, category)`` triples, keeping first-seen order."""
        units, raters, cells = [], [], {}
        for unit, rater, cat in records:
            unit, rater = str(unit), str(rater)
            if unit not in units:
                units.append(unit)
            if rater not in raters:
                raters.append(rater)
            if (unit, rater) in cells:
                raise ConfigError(f"duplicate rating for unit {unit}, rater {rater}")
            cells[unit, rater] = cat if cat not in ("", None) else None
        grid = [[cells.get((u, r)) for r in raters] for u in units]
        return cls(grid, units, raters)

    @classmethod
    def read_csv(cls, path_or_text):
        text = path_or_text
        if not isinstance(text, str) or "\n" not in text:
            with open(path_or_text, newline="") as fh:
                text = fh.read()
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != ["unit", "rater", "category"]:
            raise ConfigError(f"ratings CSV header must be unit,rater,category; got {reader.fieldnames}")
        records = []
        for row in reader:
            cat = row["category"].strip()
            if cat and cat not in CATEGORIES:
                raise ConfigError(f"unknown category {cat!r}")
            records.append((row["unit"].strip(), row["rater"].strip(), cat))
        return cls.from_long(records)


def bundled_ratings():
    """The 14-patient reading table shipped with the package."""
    text = resources.files("halfbrain").joinpath("data/table3_ratings.csv").read_text()
    return RatingsMatrix.read_csv(text)


def bundled_reference():
    text = resources.files("halfbrain").joinpath("data/pairwise_reference.csv").read_text()
    return {row["rater"]: float(row["alpha"]) for row in csv.DictReader(io.StringIO(text))}


@dataclass(frozen=True)
class AlphaResult:
    alpha: float
    degenerate: bool
    pairable_units: int


def coincidence_matrix(ratings):
    """Nominal coincidence counts over pairable units, with the category order used."""
    grid = ratings.values if isinstance(ratings, RatingsMatrix) else ratings
    cats = sorted({v for row in grid for v in row if v is not None}, key=str)
    index = {c: i for i, c in enumerate(cats)}
    o = np.zeros((len(cats), len(cats)))
    pairable = 0
    for row in grid:
        vals = [index[v] for v in row if v is not None]
        m = len(vals)
        if m < 2:
            continue
        pairable += 1
        counts = np.bincount(vals, minlength=len(cats)).astype(np.float64)
        # ordered pairs of distinct raters within the unit, weighted 1/(m-1)
        o += (np.outer(counts, counts) - np.diag(counts)) / (m - 1)
    return o, cats, pairable


def krippendorff_alpha(ratings):
    o, cats, pairable = coincidence_matrix(ratings)
    if pairable == 0:
        raise UndefinedError("no unit has two or more ratings")
    n_c = o.sum(axis=1)
    n = n_c.sum()
    observed = o.sum() - np.trace(o)
    expected = (n * n - (n_c ** 2).sum()) / (n - 1)
    if expected == 0:
        return AlphaResult(1.0, True, pairable)
    return AlphaResult(float(1.0 - observed / expected), False, pairable)


def kalpha(ratings):
    """Nominal Krippendorff's alpha (``1 - D_o / D_e``)."""
    return krippendorff_alpha(ratings).alpha


def bootstrap_ci(statistic, ratings, n_boot=1000, seed=0):
    """Percentile 95% interval of ``statistic`` over unit resamples.

    Resamples whose statistic is undefined are skipped and counted.
    """
    if n_boot < 100:
        raise ConfigError("n_boot must be at least 100")
    rng = np.random.default_rng(seed)
    n_units = ratings.shape[0]
    values, skipped = [], 0
    for _ in range(n_boot):
        idx = rng.integers(0, n_units, n_units)
        try:
            values.append(statistic(ratings.take_units(idx)))
        except UndefinedError:
            skipped += 1
    if not values:
        raise UndefinedError("every bootstrap resample was undefined")
    lo, hi = np.percentile(np.asarray(values), [2.5, 97.5])
    return {"ci95": [float(lo), float(hi)], "n_used": len(values), "n_skipped": skipped}


def kalpha_bootstrap(ratings, n_boot=1000, seed=0):
    out = {"alpha": kalpha(ratings)}
    out.update(bootstrap_ci(kalpha, ratings, n_boot, seed))
    return out


def pairwise_agreement(ratings, target="model", against=None, n_boot=1000, seed=0,
                       reference=None):
    """Alpha of ``target`` against each rater in ``against`` plus their average.

    The interval is for the average, from unit resamples. ``reference`` maps
    rater names to externally reported values printed alongside.
    """
    if against is None:
        against = [r for r in ratings.raters if r.startswith("expert")]
    if target not in ratings.raters:
        raise ConfigError(f"rater {target!r} not in ratings")

    def average(m):
        return float(np.mean([kalpha(m.select([r, target])) for r in against]))

    pairwise = []
    for r in against:
        row = {"rater": r, "alpha": kalpha(ratings.select([r, target]))}
        if reference and r in reference:
            row["reference"] = reference[r]
        pairwise.append(row)
    report = {"target": target, "pairwise": pairwise,
              "average": float(np.mean([p["alpha"] for p in pairwise]))}
    if reference and "average" in reference:
        report["reference_average"] = reference["average"]
    boot = bootstrap_ci(average, ratings, n_boot, seed)
    report["ci"] = boot["ci95"]
    report["bootstrap"] = {"n_boot": n_boot, "seed": seed, "n_skipped": boot["n_skipped"]}
    return report


def format_agreement(report):
    lines = [f"{'rater':<12}{'computed':>10}{'reference':>11}"]
    for p in report["pairwise"]:
        ref = p.get("reference")
        lines.append(f"{p['rater']:<12}{p['alpha']:>10.4f}" + (f"{ref:>11.4f}" if ref is not None else ""))
    ref = report.get("reference_average")
    lines.append(f"{'average':<12}{report['average']:>10.4f}" + (f"{ref:>11.4f}" if ref is not None else ""))
    lo, hi = report["ci"]
    lines.append(f"95% CI of average: [{lo:.4f}, {hi:.4f}]")
    return "\n".join(lines)


def is_close(a, b, tol):
    return a is not None and b is not None and math.isclose(a, b, abs_tol=tol)
