"""Command line: ``halfbrain {gen,split,train,eval,explain,agree,sweep}``.

Commands communicate only through the output directory::

    OUT/config.resolved.json
    OUT/data/manifest.json, OUT/data/volumes/*.hbv
    OUT/splits.json
    OUT/checkpoints/{stage1,mtl,baseline,autoencoder}.hsckpt
    OUT/metrics/*.csv
    OUT/eval/predictions_{mtl,baseline}.json, OUT/eval/comparison.json
    OUT/explain/summary.json, OUT/explain/<scan>.hbv, OUT/explain/<scan>_sNN.pgm
    OUT/agree/agreement.json
    OUT/sweep/layer_sweep.csv
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import explain as X
from . import metrics as Me
from . import model as Mo
from . import phantom as Ph
from . import pipeline as Pi
from .engine import checkpoint as ckpt_io
from .errors import ConfigError, ConvergenceWarning, DependencyError, HalfBrainError

DEFAULTS = {
    "seed": 0,
    "phantom": {},
    "pipeline": {"shape": [11, 64, 64], "window": [0.0, 80.0], "split_ratios": [0.7, 0.15, 0.15]},
    "model": {
        "epochs": {"half_pretrain": 20, "head_train": 15, "finetune": 2, "baseline": 10},
        "batch_size": 16, "weight_decay": 5e-5, "task2_weight": 1.0, "depth": 7,
        "sweep_depths": [1, 2, 3, 4, 5, 6, 7],
    },
    "explain": {
        "ae_epochs": 6, "ae_batch_size": 32, "ae_channels": [16, 32, 64, 128],
        "target_p": 0.01, "max_steps": 50, "anchor": "reconstruction", "max_scans": 0,
    },
    "metrics": {"n_boot": 1000},
}
_PHANTOM_KEYS = {f.name for f in fields(Ph.PhantomConfig)} - {"seed"}


def _merge(base, extra, where):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and base[key] and key != "epochs":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        elif key == "epochs":
            unknown = set(value) - set(base[key])
            if unknown:
                raise ConfigError(f"unknown stages in {where}epochs: {sorted(unknown)}")
            out[key] = {**base[key], **value}
        else:
            out[key] = value
    return out


def resolve_config(path=None, seed=None):
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise DependencyError(f"missing config file {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    phantom = raw.pop("phantom", {})
    if "out" in raw:
        raw.pop("out")
    unknown = set(phantom) - _PHANTOM_KEYS
    if unknown:
        raise ConfigError(f"unknown phantom keys {sorted(unknown)} (the seed is top-level)")
    cfg = _merge(DEFAULTS, raw, "")
    cfg["phantom"] = dict(phantom)
    if seed is not None:
        cfg["seed"] = int(seed)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def phantom_config(cfg):
    d = dict(cfg["phantom"])
    d.setdefault("shape", list(cfg["pipeline"]["shape"]))
    return Ph.PhantomConfig.from_dict({**d, "seed": cfg["seed"]})


def train_plan(cfg):
    m = cfg["model"]
    return Mo.TrainPlan(dict(m["epochs"]), int(m["batch_size"]), cfg["seed"],
                        float(m["weight_decay"]), float(m["task2_weight"]), int(m["depth"]))


# --------------------------------------------------------------------- I/O
def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _write_json(path, obj):
    return _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _need(path):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing upstream artifact {path}")
    return path


def _load_split(out, cfg):
    manifest = _need(out / "data" / "manifest.json")
    splits = json.loads(_need(out / "splits.json").read_text())
    corpus = {vol.scan_id: (vol, lab) for vol, lab in Pi.load_dataset(manifest)}
    shape = tuple(cfg["pipeline"]["shape"])
    window = tuple(cfg["pipeline"]["window"])
    data = {}
    for name in ("train", "val", "test"):
        items = []
        for sid in splits[name]:
            if sid not in corpus:
                raise DependencyError(f"scan {sid} listed in splits.json is not in the manifest")
            items.append(corpus[sid])
        data[name] = Mo.Dataset.from_corpus(items, shape, window)
    return data


def _load_ckpt(path):
    return ckpt_io.load(_need(path))


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


# ---------------------------------------------------------------- commands
def cmd_gen(args, cfg, out):
    pc = phantom_config(cfg)
    entries = []
    for vol, lab in Ph.generate(pc):
        rel = f"volumes/{vol.scan_id}.hbv"
        Pi.write_volume(out / "data" / rel, vol.voxels)
        entries.append(Pi.manifest_entry(vol, lab, rel))
    Pi.write_manifest(out / "data" / "manifest.json", entries)
    _say(args, f"wrote {len(entries)} scans to {out / 'data'}")


def cmd_split(args, cfg, out):
    entries = Pi.read_manifest(_need(out / "data" / "manifest.json"))
    parts = Pi.patient_split(entries, cfg["pipeline"]["split_ratios"], cfg["seed"])
    splits = {k: [e["scan_id"] for e in v] for k, v in parts.items()}
    _write_json(out / "splits.json", splits)
    _say(args, " ".join(f"{k}={len(v)}" for k, v in splits.items()))


def _logger(args, name):
    return (lambda row: _say(args, f"[{name}] epoch {row['epoch']} {row['stage']} "
                                   f"loss {row['train_loss']:.4f} val_acc {row['val_acc']:.4f}"))


def cmd_train(args, cfg, out):
    plan = train_plan(cfg)
    data = _load_split(out, cfg)
    stages = ["1", "2", "baseline"] if args.stage == "all" else [args.stage]
    for stage in stages:
        if stage == "1":
            _, ck, hist = Mo.stage1_train(data["train"], data["val"], plan, _logger(args, "stage1"))
            ckpt_io.save(out / "checkpoints" / "stage1.hsckpt", ck)
            _write_text(out / "metrics" / "stage1.csv", hist.to_csv())
        elif stage == "2":
            ck1 = _load_ckpt(out / "checkpoints" / "stage1.hsckpt")
            _, ck, hist = Mo.stage2_train(ck1, data["train"], data["val"], plan, _logger(args, "stage2"))
            ckpt_io.save(out / "checkpoints" / "mtl.hsckpt", ck)
            _write_text(out / "metrics" / "stage2.csv", hist.to_csv())
        else:
            _, ck, hist = Mo.baseline_train(data["train"], data["val"], plan, _logger(args, "baseline"))
            ckpt_io.save(out / "checkpoints" / "baseline.hsckpt", ck)
            _write_text(out / "metrics" / "baseline.csv", hist.to_csv())


def _model_for(path, data):
    ck = _load_ckpt(path)
    want = list(data.x.shape[1:])
    if ck.meta.get("input_shape") != want:
        raise DependencyError(f"{path} was trained on input shape {ck.meta.get('input_shape')}, "
                              f"data has {want}")
    return Mo.model_from_checkpoint(ck)


def evaluate(model, data):
    preds = Mo.predict_dataset(model, data)
    classes = [p["four_class"] for p in preds]
    summary = Me.classify_metrics(classes, data.labels, data.timepoints)
    tables = Me.subgroup_tables(classes, data.labels, data.timepoints)
    return preds, summary, tables


def _round_floats(obj, nd=8):
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {k: _round_floats(v, nd) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_floats(v, nd) for v in obj]
    return obj


def cmd_eval(args, cfg, out):
    data = _load_split(out, cfg)["test"]
    comparison = {}
    for name in ("mtl", "baseline"):
        path = out / "checkpoints" / f"{name}.hsckpt"
        if name == "baseline" and not path.exists():
            continue
        model = _model_for(path, data)
        preds, summary, tables = evaluate(model, data)
        _write_json(out / "eval" / f"predictions_{name}.json", _round_floats(preds))
        _write_text(out / "metrics" / f"summary_{name}.csv", Me.metrics_csv(summary))
        _write_text(out / "metrics" / f"subgroups_{name}.csv", Me.subgroup_csv(tables))
        comparison[f"{name}_acc4"] = summary["acc4"]
        _say(args, f"{name}: four-class test accuracy {summary['acc4']:.4f}")
    if "baseline_acc4" in comparison:
        comparison["gap"] = comparison["mtl_acc4"] - comparison["baseline_acc4"]
    _write_json(out / "eval" / "comparison.json", _round_floats(comparison))


def _explain_one(payload):
    x, mtl_ck, ae_ck, target_p, max_steps, anchor = payload
    model = Mo.model_from_checkpoint(mtl_ck)
    ae = X.autoencoder_from_checkpoint(ae_ck)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return X.counterfactual(x, model, ae, target_p, max_steps, anchor)


def cmd_explain(args, cfg, out):
    ex = cfg["explain"]
    data = _load_split(out, cfg)
    mtl_ck = _load_ckpt(out / "checkpoints" / "mtl.hsckpt")
    model = _model_for(out / "checkpoints" / "mtl.hsckpt", data["test"])
    ae_path = out / "checkpoints" / "autoencoder.hsckpt"
    if ae_path.exists():
        ae_ck = ckpt_io.load(ae_path)
    else:
        ae, hist = X.train_autoencoder(data["train"].x, data["val"].x, int(ex["ae_epochs"]),
                                       int(ex["ae_batch_size"]), cfg["seed"],
                                       channels=tuple(ex["ae_channels"]))
        ae_ck = X.autoencoder_checkpoint(ae, len(hist), {"val_mse": hist[-1].get("val_mse") if hist else None})
        ckpt_io.save(ae_path, ae_ck)
    test = data["test"]
    p, _, four = model.predict_arrays(test.x)
    truth = test.four_class()
    chosen = [i for i in range(len(test)) if truth[i] != 0 and four[i] == truth[i]]
    if ex["max_scans"]:
        chosen = chosen[: int(ex["max_scans"])]
    payloads = [(test.x[i], mtl_ck, ae_ck, float(ex["target_p"]), int(ex["max_steps"]), ex["anchor"])
                for i in chosen]
    if args.workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_explain_one, payloads))
    else:
        results = [_explain_one(pl) for pl in payloads]
    atlas = Ph.build_atlas(tuple(cfg["pipeline"]["shape"]))
    records = []
    for i, res in zip(chosen, results):
        sid = test.scan_ids[i]
        X.write_attribution(out / "explain", sid, res)
        lab = test.labels[i]
        loc = X.scored_location(lab)
        hit = None
        if loc is not None:
            hit = bool(atlas.mask(*loc)[res.attribution.peak()])
        records.append({"scan_id": sid, "steps": res.steps, "final_p": round(res.final_p, 8),
                        "converged": res.converged, "hit": hit})
    score = X.hit_score([r.attribution for r in results], [test.labels[i] for i in chosen], atlas)
    summary = {"scans": records, "hit_score": None if score.hits + score.misses == 0 else score.score,
               "hits": score.hits, "misses": score.misses, "excluded": score.excluded}
    _write_json(out / "explain" / "summary.json", _round_floats(summary))
    _say(args, f"explained {len(records)} scans; hit score {summary['hit_score']}")


def cmd_agree(args, cfg, out):
    ratings = Me.RatingsMatrix.read_csv(args.ratings) if args.ratings else Me.bundled_ratings()
    reference = Me.bundled_reference() if not args.ratings or args.reference else None
    report = Me.pairwise_agreement(ratings, target=args.target, n_boot=int(cfg["metrics"]["n_boot"]),
                                   seed=cfg["seed"], reference=reference)
    _write_json(out / "agree" / "agreement.json", _round_floats(report))
    print(Me.format_agreement(report))


def cmd_sweep(args, cfg, out):
    depths = [int(d) for d in args.depths.split(",")] if args.depths else cfg["model"]["sweep_depths"]
    data = _load_split(out, cfg)
    rows = Mo.layer_sweep(data["train"], data["val"], train_plan(cfg), depths)
    _write_text(out / "sweep" / "layer_sweep.csv", Mo.sweep_csv(rows))
    for r in rows:
        _say(args, f"depth {r['depth']}: val acc {r['val_acc']:.4f}")


COMMANDS = {"gen": cmd_gen, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "agree": cmd_agree, "sweep": cmd_sweep}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for explain")
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")
    parser = argparse.ArgumentParser(prog="halfbrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the phantom corpus")
    sub.add_parser("split", parents=[common], help="patient-grouped train/val/test split")
    t = sub.add_parser("train", parents=[common], help="train models")
    t.add_argument("--stage", choices=["1", "2", "baseline", "all"], default="all")
    sub.add_parser("eval", parents=[common], help="evaluate on the test split")
    sub.add_parser("explain", parents=[common], help="counterfactual attributions and hit score")
    a = sub.add_parser("agree", parents=[common], help="Krippendorff's alpha report")
    a.add_argument("--ratings", help="long-format CSV unit,rater,category (default: bundled table)")
    a.add_argument("--target", default="model", help="rater compared against every expert")
    a.add_argument("--reference", action="store_true",
                   help="print the bundled reference column next to a custom ratings file")
    s = sub.add_parser("sweep", parents=[common], help="stage-1 val accuracy versus depth")
    s.add_argument("--depths", help="comma-separated depths (default from config)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = resolve_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.resolved.json", cfg)
        COMMANDS[args.command](args, cfg, out)
    except HalfBrainError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
