"""A few-minute version of the whole workflow on a 200-scan corpus.

    python3 demos/small_pipeline.py

Stage 1 learns lesion presence per hemisphere, stage 2 adds the side head on
top of both hemispheres, and a counterfactual is computed for one detected
lesion. Expect roughly 0.75 test accuracy in about five minutes, below the
desk-scale run because the corpus is a third of the size and the epochs are
halved.
"""

import warnings

import numpy as np

from halfbrain import explain, metrics, model, phantom, pipeline
from halfbrain.errors import ConvergenceWarning

SHAPE = (11, 64, 64)
corpus = phantom.generate(phantom.PhantomConfig(n_scans=200, shape=SHAPE, seed=1))
parts = pipeline.patient_split(corpus, seed=1)
train, val, test = (model.Dataset.from_corpus(parts[k]) for k in ("train", "val", "test"))
print(f"train/val/test scans: {len(train)}/{len(val)}/{len(test)}")

plan = model.TrainPlan({"half_pretrain": 10, "head_train": 15, "finetune": 1}, batch_size=16, seed=1)
show = lambda row: print(f"  {row['stage']:13s} epoch {row['epoch']:2d}  val acc {row['val_acc']:.3f}")
_, stage1, _ = model.stage1_train(train, val, plan, show)
mtl, _, _ = model.stage2_train(stage1, train, val, plan,
                               lambda r: (r["epoch"] % 5 == 4 or r["stage"] == "finetune") and show(r))

preds = model.predict_dataset(mtl, test)
summary = metrics.classify_metrics(preds, test.labels, test.timepoints)
print(f"test four-class accuracy {summary['acc4']:.3f}, "
      f"sensitivity {summary['sensitivity']}, specificity {summary['specificity']}")

ae, _ = explain.train_autoencoder(train.x, None, epochs=2, seed=1)
hits = [i for i, (p, lab) in enumerate(zip(preds, test.labels))
        if lab.presence and p["four_class"] == lab.four_class]
if hits:
    i = hits[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = explain.counterfactual(test.x[i], mtl, ae)
    peak = res.attribution.peak()
    print(f"{test.scan_ids[i]}: p_lesion {res.initial_p:.3f} -> {res.final_p:.4f} in {res.steps} steps; "
          f"peak attribution at slice {peak[0]}, row {peak[1]}, column {peak[2]} "
          f"(label {sorted(test.labels[i].locations)})")
else:
    print("no correctly detected lesion in this tiny test split")
print("mean p_lesion on negatives:",
      np.round(np.mean([p["p_lesion"] for p, lab in zip(preds, test.labels) if not lab.presence]), 3))
