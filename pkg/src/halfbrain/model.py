"""Half-brain encoder, multi-task heads, full-brain baseline and their training loops.

Training runs in three steps:

1. ``stage1_train``: the encoder plus a small presence head learns, from single
   hemispheres, whether that hemisphere holds a lesion.
2. ``stage2_train``: the presence head is dropped; features of both halves are
   concatenated and fed to a presence head (task 1) and a side head (task 2).
   Phase A trains the heads on a frozen encoder, phase B fine-tunes everything.
3. ``baseline_train``: the same convolutional stack applied to the whole
   volume with one four-way head, for comparison.
"""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .engine import checkpoint as ckpt_io
from .engine import functional as F
from .engine.layers import BatchNorm2d, Conv2d, Linear, Module
from .engine.optim import Adam, AdamState
from .engine.tensor import Tensor, concat, flip, make, no_grad
from .errors import ConfigError, DimensionError, StateError
from .pipeline import FOUR_CLASSES, standardize

FILTERS = (16, 32, 48, 64, 64, 64, 64)
HEAD_NODES = 128
SIDE_CLASSES = ("left", "right", "both")
STAGE_LR = {"half_pretrain": 1e-3, "head_train": 1e-4, "finetune": 1e-5, "baseline": 1e-3}
_STAGE_CODE = {"half_pretrain": 1, "head_train": 2, "finetune": 3, "baseline": 4}


@dataclass
class TrainPlan:
    epochs: dict = field(default_factory=lambda: {
        "half_pretrain": 8, "head_train": 60, "finetune": 2, "baseline": 10,
    })
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 5e-5
    task2_weight: float = 1.0
    depth: int = 7

    def __post_init__(self):
        unknown = set(self.epochs) - set(STAGE_LR)
        if unknown:
            raise ConfigError(f"unknown training stages {sorted(unknown)}")
        self.epochs = {**{"half_pretrain": 8, "head_train": 60, "finetune": 2, "baseline": 10},
                       **self.epochs}
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for batch normalization")
        if not 1 <= self.depth <= len(FILTERS):
            raise ConfigError(f"depth must lie in [1, {len(FILTERS)}]")

    @staticmethod
    def lr(stage):
        return STAGE_LR[stage]


# ------------------------------------------------------------------ data
@dataclass
class Dataset:
    """Standardized volumes stacked as ``x[N, S, H, W]`` plus labels."""

    x: np.ndarray
    labels: list
    scan_ids: list
    timepoints: list

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_corpus(cls, corpus, shape=None, window=(0.0, 80.0), standardized=False):
        if not corpus:
            raise ConfigError("empty corpus")
        vols = []
        for vol, _ in corpus:
            v = vol if standardized else standardize(vol, shape or vol.shape, window)
            vols.append(v.voxels)
        x = np.stack(vols).astype(np.float32)
        return cls(x, [lab for _, lab in corpus], [v.scan_id for v, _ in corpus],
                   [v.timepoint for v, _ in corpus])

    def presence(self):
        return np.array([lab.presence for lab in self.labels], dtype=np.int64)

    def side_targets(self):
        return np.array([SIDE_CLASSES.index(lab.side) if lab.presence else 0
                         for lab in self.labels], dtype=np.int64)

    def four_class(self):
        return np.array([FOUR_CLASSES.index(lab.four_class) for lab in self.labels], dtype=np.int64)

    def halves(self):
        """Canonical halves ``[2N, S, H, W/2]`` (all lefts, then all rights) and presence."""
        w = self.x.shape[-1]
        left = self.x[..., : w // 2][..., ::-1]
        right = self.x[..., w // 2:]
        xs = np.ascontiguousarray(np.concatenate([left, right]))
        ys = np.array([lab.half_present("left") for lab in self.labels]
                      + [lab.half_present("right") for lab in self.labels], dtype=np.int64)
        return xs, ys


def split_halves(x):
    """Differentiable midline split of ``x[B, S, H, W]`` into ``[2B, S, H, W/2]``.

    Rows ``0..B-1`` are the mirrored left halves, rows ``B..2B-1`` the right halves.
    """
    xd = x.data
    w = xd.shape[-1]
    if w % 2:
        raise DimensionError(f"width {w} is odd")
    h = w // 2
    out = np.ascontiguousarray(np.concatenate([xd[..., :h][..., ::-1], xd[..., h:]]))
    b = xd.shape[0]

    def backward(g):
        dx = np.empty_like(xd)
        dx[..., :h] = g[:b][..., ::-1]
        dx[..., h:] = g[b:]
        return (dx,)

    return make(out, (x,), backward)


def log_odds(logits, positive):
    """Log-odds of the classes selected by ``positive`` against the rest, per row."""
    z = logits.data.astype(np.float64)
    mask = np.zeros(z.shape[1], dtype=bool)
    mask[positive] = True

    def lse(a):
        m = a.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]

    zp, zn = z[:, mask], z[:, ~mask]
    out = lse(zp) - lse(zn)

    def backward(g):
        sp = np.exp(zp - lse(zp)[:, None])
        sn = np.exp(zn - lse(zn)[:, None])
        d = np.zeros_like(z)
        d[:, mask] = sp * g[:, None]
        d[:, ~mask] = -sn * g[:, None]
        return (d.astype(logits.dtype),)

    return make(out.astype(logits.dtype), (logits,), backward)


# ------------------------------------------------------------------ modules
class ConvBlock(Module):
    def __init__(self, cin, cout, rng, pool):
        super().__init__()
        self.conv = Conv2d(cin, cout, rng)
        self.bn = BatchNorm2d(cout)
        self.pool = pool

    def forward(self, x):
        h = F.leaky_relu(self.bn(self.conv(x)))
        return F.avgpool2d(h, self.pool)


def block_pools(hw, depth):
    """Pooling window per block; an axis already at extent 1 is not pooled."""
    h, w = hw
    pools = []
    for _ in range(depth):
        kh, kw = F.pool_kernel(h, w)
        pools.append((kh, kw))
        h, w = h // kh, w // kw
    return pools, (h, w)


class HalfBrainEncoder(Module):
    """Per-slice conv stack followed by averaging every feature map over slices."""

    def __init__(self, rng, in_hw, depth=7, filters=FILTERS):
        super().__init__()
        if not 1 <= depth <= len(filters):
            raise ConfigError(f"depth {depth} outside [1, {len(filters)}]")
        if min(in_hw) < 1:
            raise ConfigError(f"input {in_hw} has no spatial extent")
        pools, out_hw = block_pools(in_hw, depth)
        chans = (1,) + tuple(filters[:depth])
        self.blocks = [ConvBlock(chans[i], chans[i + 1], rng, pools[i]) for i in range(depth)]
        self.in_hw = tuple(in_hw)
        self.out_hw = out_hw
        self.feature_dim = chans[-1] * out_hw[0] * out_hw[1]

    def forward(self, x):
        b, s, h, w = x.shape
        if (h, w) != self.in_hw:
            raise DimensionError(f"encoder built for {self.in_hw}, got {(h, w)}")
        t = x.reshape(b * s, 1, h, w)
        for block in self.blocks:
            t = block(t)
        t = t.reshape(b, s, self.feature_dim)
        return t.mean(axis=1)


class HalfPresenceNet(Module):
    """Stage-1 network: encoder plus a linear present/absent head on one half."""

    kind = "half"

    def __init__(self, rng, in_hw, depth=7):
        super().__init__()
        self.encoder = HalfBrainEncoder(rng, in_hw, depth)
        self.presence = Linear(self.encoder.feature_dim, 2, rng, scale=0.1)

    def forward(self, halves):
        return self.presence(self.encoder(halves))


class MtlHead(Module):
    def __init__(self, in_dim, rng, nodes=HEAD_NODES):
        super().__init__()
        self.task1_fc = Linear(in_dim, nodes, rng)
        self.task1_out = Linear(nodes, 2, rng, scale=0.1)
        self.task2_fc = Linear(in_dim, nodes, rng)
        self.task2_out = Linear(nodes, 3, rng, scale=0.1)

    def forward(self, feats):
        t1 = self.task1_out(F.leaky_relu(self.task1_fc(feats)))
        t2 = self.task2_out(F.leaky_relu(self.task2_fc(feats)))
        return t1, t2


class MtlModel(Module):
    """Shared half-brain encoder applied to both canonical halves, then two heads."""

    kind = "mtl"

    def __init__(self, rng, volume_shape, depth=7):
        super().__init__()
        s, h, w = volume_shape
        self.volume_shape = tuple(volume_shape)
        self.encoder = HalfBrainEncoder(rng, (h, w // 2), depth)
        self.head = MtlHead(2 * self.encoder.feature_dim, rng)

    def features(self, x):
        """Concatenated ``[left, right]`` encoder features for ``x[B, S, H, W]``."""
        b = x.shape[0]
        f = self.encoder(split_halves(x))
        return concat([f[:b], f[b:]], axis=1)

    def forward(self, x):
        return self.head(self.features(x))

    def lesion_probability(self, x):
        t1, _ = self.forward(x)
        return F.softmax(t1)[:, 1]

    def lesion_log_odds(self, x):
        """``log(p / (1 - p))`` of lesion presence, one entry per volume."""
        t1, _ = self.forward(x)
        return log_odds(t1, 1)

    def predict_arrays(self, x, batch=16):
        self.eval()
        p1, p2 = [], []
        with no_grad():
            for i in range(0, len(x), batch):
                t1, t2 = self.forward(Tensor(x[i:i + batch]))
                p1.append(F.softmax(t1).data[:, 1])
                p2.append(F.softmax(t2).data)
        p_lesion = np.concatenate(p1).astype(np.float64)
        side = np.concatenate(p2).astype(np.float64)
        four = np.where(p_lesion < 0.5, 0, 1 + side.argmax(axis=1))
        return p_lesion, side, four


class FullBrainNet(Module):
    """Baseline: the same conv stack on the unsplit volume with a four-way head."""

    kind = "baseline"

    def __init__(self, rng, volume_shape, depth=7):
        super().__init__()
        s, h, w = volume_shape
        self.volume_shape = tuple(volume_shape)
        self.encoder = HalfBrainEncoder(rng, (h, w), depth)
        self.fc = Linear(self.encoder.feature_dim, HEAD_NODES, rng)
        self.out = Linear(HEAD_NODES, 4, rng, scale=0.1)

    def forward(self, x):
        return self.out(F.leaky_relu(self.fc(self.encoder(x))))

    def lesion_probability(self, x):
        return 1.0 - F.softmax(self.forward(x))[:, 0]

    def lesion_log_odds(self, x):
        return log_odds(self.forward(x), slice(1, None))

    def predict_arrays(self, x, batch=16):
        self.eval()
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                out.append(F.softmax(self.forward(Tensor(x[i:i + batch]))).data)
        probs = np.concatenate(out).astype(np.float64)
        return probs, probs.argmax(axis=1)


# -------------------------------------------------------------- checkpoints
def _snapshot_optimizer(opt):
    st = opt.state
    return AdamState(st.lr_base, st.weight_decay, st.beta1, st.beta2, st.eps, st.total_epochs,
                     st.eta_min, st.step_count,
                     {k: v.copy() for k, v in st.m.items()},
                     {k: v.copy() for k, v in st.v.items()})


def model_meta(model):
    meta = {"model": model.kind, "depth": len(model.encoder.blocks)}
    if isinstance(model, HalfPresenceNet):
        meta["half_shape"] = list(model.encoder.in_hw)
    else:
        meta["input_shape"] = list(model.volume_shape)
    return meta


def make_checkpoint(model, stage, epoch=0, optimizer=None, extra=None):
    meta = model_meta(model)
    if extra:
        meta.update(extra)
    return ckpt_io.Checkpoint(stage, OrderedDict(model.state_dict()), epoch, meta, optimizer)


def model_from_checkpoint(ckpt):
    """Rebuild the network described by a checkpoint's metadata and load its weights."""
    meta = ckpt.meta
    kind = meta.get("model")
    rng = np.random.default_rng(0)
    depth = int(meta.get("depth", 7))
    if kind == "half":
        model = HalfPresenceNet(rng, tuple(meta["half_shape"]), depth)
    elif kind == "mtl":
        model = MtlModel(rng, tuple(meta["input_shape"]), depth)
    elif kind == "baseline":
        model = FullBrainNet(rng, tuple(meta["input_shape"]), depth)
    else:
        raise StateError(f"checkpoint describes unknown model {kind!r}")
    model.load_state_dict(ckpt.arrays)
    model.eval()
    return model


# ------------------------------------------------------------------ batchnorm
BN_CALIBRATION = 320    # halves (or half-equivalents) used to re-estimate BN statistics


def _bn_layers(module):
    if isinstance(module, BatchNorm2d):
        yield module
    for _, child in module._children():
        yield from _bn_layers(child)


def recalibrate_bn(model, x, count=BN_CALIBRATION, batch=32):
    """Replace BN running statistics with exact pooled statistics at the current weights.

    ``count`` evenly spaced items of ``x`` are pushed through the model in
    training mode; per-batch means and variances are pooled (within-batch plus
    between-batch variance). The moving averages collected during an epoch lag
    behind fast-changing weights, which made eval-mode outputs erratic.
    """
    bns = list(_bn_layers(model))
    if not bns:
        return
    idx = np.unique(np.linspace(0, len(x) - 1, min(count, len(x))).astype(np.int64))
    momenta = [bn.momentum for bn in bns]
    means = [[] for _ in bns]
    variances = [[] for _ in bns]
    model.train()
    try:
        for bn in bns:
            bn.momentum = 1.0
        with no_grad():
            for i in range(0, len(idx), batch):
                chunk = idx[i:i + batch]
                if len(chunk) < 2:
                    break
                model(Tensor(x[chunk]))
                for k, bn in enumerate(bns):
                    means[k].append(bn.running_mean.astype(np.float64))
                    variances[k].append(bn.running_var.astype(np.float64))
    finally:
        for bn, m in zip(bns, momenta):
            bn.momentum = m
    if means[0]:
        for k, bn in enumerate(bns):
            mu = np.stack(means[k])
            bn.running_mean[:] = mu.mean(axis=0)
            bn.running_var[:] = np.stack(variances[k]).mean(axis=0) + mu.var(axis=0)
    model.eval()


# ------------------------------------------------------------------ training
@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, epoch, stage, lr, train_loss, val_loss, val_acc):
        self.rows.append({"epoch": epoch, "stage": stage, "lr": lr, "train_loss": train_loss,
                          "val_loss": val_loss, "val_acc": val_acc})

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "stage", "lr", "train_loss", "val_loss", "val_acc"])
        for r in self.rows:
            w.writerow([r["epoch"], r["stage"], f"{r['lr']:.8g}", f"{r['train_loss']:.6f}",
                        f"{r['val_loss']:.6f}", f"{r['val_acc']:.6f}"])
        return buf.getvalue()


def _rng(plan, stage, *extra):
    return np.random.default_rng([plan.seed, _STAGE_CODE[stage], *extra])


def _check_classes(y, what):
    if len(y) == 0:
        raise ConfigError(f"{what}: empty corpus")
    if len(np.unique(y)) < 2:
        raise ConfigError(f"{what}: corpus contains a single class")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = np.sort(order[i:i + batch_size])
        if len(idx) >= 2:
            yield idx


def _evaluate_logits(forward, x, y, batch=32):
    losses, correct = 0.0, 0
    with no_grad():
        for i in range(0, len(x), batch):
            logits = forward(Tensor(x[i:i + batch]))
            tgt = y[i:i + batch]
            losses += float(F.softmax_cross_entropy(logits, tgt).data) * len(tgt)
            correct += int((logits.data.argmax(axis=1) == tgt).sum())
    return losses / len(x), correct / len(x)


def _better(acc, loss, best):
    return best is None or acc > best[0] or (acc == best[0] and loss < best[1])


def stage1_train(train, val, plan, log=None):
    """Train encoder + presence head on hemispheres; returns ``(model, checkpoint, history)``."""
    xs, ys = train.halves()
    xv, yv = val.halves()
    _check_classes(ys, "stage 1")
    stage = "half_pretrain"
    epochs = plan.epochs[stage]
    model = HalfPresenceNet(_rng(plan, stage), xs.shape[2:], plan.depth)
    opt = Adam(model.named_parameters(), STAGE_LR[stage], plan.weight_decay, epochs)
    hist = History()
    best, best_state = None, None
    for epoch in range(epochs):
        model.train()
        lr = opt.state.lr_at(epoch)
        tot, count = 0.0, 0
        for idx in _batches(len(xs), plan.batch_size, _rng(plan, stage, epoch)):
            opt.zero_grad()
            loss = F.softmax_cross_entropy(model(Tensor(xs[idx])), ys[idx])
            loss.backward()
            opt.step(epoch)
            tot += float(loss.data) * len(idx)
            count += len(idx)
        recalibrate_bn(model, xs)
        vloss, vacc = _evaluate_logits(model, xv, yv)
        hist.add(epoch, stage, lr, tot / max(count, 1), vloss, vacc)
        if log:
            log(hist.rows[-1])
        if _better(vacc, vloss, best):
            best = (vacc, vloss, epoch)
            best_state = (model.state_dict(), _snapshot_optimizer(opt))
    if best_state is not None:
        model.load_state_dict(best_state[0])
    model.eval()
    ckpt = make_checkpoint(model, stage, best[2] if best else 0,
                           best_state[1] if best_state else opt.state,
                           {"val_acc": best[0] if best else None})
    return model, ckpt, hist


def _mtl_losses(t1, t2, presence, side, task2_weight):
    l1 = F.softmax_cross_entropy(t1, presence)
    l2 = F.softmax_cross_entropy(t2, side, weights=presence.astype(np.float64))
    return l1 + l2 * task2_weight, l1, l2


def _four_from_logits(t1, t2):
    p = F._softmax_np(t1)[:, 1]
    return np.where(p < 0.5, 0, 1 + t2.argmax(axis=1))


def _mtl_validate(model, val, plan, batch=16, feats=None):
    model.eval()
    pres, side, four = val.presence(), val.side_targets(), val.four_class()
    tot, correct = 0.0, 0
    with no_grad():
        for i in range(0, len(val), batch):
            sl = slice(i, i + batch)
            if feats is None:
                t1, t2 = model(Tensor(val.x[sl]))
            else:
                t1, t2 = model.head(Tensor(feats[sl]))
            loss, _, _ = _mtl_losses(t1, t2, pres[sl], side[sl], plan.task2_weight)
            tot += float(loss.data) * len(pres[sl])
            correct += int((_four_from_logits(t1.data, t2.data) == four[sl]).sum())
    return tot / len(val), correct / len(val)


def _frozen_features(model, x, batch=32):
    with no_grad():
        return np.concatenate([model.features(Tensor(x[i:i + batch])).data
                               for i in range(0, len(x), batch)])


def stage2_train(checkpoint, train, val, plan, log=None):
    """Heads on a frozen encoder (phase A), then full fine-tuning (phase B)."""
    if checkpoint.stage != "half_pretrain":
        raise StateError(f"stage 2 needs a half_pretrain checkpoint, got {checkpoint.stage!r}")
    _check_classes(train.presence(), "stage 2")
    model = MtlModel(_rng(plan, "head_train"), train.x.shape[1:], plan.depth)
    enc_state = {k[len("encoder."):]: v for k, v in checkpoint.arrays.items()
                 if k.startswith("encoder.")}
    model.encoder.load_state_dict(enc_state)
    pres, side = train.presence(), train.side_targets()
    hist = History()

    # phase A: cached features from the frozen encoder (BN statistics frozen too)
    model.encoder.eval()
    feats = _frozen_features(model, train.x)
    val_feats = _frozen_features(model, val.x)
    stage = "head_train"
    epochs_a = plan.epochs[stage]
    opt = Adam(model.head.named_parameters(), STAGE_LR[stage], plan.weight_decay, max(epochs_a, 1))
    best, best_state = None, None
    for epoch in range(epochs_a):
        model.head.train()
        lr = opt.state.lr_at(epoch)
        tot, count = 0.0, 0
        for idx in _batches(len(feats), plan.batch_size, _rng(plan, stage, epoch)):
            opt.zero_grad()
            t1, t2 = model.head(Tensor(feats[idx]))
            loss, _, _ = _mtl_losses(t1, t2, pres[idx], side[idx], plan.task2_weight)
            loss.backward()
            opt.step(epoch)
            tot += float(loss.data) * len(idx)
            count += len(idx)
        vloss, vacc = _mtl_validate(model, val, plan, feats=val_feats)
        hist.add(epoch, stage, lr, tot / max(count, 1), vloss, vacc)
        if log:
            log(hist.rows[-1])
        if _better(vacc, vloss, best):
            best = (vacc, vloss, epoch, stage)
            best_state = (model.state_dict(), None)

    stage = "finetune"
    epochs_b = plan.epochs[stage]
    if epochs_b > 0:
        if best_state is not None:
            model.load_state_dict(best_state[0])
        opt = Adam(model.named_parameters(), STAGE_LR[stage], plan.weight_decay, epochs_b)
        for epoch in range(epochs_b):
            model.train()
            lr = opt.state.lr_at(epoch)
            tot, count = 0.0, 0
            for idx in _batches(len(train), plan.batch_size, _rng(plan, stage, epoch)):
                opt.zero_grad()
                t1, t2 = model(Tensor(train.x[idx]))
                loss, _, _ = _mtl_losses(t1, t2, pres[idx], side[idx], plan.task2_weight)
                loss.backward()
                opt.step(epoch)
                tot += float(loss.data) * len(idx)
                count += len(idx)
            recalibrate_bn(model, train.x, BN_CALIBRATION // 2, 16)
            vloss, vacc = _mtl_validate(model, val, plan)
            hist.add(epoch, stage, lr, tot / max(count, 1), vloss, vacc)
            if log:
                log(hist.rows[-1])
            if _better(vacc, vloss, best):
                best = (vacc, vloss, epoch, stage)
                best_state = (model.state_dict(), _snapshot_optimizer(opt))
    if best_state is not None:
        model.load_state_dict(best_state[0])
    model.eval()
    final_stage = best[3] if best else "head_train"
    ckpt = make_checkpoint(model, final_stage, best[2] if best else 0,
                           best_state[1] if best_state else None, {"val_acc": best[0] if best else None})
    return model, ckpt, hist


def baseline_train(train, val, plan, log=None):
    stage = "baseline"
    y = train.four_class()
    yv = val.four_class()
    _check_classes(y, "baseline")
    epochs = plan.epochs[stage]
    model = FullBrainNet(_rng(plan, stage), train.x.shape[1:], plan.depth)
    opt = Adam(model.named_parameters(), STAGE_LR[stage], plan.weight_decay, epochs)
    hist = History()
    best, best_state = None, None
    for epoch in range(epochs):
        model.train()
        lr = opt.state.lr_at(epoch)
        tot, count = 0.0, 0
        for idx in _batches(len(train), plan.batch_size, _rng(plan, stage, epoch)):
            opt.zero_grad()
            loss = F.softmax_cross_entropy(model(Tensor(train.x[idx])), y[idx])
            loss.backward()
            opt.step(epoch)
            tot += float(loss.data) * len(idx)
            count += len(idx)
        recalibrate_bn(model, train.x, BN_CALIBRATION // 2, 16)
        vloss, vacc = _evaluate_logits(model, val.x, yv)
        hist.add(epoch, stage, lr, tot / max(count, 1), vloss, vacc)
        if log:
            log(hist.rows[-1])
        if _better(vacc, vloss, best):
            best = (vacc, vloss, epoch)
            best_state = (model.state_dict(), _snapshot_optimizer(opt))
    if best_state is not None:
        model.load_state_dict(best_state[0])
    model.eval()
    ckpt = make_checkpoint(model, stage, best[2] if best else 0,
                           best_state[1] if best_state else opt.state,
                           {"val_acc": best[0] if best else None})
    return model, ckpt, hist


# --------------------------------------------------------------- inference
def predict(model, volume):
    """Prediction dict for one standardized :class:`Volume` (or ``[S,H,W]`` array)."""
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume, dtype=np.float32)
    if tuple(vox.shape) != tuple(model.volume_shape):
        raise DimensionError(f"model expects {model.volume_shape}, got {tuple(vox.shape)}")
    p, side, four = model.predict_arrays(vox[None])
    return {"p_lesion": float(p[0]), "side_probs": side[0].tolist(),
            "four_class": FOUR_CLASSES[int(four[0])]}


def baseline_predict(model, volume):
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume, dtype=np.float32)
    if tuple(vox.shape) != tuple(model.volume_shape):
        raise DimensionError(f"model expects {model.volume_shape}, got {tuple(vox.shape)}")
    probs, cls = model.predict_arrays(vox[None])
    return {"probs": probs[0].tolist(), "p_lesion": float(1.0 - probs[0][0]),
            "four_class": FOUR_CLASSES[int(cls[0])]}


def predict_dataset(model, data):
    """Per-scan prediction records for the MTL model or the baseline."""
    if isinstance(model, MtlModel):
        p, side, four = model.predict_arrays(data.x)
        return [{"scan_id": sid, "p_lesion": float(p[i]), "side_probs": side[i].tolist(),
                 "four_class": FOUR_CLASSES[int(four[i])]}
                for i, sid in enumerate(data.scan_ids)]
    probs, cls = model.predict_arrays(data.x)
    return [{"scan_id": sid, "p_lesion": float(1.0 - probs[i][0]),
             "side_probs": (probs[i][1:] / max(probs[i][1:].sum(), 1e-12)).tolist(),
             "four_class": FOUR_CLASSES[int(cls[i])]}
            for i, sid in enumerate(data.scan_ids)]


def layer_sweep(train, val, plan, layer_counts):
    """Stage-1 validation accuracy for each encoder depth in ``layer_counts``."""
    rows = []
    for depth in layer_counts:
        if not 1 <= depth <= len(FILTERS):
            raise ConfigError(f"depth {depth} outside [1, {len(FILTERS)}]")
        sub = TrainPlan(dict(plan.epochs), plan.batch_size, plan.seed, plan.weight_decay,
                        plan.task2_weight, depth)
        _, ckpt, _ = stage1_train(train, val, sub)
        rows.append({"depth": depth, "val_acc": ckpt.meta["val_acc"]})
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["depth", "val_acc"])
    for r in rows:
        w.writerow([r["depth"], f"{r['val_acc']:.6f}"])
    return buf.getvalue()
