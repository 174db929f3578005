"""Latent-shift counterfactuals, attribution maps and the region hit score."""

from __future__ import annotations

import contextlib
import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import checkpoint as ckpt_io
from .engine import functional as F
from .engine.layers import Conv2d, Module
from .engine.optim import Adam
from .engine.tensor import Tensor, no_grad, sigmoid
from .errors import ConfigError, ConvergenceWarning, DimensionError, SaturationError, StateError
from .pipeline import write_volume

AE_CHANNELS = (16, 32, 64, 128)
SCORED_REGIONS = ("MCA", "ACA", "PCA")


class SliceAutoencoder(Module):
    """2-D autoencoder applied slice by slice; latent is ``[C, H/16, W/16]``."""

    def __init__(self, rng, channels=AE_CHANNELS):
        super().__init__()
        if len(channels) != 4:
            raise ConfigError("the autoencoder has exactly 4 encoder blocks")
        chans = (1,) + tuple(channels)
        self.channels = tuple(channels)
        self.enc = [Conv2d(chans[i], chans[i + 1], rng) for i in range(4)]
        back = chans[::-1]
        self.dec = [Conv2d(back[i], back[i + 1], rng) for i in range(4)]

    def encode(self, x):
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise DimensionError(f"slice size {h}x{w} must be divisible by 16")
        for conv in self.enc:
            x = F.avgpool2d(F.leaky_relu(conv(x)), 2)
        return x

    def decode(self, z):
        for i, conv in enumerate(self.dec):
            z = conv(F.upsample2d(z, 2))
            z = F.leaky_relu(z) if i < 3 else sigmoid(z)
        return z

    def forward(self, x):
        return self.decode(self.encode(x))

    def reconstruct(self, volume):
        """Reconstruction of a ``[S, H, W]`` array (no graph)."""
        with no_grad():
            out = self.forward(Tensor(np.asarray(volume, dtype=np.float32)[:, None]))
        return out.data[:, 0]


def _slices(x, mirror_mask=None):
    s = x.reshape(-1, 1, *x.shape[-2:])
    if mirror_mask is not None:
        s = s.copy()
        s[mirror_mask] = s[mirror_mask][..., ::-1]
    return s


def autoencoder_mse(ae, x, batch=64):
    """Mean squared reconstruction error over every slice of ``x[N, S, H, W]``."""
    s = _slices(x)
    tot = 0.0
    with no_grad():
        for i in range(0, len(s), batch):
            r = ae(Tensor(s[i:i + batch])).data
            tot += float(((r.astype(np.float64) - s[i:i + batch]) ** 2).sum())
    return tot / s.size


def train_autoencoder(train_x, val_x=None, epochs=8, batch_size=32, seed=0, lr=1e-3,
                      channels=AE_CHANNELS, log=None):
    """Fit the slice autoencoder with MSE; half of each batch is mirrored left-right."""
    slices = _slices(train_x)
    if len(slices) < 2:
        raise ConfigError("autoencoder needs at least two training slices")
    ae = SliceAutoencoder(np.random.default_rng([seed, 11]), channels)
    opt = Adam(ae.named_parameters(), lr, 0.0, max(epochs, 1))
    history = []
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 11, epoch])
        order = rng.permutation(len(slices))
        flips = rng.random(len(slices)) < 0.5
        tot = 0.0
        for i in range(0, len(order), batch_size):
            idx = np.sort(order[i:i + batch_size])
            xb = slices[idx].copy()
            xb[flips[idx]] = xb[flips[idx]][..., ::-1]
            opt.zero_grad()
            loss = F.mse_loss(ae(Tensor(xb)), Tensor(xb))
            loss.backward()
            opt.step(epoch)
            tot += float(loss.data) * len(idx)
        row = {"epoch": epoch, "train_mse": tot / len(slices)}
        if val_x is not None:
            row["val_mse"] = autoencoder_mse(ae, val_x)
        history.append(row)
        if log:
            log(row)
    return ae, history


def autoencoder_checkpoint(ae, epoch=0, extra=None):
    meta = {"model": "autoencoder", "channels": list(ae.channels)}
    if extra:
        meta.update(extra)
    return ckpt_io.Checkpoint("autoencoder", OrderedDict(ae.state_dict()), epoch, meta)


def autoencoder_from_checkpoint(ckpt):
    if ckpt.meta.get("model") != "autoencoder":
        raise StateError(f"checkpoint holds {ckpt.meta.get('model')!r}, not an autoencoder")
    ae = SliceAutoencoder(np.random.default_rng(0), tuple(ckpt.meta["channels"]))
    ae.load_state_dict(ckpt.arrays)
    return ae


# ------------------------------------------------------------ attribution
def top_fraction_mask(values, fraction=0.01):
    """Boolean mask of the ``ceil(fraction * N)`` largest values; ties go to lower index."""
    flat = np.asarray(values).ravel()
    k = math.ceil(fraction * flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(np.shape(values))


@dataclass
class AttributionMap:
    values: np.ndarray
    threshold_mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if (self.values < 0).any():
            raise ConfigError("attribution values must be non-negative")
        if self.threshold_mask is None:
            self.threshold_mask = top_fraction_mask(self.values)

    @classmethod
    def from_difference(cls, a, b):
        return cls(np.abs(np.asarray(a, np.float32) - np.asarray(b, np.float32)))

    def peak(self):
        return np.unravel_index(int(np.argmax(self.values)), self.values.shape)


@dataclass
class CounterfactualResult:
    volume: np.ndarray              # decoded counterfactual, [S, H, W]
    attribution: AttributionMap
    initial_p: float
    final_p: float
    steps: int
    converged: bool
    p_trace: list = field(default_factory=list)


@contextlib.contextmanager
def _frozen(*modules):
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _sigmoid(t):
    return 1.0 / (1.0 + math.exp(-t)) if t >= 0 else math.exp(t) / (1.0 + math.exp(t))


def counterfactual(volume, classifier, ae, target_p=0.01, max_steps=50, anchor="reconstruction",
                   step_fraction=0.05):
    """Shift the slice latents down the lesion-probability gradient.

    ``z <- z - lam * grad p`` with ``lam`` doubled after an accepted step and
    halved after a rejected one (a step is accepted only if ``p`` drops). The
    first ``lam`` moves the latent by ``step_fraction`` of its norm. Every
    iteration, accepted or not, counts towards ``max_steps``.

    ``anchor`` selects the attribution reference: ``"reconstruction"`` uses
    ``|decode(z0) - decode(zT)|``, ``"input"`` uses ``|x - decode(zT)|``.
    """
    if anchor not in ("reconstruction", "input"):
        raise ConfigError(f"unknown attribution anchor {anchor!r}")
    x = np.asarray(volume.voxels if hasattr(volume, "voxels") else volume, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionError(f"expected [S, H, W], got {x.shape}")
    shape = x.shape
    classifier.eval()

    def log_odds_at(z, need_grad):
        zt = Tensor(z, requires_grad=need_grad)
        dec = ae.decode(zt)
        m = classifier.lesion_log_odds(dec.reshape(1, *shape))
        if need_grad:
            m.sum().backward()
            return float(m.data[0]), zt.grad.astype(np.float64), dec.data[:, 0]
        return float(m.data[0]), None, dec.data[:, 0]

    with _frozen(classifier, ae):
        with no_grad():
            z0 = ae.encode(Tensor(x[:, None])).data
        z = z0.copy()
        margin, grad_m, x0 = log_odds_at(z, True)
        p = _sigmoid(margin)
        initial_p = p
        trace = [p]
        steps = 0
        lam = None
        current = x0
        while p >= target_p and steps < max_steps:
            grad = p * (1.0 - p) * grad_m
            gnorm = float(np.sqrt((grad ** 2).sum()))
            if gnorm < 1e-12:
                raise SaturationError(f"gradient norm {gnorm:.3g} at p={p:.6g}")
            if lam is None:
                lam = step_fraction * float(np.sqrt((z0.astype(np.float64) ** 2).sum())) / gnorm
            trial = (z - lam * grad).astype(np.float32)
            t_margin, t_grad, t_dec = log_odds_at(trial, True)
            t_p = _sigmoid(t_margin)
            steps += 1
            if t_p < p:
                z, p, grad_m, current = trial, t_p, t_grad, t_dec
                lam *= 2.0
            else:
                lam *= 0.5
            trace.append(p)
    converged = p < target_p
    if not converged:
        warnings.warn(ConvergenceWarning(
            f"counterfactual stopped after {steps} steps at p={p:.4g}", best_p=p), stacklevel=2)
    ref = x0 if anchor == "reconstruction" else x
    return CounterfactualResult(current, AttributionMap.from_difference(ref, current),
                                initial_p, p, steps, converged, trace)


# --------------------------------------------------------------- hit score
@dataclass(frozen=True)
class HitScore:
    score: float
    hits: int
    misses: int
    excluded: int


def scored_location(label):
    """The single scored (region, side) of a label, or None if it is not scoreable."""
    if len(label.locations) != 1:
        return None
    (region, side), = label.locations
    return (region, side) if region in SCORED_REGIONS else None


def hit_score(attributions, labels, atlas):
    """Share of scans whose peak attribution voxel lies in the labeled region mask."""
    hits = misses = excluded = 0
    for att, lab in zip(attributions, labels, strict=True):
        loc = scored_location(lab)
        if loc is None:
            excluded += 1
            continue
        values = att.values if isinstance(att, AttributionMap) else np.asarray(att)
        if values.shape != atlas.shape:
            raise DimensionError(f"attribution shape {values.shape} != atlas {atlas.shape}")
        peak = np.unravel_index(int(np.argmax(values)), values.shape)
        if atlas.mask(*loc)[peak]:
            hits += 1
        else:
            misses += 1
    total = hits + misses
    return HitScore(hits / total if total else float("nan"), hits, misses, excluded)


# ------------------------------------------------------------------ output
def write_pgm(path, image, vmax=None):
    """Binary 8-bit PGM of a 2-D array scaled to ``[0, vmax]``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError("PGM renders 2-D arrays")
    top = float(img.max()) if vmax is None else float(vmax)
    scaled = np.zeros(img.shape) if top <= 0 else np.clip(img / top, 0.0, 1.0)
    pix = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return path


def write_attribution(directory, scan_id, result):
    """HBV1 attribution volume plus one PGM per slice (shared scale)."""
    directory = Path(directory)
    values = result.attribution.values
    write_volume(directory / f"{scan_id}.hbv", values)
    vmax = float(values.max())
    for k, sl in enumerate(values):
        write_pgm(directory / f"{scan_id}_s{k:02d}.pgm", sl, vmax)


def summary_json(records):
    return json.dumps(records, indent=1, sort_keys=True) + "\n"
