"""Synthetic brain-like CT phantoms with exact region masks and graded lesions.

Geometry is built once for a canonical hemisphere (column 0 on the midline,
rows anterior to posterior, slice 0 inferior) and mirrored onto both sides, so
left and right region masks are exact reflections of each other.

Intensities loosely follow a brain window: parenchyma around 30, CSF around 6,
skull well above the window. Acute lesions are hypodense and soft-edged, old
infarcts are CSF-dark with sharp edges, non-stroke lesions are hyperdense.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .pipeline import (
    BACKGROUNDS,
    DEFAULT_SHAPE,
    REGIONS,
    ScanLabel,
    Volume,
    mirror,
)

TISSUE = 30.0
CORTEX_BOOST = 4.0
CSF = 6.0
SKULL = 95.0
OLD_STROKE_LEVEL = 5.0
NON_STROKE_DELTA = 18.0
LEUKO_DELTA = -4.0
INFRA_SLICES = 3

# (row, lateral distance) in units of the volume height
_SEEDS = {"ACA": (0.17, 0.07), "MCA": (0.48, 0.30), "PCA": (0.84, 0.10)}
_BORDER_PAIRS = ({"ACA", "MCA"}, {"MCA", "PCA"})
_BORDER_WIDTH = 0.035
_BRAIN_AXES = (0.44, 0.40)
_VENTRICLE = (0.5, 0.0, 0.14, 0.07)   # centre row/col, semi-axes at maximal atrophy
_LACUNAR = (0.50, 0.14, 0.045)
_BRAINSTEM = (0.55, 0.0, 0.08)
_CEREBELLUM = (0.74, 0.17, 0.13, 0.15)


class RegionAtlas:
    """Per-hemisphere region masks for one volume shape."""

    def __init__(self, shape, labels_half, brain_half):
        self.shape = tuple(shape)
        self.labels_half = labels_half      # int8 [S, H, W/2]; 0 = no region
        self.brain_half = brain_half        # bool [S, H, W/2]

    def half_mask(self, region):
        return self.labels_half == REGIONS.index(region) + 1

    def mask(self, region, side):
        """Full-volume boolean mask of ``region`` on hemisphere ``side``."""
        return place_half(self.half_mask(region), side, self.shape[2])

    def brain_mask(self):
        full = place_half(self.brain_half, "left", self.shape[2])
        full |= place_half(self.brain_half, "right", self.shape[2])
        return full

    @property
    def masks(self):
        return {(r, s): self.mask(r, s) for r in REGIONS for s in ("left", "right")}

    def region_at(self, index):
        """(region, side) containing flat/tuple voxel ``index``, or None."""
        z, y, x = np.unravel_index(index, self.shape) if np.isscalar(index) else index
        half = self.shape[2] // 2
        side, d = ("left", half - 1 - x) if x < half else ("right", x - half)
        lab = int(self.labels_half[z, y, d])
        return (REGIONS[lab - 1], side) if lab else None


def place_half(half, side, width):
    """Embed a canonical-half array into a zero full-width array on ``side``."""
    s, h, hw = half.shape
    full = np.zeros((s, h, width), dtype=half.dtype)
    if side == "left":
        full[:, :, :hw] = half[:, :, ::-1]
    else:
        full[:, :, width - hw:] = half
    return full


def _half_grid(shape):
    s, h, w = shape
    z = np.arange(s)[:, None, None]
    y = ((np.arange(h) + 0.5) / h)[None, :, None]
    x = ((np.arange(w // 2) + 0.5) / h)[None, None, :]
    return z, y, x


def build_atlas(shape=DEFAULT_SHAPE):
    s, h, w = shape
    if h < 32 or w < 32:
        raise ConfigError(f"in-plane shape {h}x{w} too small for the atlas (needs 32x32)")
    if s < INFRA_SLICES + 3:
        raise ConfigError(f"{s} slices cannot host infratentorial and supratentorial regions")
    if w % 2:
        raise ConfigError("atlas width must be even")
    z, y, x = _half_grid(shape)
    full = np.ones((s, 1, 1), dtype=bool)
    supra = full & (z >= INFRA_SLICES)
    infra = full & (z < INFRA_SLICES)

    brain_supra = supra & (((y - 0.5) / _BRAIN_AXES[0]) ** 2 + (x / _BRAIN_AXES[1]) ** 2 <= 1.0)
    vy, vx, vay, vax = _VENTRICLE
    ventricle = ((y - vy) / vay) ** 2 + ((x - vx) / vax) ** 2 <= 1.0
    stem = ((y - _BRAINSTEM[0]) ** 2 + (x - _BRAINSTEM[1]) ** 2 <= _BRAINSTEM[2] ** 2) & infra
    cy, cx, cay, cax = _CEREBELLUM
    cereb = (((y - cy) / cay) ** 2 + ((x - cx) / cax) ** 2 <= 1.0) & infra & ~stem

    labels = np.zeros((s, h, w // 2), dtype=np.int8)
    tissue = brain_supra & ~ventricle
    dists = {k: np.sqrt((y - sy) ** 2 + (x - sx) ** 2) for k, (sy, sx) in _SEEDS.items()}
    names = list(dists)
    stack = np.stack([np.broadcast_to(dists[k], (1, h, w // 2))[0] for k in names])
    order = np.argsort(stack, axis=0, kind="stable")
    nearest = order[0]
    second = order[1]
    gap = np.take_along_axis(stack, order[1:2], 0)[0] - np.take_along_axis(stack, order[:1], 0)[0]
    border2d = np.zeros((h, w // 2), dtype=bool)
    for a, b in _BORDER_PAIRS:
        ia, ib = names.index(a), names.index(b)
        pair = ((nearest == ia) & (second == ib)) | ((nearest == ib) & (second == ia))
        border2d |= pair & (gap < _BORDER_WIDTH)
    for k, name in enumerate(names):
        labels[tissue & (nearest == k)[None] & ~border2d[None]] = REGIONS.index(name) + 1
    labels[tissue & border2d[None]] = REGIONS.index("border_zone") + 1

    n_supra = s - INFRA_SLICES
    mid = INFRA_SLICES + n_supra // 2
    lac_slices = (z >= mid - 1) & (z <= mid + 1)
    lac = lac_slices & ((y - _LACUNAR[0]) ** 2 + (x - _LACUNAR[1]) ** 2 <= _LACUNAR[2] ** 2) & tissue
    labels[lac] = REGIONS.index("lacunar") + 1
    labels[cereb] = REGIONS.index("cerebellar") + 1
    labels[stem] = REGIONS.index("brainstem") + 1

    brain = brain_supra | stem | cereb
    atlas = RegionAtlas(shape, labels, brain)
    for region in REGIONS:
        if not atlas.half_mask(region).any():
            raise ConfigError(f"shape {shape} leaves region {region} empty")
    return atlas


# ------------------------------------------------------------------- config
@dataclass
class PhantomConfig:
    n_scans: int = 600
    shape: tuple = DEFAULT_SHAPE
    negative_fraction: float = 0.5
    left_fraction: float = 0.5
    region_weights: dict = field(default_factory=lambda: {
        "MCA": 0.62, "ACA": 0.10, "PCA": 0.10, "lacunar": 0.06,
        "border_zone": 0.04, "cerebellar": 0.04, "brainstem": 0.04,
    })
    multi_lesion_prob: float = 0.1
    both_sides_prob: float = 0.02
    size_grade_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    size_radius_fraction: tuple = (0.04, 0.07, 0.12, 0.20)
    baseline_delta: float = -6.0
    followup_delta: float = -14.0
    contrast_scale: float = 1.0
    background_probs: dict = field(default_factory=lambda: {
        "atrophy": 0.25, "leukoaraiosis": 0.2, "old_stroke": 0.08, "non_stroke_lesion": 0.05,
    })
    followup_prob: float = 0.8
    noise_sigma: float = 3.0
    texture_sigma: float = 1.5
    side_swap: bool = False
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.size_grade_probs = tuple(float(v) for v in self.size_grade_probs)
        self.size_radius_fraction = tuple(float(v) for v in self.size_radius_fraction)
        probs = [self.negative_fraction, self.left_fraction, self.multi_lesion_prob,
                 self.both_sides_prob, self.followup_prob, *self.size_grade_probs,
                 *self.background_probs.values()]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("phantom probabilities must lie in [0, 1]")
        if len(self.size_grade_probs) != 4 or not np.isclose(sum(self.size_grade_probs), 1.0):
            raise ConfigError("size_grade_probs needs four entries summing to 1")
        if len(self.size_radius_fraction) != 4:
            raise ConfigError("size_radius_fraction needs four entries")
        if abs(self.followup_delta) < abs(self.baseline_delta):
            raise ConfigError("follow-up contrast must be at least the baseline contrast")
        for region, wgt in self.region_weights.items():
            if region not in REGIONS:
                raise ConfigError(f"region {region!r} is not in the atlas")
            if wgt < 0:
                raise ConfigError("region weights must be non-negative")
        if self.negative_fraction < 1 and sum(self.region_weights.values()) <= 0:
            raise ConfigError("positive scans requested but every region weight is zero")
        for cond in self.background_probs:
            if cond not in BACKGROUNDS:
                raise ConfigError(f"unknown background condition {cond!r}")
        if self.n_scans < 0 or self.noise_sigma < 0:
            raise ConfigError("n_scans and noise_sigma must be non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["size_grade_probs"] = list(self.size_grade_probs)
        d["size_radius_fraction"] = list(self.size_radius_fraction)
        return d


@dataclass
class PhantomScan:
    volume: Volume
    label: ScanLabel
    lesion_map: np.ndarray      # acute-lesion weight in [0, 1], full volume


# --------------------------------------------------------------- generation
def _taper(d, plateau=0.7):
    w = np.zeros_like(d)
    w[d <= plateau] = 1.0
    ramp = (d > plateau) & (d < 1.0)
    w[ramp] = 0.5 * (1.0 + np.cos(np.pi * (d[ramp] - plateau) / (1.0 - plateau)))
    return w


def _blob_half(region_half, rng, radius_px, shape, sharp=False):
    """Lesion weight on the canonical half, confined to ``region_half``."""
    s, h, hw = region_half.shape
    depth = np.stack([ndimage.distance_transform_edt(sl) if sl.any() else np.zeros(sl.shape)
                      for sl in region_half])
    want = min(radius_px * 0.5, depth.max())
    candidates = np.argwhere(depth >= want)
    cz, cy, cx = candidates[rng.integers(len(candidates))]
    rz = radius_px  # isotropic in voxel units
    z = np.arange(s)[:, None, None]
    yy = np.arange(h)[None, :, None]
    xx = np.arange(hw)[None, None, :]
    d = np.sqrt(((yy - cy) / radius_px) ** 2 + ((xx - cx) / radius_px) ** 2 + ((z - cz) / rz) ** 2)
    w = (d <= 1.0).astype(np.float64) if sharp else _taper(d)
    return w * region_half


def _smooth_field(rng, shape, sigma_px, amplitude):
    if amplitude == 0:
        rng.standard_normal(shape)
        return np.zeros(shape)
    f = ndimage.gaussian_filter(rng.standard_normal(shape), (0.8, sigma_px, sigma_px))
    f /= f.std() + 1e-12
    return amplitude * f


def _pick(rng, options, weights):
    w = np.asarray(weights, dtype=np.float64)
    return options[int(rng.choice(len(options), p=w / w.sum()))]


def _patient_plan(cfg, rng):
    """Draw every patient-level random choice in a fixed order."""
    regions = [r for r in REGIONS if cfg.region_weights.get(r, 0) > 0]
    weights = [cfg.region_weights[r] for r in regions]
    negative = rng.random() < cfg.negative_fraction
    side_draw = rng.random()
    both = rng.random() < cfg.both_sides_prob
    multi = rng.random() < cfg.multi_lesion_prob
    grade = 1 + int(rng.choice(4, p=np.asarray(cfg.size_grade_probs) / sum(cfg.size_grade_probs)))
    first = _pick(rng, regions, weights) if regions else None
    second_pick = rng.random()
    bg = {c: rng.random() < cfg.background_probs.get(c, 0.0) for c in BACKGROUNDS}
    lesions = []
    if not negative and regions:
        side = "left" if side_draw < cfg.left_fraction else "right"
        lesions.append((first, side))
        if both:
            other = "right" if side == "left" else "left"
            lesions.append((_pick(rng, regions, weights), other))
        elif multi and len(regions) > 1:
            rest = [r for r in regions if r != first]
            rw = [cfg.region_weights[r] for r in rest]
            # weighted pick from a pre-drawn uniform keeps the draw count fixed
            cum = np.cumsum(rw) / np.sum(rw)
            idx = int(np.searchsorted(cum, second_pick, side="right"))
            lesions.append((rest[min(idx, len(rest) - 1)], side))
        grade_used = grade
    else:
        grade_used = 0
    return lesions, grade_used, bg


def _patient_scans(cfg, atlas, pindex, rng):
    s, h, w = cfg.shape
    lesions, grade, bg = _patient_plan(cfg, rng)
    brain_half = atlas.brain_half
    brain = atlas.brain_mask()

    # anatomy shared by both timepoints
    base = np.zeros(cfg.shape)
    base[brain] = TISSUE
    inner = ndimage.binary_erosion(brain, structure=np.ones((1, 5, 5)))
    base[brain & ~inner] += CORTEX_BOOST
    shell = ndimage.binary_dilation(brain, structure=np.ones((1, 5, 5))) & ~brain
    base[shell] = SKULL

    z, y, x = _half_grid(cfg.shape)
    scale = 0.55 + (0.45 if bg["atrophy"] else 0.0) + 0.1 * rng.random()
    vy, vx, vay, vax = _VENTRICLE
    vent_half = (((y - vy) / (vay * scale)) ** 2 + ((x - vx) / (vax * scale)) ** 2 <= 1.0)
    vent_half = vent_half & (z >= INFRA_SLICES + 1) & brain_half
    vent = place_half(vent_half, "left", w) | place_half(vent_half, "right", w)
    base[vent] = CSF
    if bg["leukoaraiosis"]:
        ring = (((y - vy) / (vay * scale + 0.08)) ** 2 + ((x - vx) / (vax * scale + 0.08)) ** 2 <= 1.0)
        ring_half = (ring & brain_half & ~vent_half).astype(np.float64)
        ring_half = ndimage.gaussian_filter(ring_half, (0.5, 1.5, 1.5)) * brain_half
        base += LEUKO_DELTA * (place_half(ring_half, "left", w) + place_half(ring_half, "right", w))
    supra_regions = ["MCA", "ACA", "PCA"]
    if bg["old_stroke"]:
        region = supra_regions[int(rng.integers(3))]
        side = ("left", "right")[int(rng.integers(2))]
        radius = 0.08 * w
        blob = _blob_half(atlas.half_mask(region), rng, radius, cfg.shape, sharp=True)
        full = place_half(blob, side, w) > 0
        base[full] = OLD_STROKE_LEVEL
    if bg["non_stroke_lesion"]:
        side = ("left", "right")[int(rng.integers(2))]
        region = REGIONS[int(rng.integers(len(REGIONS)))]
        blob = _blob_half(atlas.half_mask(region), rng, 0.05 * w, cfg.shape)
        base += NON_STROKE_DELTA * place_half(blob, side, w)

    texture = _smooth_field(rng, cfg.shape, 3.0, cfg.texture_sigma) * brain

    lesion_map = np.zeros(cfg.shape)
    for region, side in lesions:
        radius = cfg.size_radius_fraction[grade - 1] * w
        blob = _blob_half(atlas.half_mask(region), rng, radius, cfg.shape)
        lesion_map = np.maximum(lesion_map, place_half(blob, side, w))

    label = ScanLabel.from_locations(lesions, grade,
                                     [c for c in BACKGROUNDS if bg[c]])
    has_followup = rng.random() < cfg.followup_prob
    timepoints = ["baseline", "followup"] if has_followup else ["baseline"]
    out = []
    for tp in timepoints:
        delta = cfg.baseline_delta if tp == "baseline" else cfg.followup_delta
        noise = rng.standard_normal(cfg.shape) * cfg.noise_sigma
        vox = base + texture + cfg.contrast_scale * delta * lesion_map + noise
        vox = vox.astype(np.float32)
        lab, lmap = label, lesion_map
        if cfg.side_swap:
            vox, lab, lmap = mirror(vox), label.mirrored(), mirror(lesion_map)
        pid = f"P{pindex:04d}"
        vol = Volume(vox, pid, f"{pid}_{tp[0]}", tp)
        out.append(PhantomScan(vol, lab, lmap.astype(np.float32)))
    return out


def generate_detailed(config):
    """Like :func:`generate` but keeps each scan's acute-lesion weight map."""
    atlas = build_atlas(config.shape)
    scans = []
    pindex = 0
    while len(scans) < config.n_scans:
        rng = np.random.default_rng([config.seed, pindex])
        scans.extend(_patient_scans(config, atlas, pindex, rng))
        pindex += 1
    return scans[:config.n_scans]


def generate(config):
    """Labelled phantom corpus as ``[(Volume, ScanLabel), ...]``; deterministic in ``config.seed``."""
    return [(s.volume, s.label) for s in generate_detailed(config)]
