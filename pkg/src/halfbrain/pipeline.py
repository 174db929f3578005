"""Volume standardization, half-brain splitting, patient-grouped splits and file I/O.

Volumes are ``float32`` arrays shaped ``[slices, height, width]``. Column index
grows from the left hemisphere (columns ``[0, W/2)``) to the right one
(``[W/2, W)``); rows run anterior to posterior; slice 0 is the most inferior.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DependencyError, DimensionError, NumericError

REGIONS = ("MCA", "ACA", "PCA", "lacunar", "border_zone", "cerebellar", "brainstem")
SIDES = ("left", "right")
SIDE_LABELS = ("left", "right", "both", "none")
FOUR_CLASSES = ("none", "left", "right", "both")
BACKGROUNDS = ("atrophy", "leukoaraiosis", "old_stroke", "non_stroke_lesion")
TIMEPOINTS = ("baseline", "followup")

DEFAULT_SHAPE = (11, 64, 64)
DEFAULT_WINDOW = (0.0, 80.0)


@dataclass
class Volume:
    voxels: np.ndarray
    patient_id: str = ""
    scan_id: str = ""
    timepoint: str = "baseline"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DimensionError(f"volume must be [S,H,W], got shape {self.voxels.shape}")
        s, h, w = self.voxels.shape
        if s < 1 or h < 16 or w < 16:
            raise DimensionError(f"volume shape {self.voxels.shape} below minimum [1,16,16]")
        if not np.isfinite(self.voxels).all():
            raise NumericError(f"non-finite voxels in scan {self.scan_id!r}")
        if self.timepoint not in TIMEPOINTS:
            raise ConfigError(f"unknown timepoint {self.timepoint!r}")

    @property
    def shape(self):
        return self.voxels.shape

    def replace(self, voxels):
        return Volume(voxels, self.patient_id, self.scan_id, self.timepoint)


def side_of(locations):
    sides = {side for _, side in locations}
    if not sides:
        return "none"
    if sides == {"left", "right"}:
        return "both"
    return sides.pop()


@dataclass(frozen=True)
class ScanLabel:
    presence: bool = False
    side: str = "none"
    locations: frozenset = field(default_factory=frozenset)
    size_grade: int = 0
    background: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "locations", frozenset(tuple(x) for x in self.locations))
        object.__setattr__(self, "background", frozenset(self.background))
        if self.side not in SIDE_LABELS:
            raise ConfigError(f"unknown side {self.side!r}")
        for region, side in self.locations:
            if region not in REGIONS or side not in SIDES:
                raise ConfigError(f"unknown location ({region!r}, {side!r})")
        for cond in self.background:
            if cond not in BACKGROUNDS:
                raise ConfigError(f"unknown background condition {cond!r}")
        if not (self.presence == (self.side != "none") == bool(self.locations)):
            raise ConfigError("presence, side and locations disagree")
        if self.locations and side_of(self.locations) != self.side:
            raise ConfigError(f"side {self.side!r} inconsistent with locations")
        if self.size_grade not in (0, 1, 2, 3, 4):
            raise ConfigError(f"size grade {self.size_grade} outside 0..4")
        if (self.size_grade == 0) != (not self.presence):
            raise ConfigError("size grade 0 must coincide with absent lesion")

    @classmethod
    def negative(cls, background=()):
        return cls(False, "none", frozenset(), 0, frozenset(background))

    @classmethod
    def from_locations(cls, locations, size_grade, background=()):
        locations = frozenset(tuple(x) for x in locations)
        if not locations:
            return cls.negative(background)
        return cls(True, side_of(locations), locations, size_grade, frozenset(background))

    @property
    def four_class(self):
        return self.side if self.presence else "none"

    @property
    def regions(self):
        return frozenset(region for region, _ in self.locations)

    def half_present(self, side):
        return any(s == side for _, s in self.locations)

    def mirrored(self):
        swap = {"left": "right", "right": "left"}
        locs = frozenset((r, swap[s]) for r, s in self.locations)
        return ScanLabel.from_locations(locs, self.size_grade, self.background)

    def to_dict(self):
        return {
            "presence": self.presence,
            "side": self.side,
            "locations": sorted([list(x) for x in self.locations]),
            "size_grade": self.size_grade,
            "background": sorted(self.background),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(bool(d["presence"]), d["side"],
                   frozenset(tuple(x) for x in d["locations"]),
                   int(d["size_grade"]), frozenset(d["background"]))


@dataclass
class HalfPair:
    """Both hemispheres in canonical orientation: column 0 is the midline."""

    left: np.ndarray
    right: np.ndarray

    def swapped(self):
        return HalfPair(self.right, self.left)


# --------------------------------------------------------------- operations
def slice_indices(n_slices, target=11):
    """``round(k (S-1) / (target-1))`` with halves rounded away from zero."""
    if n_slices < 1 or target < 1:
        raise ConfigError("slice counts must be positive")
    if target == 1:
        return np.zeros(1, dtype=np.int64)
    k = np.arange(target, dtype=np.int64)
    num = k * (n_slices - 1)
    den = target - 1
    # exact integer form of floor(num/den + 1/2) for non-negative operands
    return (2 * num + den) // (2 * den)


def sample_slices(v, target=11):
    idx = slice_indices(v.shape[0], target)
    return v.replace(v.voxels[idx])


def normalize(v, window=DEFAULT_WINDOW):
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ConfigError(f"intensity window [{lo}, {hi}] must satisfy lo < hi")
    vox = (np.clip(v.voxels, lo, hi) - lo) / (hi - lo)
    return v.replace(vox.astype(np.float32))


def resize_inplane(v, height, width):
    if v.shape[1:] == (height, width):
        return v
    from scipy.ndimage import zoom

    s, h, w = v.shape
    out = zoom(v.voxels, (1.0, height / h, width / w), order=1, mode="nearest", grid_mode=True)
    return v.replace(out[:, :height, :width])


def standardize(v, shape=DEFAULT_SHAPE, window=DEFAULT_WINDOW):
    """Slice sampling, in-plane resampling and intensity normalization."""
    s, h, w = shape
    if w % 2:
        raise DimensionError("standard width must be even")
    return normalize(resize_inplane(sample_slices(v, s), h, w), window)


def mirror(voxels):
    """Reflect about the sagittal midline (last axis)."""
    return np.ascontiguousarray(np.flip(np.asarray(voxels), axis=-1))


def split_midline(v):
    """Split a volume (or a stack ``[..., S, H, W]``) into canonical halves."""
    vox = v.voxels if isinstance(v, Volume) else np.asarray(v)
    w = vox.shape[-1]
    if w % 2:
        raise DimensionError(f"width {w} is odd; cannot split at the midline")
    half = w // 2
    left = np.ascontiguousarray(vox[..., :half][..., ::-1])
    right = np.ascontiguousarray(vox[..., half:])
    return HalfPair(left, right)


def unsplit(pair):
    return np.concatenate([pair.left[..., ::-1], pair.right], axis=-1)


def _patient_of(item):
    if hasattr(item, "patient_id"):
        return item.patient_id
    if isinstance(item, dict):
        return item["patient_id"]
    return item[0].patient_id


def patient_split(scans, ratios=(0.7, 0.15, 0.15), seed=0, key=_patient_of):
    """Partition scans into train/val/test so that each patient lands in one split.

    Patients are shuffled with ``seed``; the first three go one to each split,
    the rest are assigned greedily to whichever split is furthest below its
    target scan count.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios < 0).any() or not np.isclose(ratios.sum(), 1.0):
        raise ConfigError("ratios must be three non-negative numbers summing to 1")
    by_patient = {}
    for i, item in enumerate(scans):
        pid = key(item)
        if pid is None or pid == "":
            raise ConfigError(f"scan {i} has no patient id")
        by_patient.setdefault(pid, []).append(i)
    patients = list(by_patient)
    if len(patients) < 3:
        raise ConfigError(f"need at least 3 patients, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    total = len(scans)
    counts = np.zeros(3)
    assigned = ([], [], [])
    for rank, pi in enumerate(order):
        pid = patients[pi]
        if rank < 3:
            slot = rank
        else:
            slot = int(np.argmax(ratios * total - counts))
        assigned[slot].append(pid)
        counts[slot] += len(by_patient[pid])
    out = {}
    for name, pids in zip(("train", "val", "test"), assigned):
        idx = sorted(i for pid in pids for i in by_patient[pid])
        out[name] = [scans[i] for i in idx]
    return out


# ---------------------------------------------------------------------- I/O
VOLUME_MAGIC = b"HBV1"


def write_volume(path, voxels):
    """HBV1: magic, u32 S, u32 H, u32 W, then little-endian f32 voxels."""
    arr = np.ascontiguousarray(voxels, dtype="<f4")
    if arr.ndim != 3:
        raise DimensionError("HBV1 stores 3-d volumes only")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes())
    return path


def read_volume(path):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing volume file {path}")
    data = path.read_bytes()
    if data[:4] != VOLUME_MAGIC:
        raise ConfigError(f"{path} is not an HBV1 volume")
    dims = struct.unpack("<3I", data[4:16])
    count = int(np.prod(dims))
    if len(data) != 16 + 4 * count:
        raise DimensionError(f"{path}: payload does not match dims {dims}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(dims).astype(np.float32)


def write_manifest(path, entries):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing manifest {path}")
    return json.loads(path.read_text())


def manifest_entry(volume, label, file):
    return {
        "scan_id": volume.scan_id,
        "patient_id": volume.patient_id,
        "timepoint": volume.timepoint,
        "file": str(file),
        "label": label.to_dict(),
    }


def load_dataset(manifest_path):
    """Read a manifest and its volumes; file paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    out = []
    for e in read_manifest(manifest_path):
        vox = read_volume(root / e["file"])
        vol = Volume(vox, e["patient_id"], e["scan_id"], e["timepoint"])
        out.append((vol, ScanLabel.from_dict(e["label"])))
    return out
