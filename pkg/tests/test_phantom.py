import numpy as np
import pytest

from halfbrain import phantom as Ph
from halfbrain.pipeline import REGIONS, mirror
from halfbrain.errors import ConfigError


@pytest.fixture(scope="module")
def atlas():
    return Ph.build_atlas((11, 64, 64))


class TestAtlas:
    def test_left_right_mirror(self, atlas):
        for r in REGIONS:
            assert np.array_equal(atlas.mask(r, "left"), mirror(atlas.mask(r, "right")))

    def test_disjoint(self, atlas):
        total = sum(atlas.mask(r, "left").astype(int) for r in REGIONS)
        assert total.max() == 1

    def test_min_volume(self, atlas):
        for r in REGIONS:
            assert atlas.half_mask(r).sum() >= 20, r

    def test_infratentorial_layout(self, atlas):
        for r in ("cerebellar", "brainstem"):
            z = np.nonzero(atlas.half_mask(r))[0]
            assert z.max() < Ph.INFRA_SLICES

    def test_region_at(self, atlas):
        idx = np.argwhere(atlas.mask("PCA", "right"))[0]
        assert atlas.region_at(tuple(idx)) == ("PCA", "right")

    def test_too_small(self):
        with pytest.raises(ConfigError):
            Ph.build_atlas((11, 16, 16))


def test_negative_only():
    scans = Ph.generate(Ph.PhantomConfig(n_scans=12, negative_fraction=1.0))
    assert all(not lab.presence and lab.size_grade == 0 for _, lab in scans)


def test_left_mca_grade4_containment(atlas):
    cfg = Ph.PhantomConfig(n_scans=10, negative_fraction=0.0, left_fraction=1.0,
                           region_weights={"MCA": 1.0}, multi_lesion_prob=0.0,
                           both_sides_prob=0.0, size_grade_probs=(0, 0, 0, 1), seed=4)
    mask = atlas.mask("MCA", "left")
    for s in Ph.generate_detailed(cfg):
        assert s.label.locations == {("MCA", "left")} and s.label.size_grade == 4
        assert s.label.side == "left"
        inside = s.lesion_map[mask].sum() / s.lesion_map.sum()
        assert inside >= 0.95


def test_deterministic():
    cfg = Ph.PhantomConfig(n_scans=8, seed=5)
    a, b = Ph.generate(cfg), Ph.generate(cfg)
    for (va, la), (vb, lb) in zip(a, b):
        assert np.array_equal(va.voxels, vb.voxels) and la == lb and va.scan_id == vb.scan_id


def test_lesion_signal_exists(atlas):
    cfg = Ph.PhantomConfig(n_scans=40, seed=2, negative_fraction=0.0, both_sides_prob=0.0,
                           background_probs={})
    for s in Ph.generate_detailed(cfg):
        delta = cfg.baseline_delta if s.volume.timepoint == "baseline" else cfg.followup_delta
        core = s.lesion_map >= 0.999
        if core.sum() == 0:
            continue
        contra = mirror(core)
        gap = s.volume.voxels[contra].mean() - s.volume.voxels[core].mean()
        assert gap >= abs(delta) / 2


def test_side_swap_mirrors():
    cfg = Ph.PhantomConfig(n_scans=6, seed=9)
    swapped = Ph.PhantomConfig(n_scans=6, seed=9, side_swap=True)
    for (va, la), (vb, lb) in zip(Ph.generate(cfg), Ph.generate(swapped)):
        assert np.array_equal(mirror(va.voxels), vb.voxels)
        assert la.mirrored() == lb


def test_contrast_scale_changes_only_lesions():
    a = Ph.generate_detailed(Ph.PhantomConfig(n_scans=6, seed=3))
    b = Ph.generate_detailed(Ph.PhantomConfig(n_scans=6, seed=3, contrast_scale=2.0))
    for sa, sb in zip(a, b):
        diff = sb.volume.voxels.astype(np.float64) - sa.volume.voxels
        assert np.allclose(diff[sa.lesion_map == 0], 0.0)
        assert sa.label == sb.label


def test_config_validation():
    with pytest.raises(ConfigError):
        Ph.PhantomConfig(followup_delta=-3.0, baseline_delta=-6.0)
    with pytest.raises(ConfigError):
        Ph.PhantomConfig(region_weights={"nowhere": 1.0})
    with pytest.raises(ConfigError):
        Ph.PhantomConfig.from_dict({"n_scans": 3, "bogus": 1})
