import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adcds import kernels
from adcds.core import DefectClass, ProcessStep
from adcds.errors import ParameterError, PlacementError
from adcds.synthgen import (DEFAULT_CLASS_MIX, DefectSpec, GenConfig,
                            allocate_quota, generate_dataset, generate_sample,
                            inject_defect, measure_snr, new_sample,
                            plan_dataset, render_pattern)

from conftest import flat_spec, sample_with


def test_render_line_count_and_mask_area():
    img, mask = render_pattern(flat_spec(), 256, 200)
    assert mask.area == 8 * 16 * 200
    cols = mask.to_array().any(axis=0)
    starts = np.flatnonzero(np.diff(np.r_[0, cols.astype(int)]) == 1)
    assert starts.size == 8
    assert img.width == 256 and img.height == 200


def test_noiseless_is_two_valued():
    img, mask = render_pattern(flat_spec(), 256, 256)
    assert set(np.unique(img.pixels).tolist()) == {90, 150}
    np.testing.assert_array_equal(img.pixels == 150, mask.to_array())


def test_horizontal_orientation_transposes():
    img, mask = render_pattern(flat_spec(orientation="horizontal"), 256, 256)
    assert mask.to_array()[:, 0].sum() == 8 * 16


def test_same_seed_identical():
    spec = flat_spec(edge_roughness_sigma=0.5, noise_sigma=10.0, seed=9)
    a, _ = render_pattern(spec, 128, 128)
    b, _ = render_pattern(spec, 128, 128)
    np.testing.assert_array_equal(a.pixels, b.pixels)


@pytest.mark.parametrize("kw", [dict(line_width=0), dict(line_width=32),
                                dict(line_intensity=90),
                                dict(pitch=100)])
def test_invalid_spec(kw):
    with pytest.raises(ParameterError):
        render_pattern(flat_spec(**kw), 256, 256)


def test_gap_geometry():
    s = sample_with("adi", "gap", extent=12)
    t = s.truth[0]
    assert t.mask.area == 12 * 16
    assert t.bbox.height == 12 and t.bbox.width == 16
    assert (s.image.pixels[t.mask.to_array()] == 90).all()


def test_probable_gap_midpoint():
    s = sample_with("adi", "probable_gap", extent=8, severity=0.5)
    px = s.image.pixels[s.truth[0].mask.to_array()]
    assert (px == 120).all()


def test_bridge_connects_flanking_lines():
    before = new_sample(flat_spec(), 256, 256, "adi")
    s = inject_defect(before, DefectSpec(DefectClass("adi", "bridge"),
                                         (3, 100), 4))
    lines = s.image.pixels == 150
    labels, _ = kernels.label4(lines)
    left_col = int(s.left[50, 3] + s.right[50, 3]) // 2
    right_col = int(s.left[50, 4] + s.right[50, 4]) // 2
    assert labels[50, left_col] == labels[50, right_col] != 0
    # and were separate before
    l0, _ = kernels.label4(before.image.pixels == 150)
    assert l0[50, left_col] != l0[50, right_col]


def test_thin_bridge_is_one_row():
    s = sample_with("aei", "thin_bridge", extent=5)
    assert s.truth[0].bbox.height == 1


def test_microbridge_partial():
    s = sample_with("adi", "microbridge", extent=2, severity=0.5)
    t = s.truth[0]
    assert t.bbox.height <= 2 and 0 < t.bbox.width < 16


def test_multi_bridges():
    h = sample_with("aei", "multi_bridge_h", extent=3, span=2).truth[0]
    nh = sample_with("aei", "multi_bridge_nh", extent=3, span=2).truth[0]
    assert h.bbox.height == 3 and h.bbox.width > 32
    assert nh.bbox.height == 3 * 3 and nh.bbox.width > 32


def test_line_collapse_merges():
    s = sample_with("adi", "line_collapse", extent=40)
    m = s.truth[0].mask.to_array()
    # somewhere in the middle the whole space is filled
    assert (m.sum(axis=1) == 16).any()


def test_overlap_rejected():
    s = sample_with("adi", "gap", extent=10)
    with pytest.raises(PlacementError):
        inject_defect(s, DefectSpec(DefectClass("adi", "gap"), (3, 105), 10))


def test_out_of_bounds_rejected():
    s = new_sample(flat_spec(), 256, 256, "adi")
    with pytest.raises((PlacementError, ParameterError)):
        inject_defect(s, DefectSpec(DefectClass("adi", "gap"), (3, 250), 12))


def test_step_mismatch_rejected():
    s = new_sample(flat_spec(), 256, 256, "adi")
    with pytest.raises(ParameterError):
        inject_defect(s, DefectSpec(DefectClass("aei", "thin_bridge"),
                                    (3, 10), 1))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["adi", "aei"]))
def test_truth_tight_and_disjoint(seed, step):
    cfg = GenConfig(step, 1, seed, size=(256, 256),
                    count_range=(4, 8), p_empty=0.0).resolved()
    s = generate_sample(cfg.step, plan_dataset(cfg)[0], cfg.pattern,
                        cfg.size, seed, 0, "x")
    union = np.zeros((256, 256), dtype=np.int32)
    for t in s.truth:
        m = t.mask.to_array()
        assert m.any()
        assert t.mask.bbox() == t.bbox
        b = t.bbox
        # shrinking any side drops a mask pixel
        assert m[b.y_min, :].any() and m[b.y_max - 1, :].any()
        assert m[:, b.x_min].any() and m[:, b.x_max - 1].any()
        union += m
    assert union.max() <= 1


def test_snr_decreases_with_noise():
    snrs = []
    for sigma in (2.0, 5.0, 10.0, 20.0):
        spec = flat_spec(noise_sigma=sigma, seed=3)
        s = new_sample(spec, 256, 256, "adi", rng=np.random.default_rng(3))
        snrs.append(measure_snr(s))
    assert all(a > b for a, b in zip(snrs, snrs[1:]))


def test_quota_allocation_exact():
    q = allocate_quota(DEFAULT_CLASS_MIX[ProcessStep.ADI], 2529)
    assert q == {"gap": 1046, "probable_gap": 315, "bridge": 238,
                 "microbridge": 380, "line_collapse": 550}


def test_adi_plan_proportional_to_class_mix():
    cfg = GenConfig("adi", 1054, 0).resolved()
    plan = plan_dataset(cfg)
    assert len(plan) == 1054
    counts = {}
    for names in plan:
        for n in names:
            counts[n] = counts.get(n, 0) + 1
    total = sum(counts.values())
    mix = DEFAULT_CLASS_MIX[ProcessStep.ADI]
    for name, w in mix.items():
        want = total * w / sum(mix.values())
        assert abs(counts[name] - want) <= 0.10 * want
    assert all(len(x) <= 40 for x in plan)


def test_aei_validation_shape():
    m = generate_dataset("aei", 131, seed=5)
    assert len(m.images) == 131
    assert 124 <= len(m.annotations) <= 131
    assert max(len(v) for v in m.by_image().values()) <= 1


def test_realized_counts_match_plan():
    cfg = GenConfig("adi", 3, 2, size=(512, 512)).resolved()
    plan = plan_dataset(cfg)
    m = generate_dataset("adi", 3, seed=2, size=(512, 512))
    assert len(m.annotations) == sum(len(p) for p in plan)


def test_zero_images(tmp_path):
    m = generate_dataset("adi", 0, out_dir=tmp_path / "d")
    assert len(m.images) == 0 and len(m.annotations) == 0
    assert list((tmp_path / "d" / "images").iterdir()) == []


def test_dataset_deterministic(tmp_path):
    a = generate_dataset("aei", 4, seed=1, out_dir=tmp_path / "a")
    b = generate_dataset("aei", 4, seed=1, out_dir=tmp_path / "b")
    assert a == b
    for rec in a.images:
        assert (tmp_path / "a" / rec.file_name).read_bytes() == \
            (tmp_path / "b" / rec.file_name).read_bytes()


def test_weights_validated():
    with pytest.raises(ParameterError):
        allocate_quota({"gap": 0.0}, 5)
