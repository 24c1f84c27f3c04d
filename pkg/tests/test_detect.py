import numpy as np
import pytest

from adcds.core import BBox, DefectClass, DefectInstance, SemImage
from adcds.detect import (BACKENDS, Detection, DetectorConfig,
                          calibrate_confidence, default_calibration, detect,
                          detect_candidates, filter_by_confidence, rank_key,
                          register_backend, to_roi_seed)
from adcds.errors import ConfigError
from adcds.metrics import iou_box
from adcds.synthgen import DefectSpec, GenConfig, generate_sample, \
    inject_defect, new_sample, plan_dataset

from conftest import flat_spec, sample_with


def _det(conf, name="gap", x=0):
    return Detection(DefectInstance(DefectClass("adi", name),
                                    BBox(x, 0, x + 2, 2), None, conf), 1.0)


def test_clean_pattern_has_no_detections():
    s = new_sample(flat_spec(), 256, 256, "adi")
    assert detect(s.image, DetectorConfig.preset("adi")) == []


@pytest.mark.parametrize("step,name", [("adi", "bridge"),
                                       ("aei", "single_bridge")])
def test_single_bridge_found(step, name):
    s = sample_with(step, name, extent=5)
    d = detect(s.image, DetectorConfig.preset(step, confidence_floor=0.0))
    assert len(d) == 1
    assert d[0].defect_class.name == name
    assert iou_box(d[0].bbox, s.truth[0].bbox) >= 0.5


@pytest.mark.parametrize("step,name,kw", [
    ("adi", "gap", {}), ("adi", "probable_gap", {"severity": 0.7}),
    ("adi", "microbridge", {"extent": 2, "severity": 0.5}),
    ("adi", "line_collapse", {"extent": 40}),
    ("aei", "thin_bridge", {}), ("aei", "multi_bridge_h", {"span": 2}),
    ("aei", "multi_bridge_nh", {"span": 2, "extent": 3}),
    ("aei", "line_collapse", {"extent": 40}),
])
def test_rule_classes_on_clean_images(step, name, kw):
    kw = {"extent": 8, **kw}
    s = sample_with(step, name, **kw)
    d = detect(s.image, DetectorConfig.preset(step, confidence_floor=0.0))
    assert [x.defect_class.name for x in d] == [name]


def test_three_gaps_gate_by_brute_force():
    spec = flat_spec(noise_sigma=4.0, edge_roughness_sigma=0.3, seed=4)
    s = new_sample(spec, 256, 256, "adi", rng=np.random.default_rng(4))
    for k, (line, pos, ext) in enumerate([(1, 30, 12), (3, 120, 2),
                                          (5, 200, 6)]):
        s = inject_defect(s, DefectSpec(DefectClass("adi", "gap"),
                                        (line, pos), ext))
    cfg = DetectorConfig.preset("adi")
    cands = detect_candidates(s.image, cfg)
    assert len(cands) >= 3
    calib = cfg.calibration
    want = sum(min(1.0, c.anomaly_mass / calib) >= 0.7 for c in cands)
    assert len(detect(s.image, cfg)) == want


def test_filter_examples():
    dets = [_det(0.9), _det(0.71), _det(0.69)]
    assert filter_by_confidence(dets, 0.0) == dets
    assert filter_by_confidence(dets, 1.0) == []
    assert filter_by_confidence(dets, 0.7) == dets[:2]


def test_roi_seed_projection():
    assert to_roi_seed([]) == []
    d = _det(0.8)
    assert to_roi_seed([d]) == [(d.defect_class, d.bbox)]


def test_output_sorted_gated_truncated_deterministic():
    cfg = GenConfig("adi", 2, 3, size=(512, 512)).resolved()
    plan = plan_dataset(cfg)
    for i in range(2):
        s = generate_sample(cfg.step, plan[i], cfg.pattern, cfg.size, 3, i,
                            "x")
        for floor, cap in ((0.0, 100), (0.7, 5)):
            dc = DetectorConfig.preset("adi", confidence_floor=floor,
                                       max_detections=cap)
            out = detect(s.image, dc)
            confs = [x.confidence for x in out]
            assert confs == sorted(confs, reverse=True)
            assert all(c >= floor for c in confs)
            ungated = detect_candidates(s.image, dc)
            assert out == filter_by_confidence(ungated, floor)[:cap]
            assert detect(s.image, dc) == out
            keys = [rank_key(x) for x in ungated]
            assert keys == sorted(keys)


def test_degraded_mode_on_noise():
    px = np.random.default_rng(0).integers(0, 256, (128, 128),
                                           dtype=np.uint8)
    out = detect(SemImage("n", "adi", px), DetectorConfig.preset("adi"))
    assert out == [] and out.degraded


def test_uniform_image_degraded():
    out = detect(SemImage("u", "aei", np.full((64, 64), 7, np.uint8)),
                 DetectorConfig.preset("aei"))
    assert out == [] and out.diagnostic


def test_step_mismatch():
    s = new_sample(flat_spec(), 256, 256, "aei")
    with pytest.raises(ConfigError):
        detect(s.image, DetectorConfig.preset("adi"))


@pytest.mark.parametrize("kw", [dict(confidence_floor=1.5),
                                dict(max_detections=0),
                                dict(binarization="x")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DetectorConfig(**kw)


def test_config_dict_round_trip():
    c = DetectorConfig.preset("aei")
    assert DetectorConfig.from_dict(c.to_dict()) == c


def test_calibration_on_clean_batch():
    cfg = GenConfig("aei", 4, 11, count_range=(0, 0), p_empty=1.0).resolved()
    plan = plan_dataset(cfg)
    ims = [generate_sample(cfg.step, plan[i], cfg.pattern, cfg.size, 11, i,
                           f"c{i}").image for i in range(4)]
    preset = DetectorConfig.preset("aei")
    assert calibrate_confidence(ims, preset) == default_calibration(preset) \
        == preset.calibration


def test_custom_backend_is_pluggable():
    @register_backend("nothing")
    def nothing(image, config):
        return []

    try:
        s = new_sample(flat_spec(), 256, 256, "adi")
        assert detect(s.image, DetectorConfig(backend="nothing")) == []
    finally:
        BACKENDS.pop("nothing")
