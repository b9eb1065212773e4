import sys
import textwrap

import numpy as np
import pytest

from pvaerial.core import BoundingBox, iou
from pvaerial.detector import (
    DetectorError,
    ExternalDetector,
    ThermalBaselineDetector,
    detect,
    detect_thermal_baseline,
    parse_detector_spec,
)
from pvaerial.imaging import ThermalCalibration

from scenes import CAL, celsius_to_raw


def _scene(blobs, w=120, h=100, bg=30.0):
    temps = np.full((h, w), bg)
    for x0, y0, x1, y1, t in blobs:
        temps[y0:y1, x0:x1] = t
    return celsius_to_raw(temps)


# --- builtin baseline --------------------------------------------------------

def test_uniform_scene_empty():
    raw = _scene([])
    cfg = ThermalBaselineDetector(CAL, delta_t_trigger=10.0)
    assert detect_thermal_baseline(raw, CAL, cfg) == []


def test_single_hotspot_blob():
    raw = _scene([(40, 30, 45, 35, 55.0)])
    cfg = ThermalBaselineDetector(CAL, delta_t_trigger=10.0, min_area=4)
    dets = detect_thermal_baseline(raw, CAL, cfg)
    assert len(dets) == 1
    d = dets[0]
    assert d.class_label == "hotspot"
    assert iou(d.box, BoundingBox(40, 30, 45, 35)) > 0.6
    # confidence = (peak - median) / 50 clamped
    assert abs(d.confidence - min(1.0, (55.0 - 30.0) / 50.0)) < 0.01


def test_junction_prior_labels_small_blob():
    raw = _scene([(40, 30, 50, 40, 55.0), (80, 60, 82, 62, 55.0)])
    cfg = ThermalBaselineDetector(CAL, delta_t_trigger=10.0, min_area=4,
                                  junction_max_size=3)
    dets = detect_thermal_baseline(raw, CAL, cfg)
    labels = sorted(d.class_label for d in dets)
    assert labels == ["hotspot", "junction"]


def test_min_area_filters():
    raw = _scene([(40, 30, 42, 32, 60.0)])  # 2x2 blob
    cfg = ThermalBaselineDetector(CAL, delta_t_trigger=10.0, min_area=5)
    assert detect_thermal_baseline(raw, CAL, cfg) == []


def test_builtin_detect_deterministic():
    raw = _scene([(10, 10, 30, 25, 50.0), (60, 40, 70, 55, 58.0)])
    handle = ThermalBaselineDetector(CAL, delta_t_trigger=10.0)
    a = detect(handle, raw, "x")
    b = detect(handle, raw, "x")
    assert a == b
    for d in a.detections:
        assert 0 <= d.box.x_min <= d.box.x_max <= raw.shape[1]
        assert 0 <= d.box.y_min <= d.box.y_max <= raw.shape[0]
        assert d.box.area > 0


def test_builtin_recall_on_strong_blobs():
    rng = np.random.default_rng(21)
    trigger = 10.0
    hits = total = 0
    for trial in range(20):
        x0 = int(rng.integers(5, 100))
        y0 = int(rng.integers(5, 80))
        blob = (x0, y0, x0 + 6, y0 + 6, 30.0 + trigger + 5.0 + float(rng.uniform(0, 10)))
        raw = _scene([blob])
        handle = ThermalBaselineDetector(CAL, delta_t_trigger=trigger, min_area=4)
        dets = detect(handle, raw, "r").detections
        total += 1
        hits += any(iou(d.box, BoundingBox(*blob[:4])) > 0.5 for d in dets)
    assert hits == total


def test_baseline_validation():
    with pytest.raises(ValueError):
        ThermalBaselineDetector(CAL, delta_t_trigger=0)
    with pytest.raises(ValueError):
        ThermalBaselineDetector(CAL, min_area=0)


# --- external protocol -------------------------------------------------------

def _stub_detector(tmp_path, body: str) -> str:
    script = tmp_path / "stub.py"
    script.write_text(textwrap.dedent(body))
    return f"{sys.executable} {script} {{input}} {{output}}"


def test_external_no_output_means_empty(tmp_path):
    cmd = _stub_detector(tmp_path, """
        import sys
        # reads the input, writes nothing at all
        open(sys.argv[1], 'rb').read()
    """)
    handle = ExternalDetector(command=cmd)
    raw = _scene([])
    out = detect(handle, raw, "img0")
    assert out.detections == ()


def test_external_one_row(tmp_path):
    cmd = _stub_detector(tmp_path, """
        import sys
        with open(sys.argv[2], 'w') as fh:
            fh.write('hotspot,0.750000,10.000000,20.000000,30.000000,40.000000\\n')
    """)
    out = detect(ExternalDetector(command=cmd), _scene([]), "img1")
    assert len(out.detections) == 1
    assert out.detections[0].class_label == "hotspot"
    assert out.detections[0].box == BoundingBox(10, 20, 30, 40)


def test_external_bad_confidence_is_error(tmp_path):
    cmd = _stub_detector(tmp_path, """
        import sys
        with open(sys.argv[2], 'w') as fh:
            fh.write('hotspot,1.500000,10.0,20.0,30.0,40.0\\n')
    """)
    with pytest.raises(DetectorError, match="confidence"):
        detect(ExternalDetector(command=cmd), _scene([]), "img2")


def test_external_nonzero_exit(tmp_path):
    cmd = _stub_detector(tmp_path, """
        import sys
        print('boom', file=sys.stderr)
        sys.exit(3)
    """)
    with pytest.raises(DetectorError, match="exited 3"):
        detect(ExternalDetector(command=cmd), _scene([]), "img3")


def test_external_timeout(tmp_path):
    cmd = _stub_detector(tmp_path, """
        import sys, time
        time.sleep(5)
    """)
    handle = ExternalDetector(command=cmd, timeout_s=0.5)
    with pytest.raises(DetectorError, match="timed out"):
        detect(handle, _scene([]), "img4")


def test_external_timeout_env_override(tmp_path, monkeypatch):
    from pvaerial.detector import TIMEOUT_ENV_VAR

    cmd = _stub_detector(tmp_path, """
        import sys, time
        time.sleep(5)
    """)
    handle = ExternalDetector(command=cmd, timeout_s=60.0)
    monkeypatch.setenv(TIMEOUT_ENV_VAR, "0.5")
    with pytest.raises(DetectorError, match="timed out after 0.5s"):
        detect(handle, _scene([]), "img4b")
    monkeypatch.setenv(TIMEOUT_ENV_VAR, "nope")
    with pytest.raises(DetectorError, match="bad"):
        detect(handle, _scene([]), "img4c")


def test_external_replay_equals_file_content(tmp_path):
    # the pipeline depends only on the CSV, not on the process behind it
    fixture = tmp_path / "fixture.csv"
    fixture.write_text("panel,0.900000,5.000000,6.000000,50.000000,60.000000\n"
                       "panel,0.800000,70.000000,10.000000,100.000000,40.000000\n")
    cmd = _stub_detector(tmp_path, f"""
        import shutil, sys
        shutil.copy({str(fixture)!r}, sys.argv[2])
    """)
    out1 = detect(ExternalDetector(command=cmd), _scene([]), "img5")
    out2 = detect(ExternalDetector(command=cmd), _scene([]), "img5")
    assert out1 == out2
    assert len(out1.detections) == 2


def test_external_boxes_clipped_to_frame(tmp_path):
    cmd = _stub_detector(tmp_path, """
        import sys
        with open(sys.argv[2], 'w') as fh:
            fh.write('hotspot,0.500000,-10.000000,-10.000000,500.000000,500.000000\\n')
    """)
    out = detect(ExternalDetector(command=cmd), _scene([]), "img6")
    d = out.detections[0]
    assert d.box == BoundingBox(0, 0, 120, 100)


def test_external_template_validation():
    with pytest.raises(ValueError):
        ExternalDetector(command="run_stuff")
    with pytest.raises(ValueError):
        ExternalDetector(command="x {input}", timeout_s=0)


# --- spec parsing -------------------------------------------------------------

def test_parse_detector_specs():
    cal = ThermalCalibration(0.04, -273.15)
    h = parse_detector_spec("builtin:trigger=12,min_area=25,junction_max_size=3", cal)
    assert isinstance(h, ThermalBaselineDetector)
    assert h.delta_t_trigger == 12.0 and h.min_area == 25
    e = parse_detector_spec("external:mydet {input} {output}", cal)
    assert isinstance(e, ExternalDetector)
    with pytest.raises(ValueError):
        parse_detector_spec("builtin:bogus=1", cal)
    with pytest.raises(ValueError):
        parse_detector_spec("magic", cal)
