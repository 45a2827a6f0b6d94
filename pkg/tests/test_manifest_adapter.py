import json
import sys
import textwrap

import numpy as np
import pytest

from advart.adapter import AdapterError, ExternalDetector
from advart.detector import synth_dataset
from advart.evaluation import map_eval
from advart.manifest import ManifestError, read_manifest, write_dataset

# --- manifests ------------------------------------------------------------------


def test_write_read_round_trip(tmp_path):
    scenes = synth_dataset(1, 6)
    path = write_dataset(scenes, tmp_path)
    back = read_manifest(path)
    assert [s.split for s in back] == [s.split for s in scenes]
    for a, b in zip(scenes, back):
        assert a.boxes == b.boxes
        # PNG quantizes to 8 bits
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12


def test_split_defaults_to_index_rule(tmp_path):
    scenes = synth_dataset(1, 6)
    path = write_dataset(scenes, tmp_path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    for rec in lines:
        del rec["split"]
    path.write_text("\n".join(json.dumps(r) for r in lines) + "\n")
    assert [s.split for s in read_manifest(path)] == ["train"] * 4 + ["val", "train"]


@pytest.mark.parametrize(
    "line, match",
    [
        ("{not json", "invalid JSON"),
        ('{"image": "a.png"}', "boxes"),
        ('{"image": "a.png", "boxes": [{"cx": 0.5}]}', "bad box"),
        ('{"image": "a.png", "boxes": [], "split": "test"}', "split"),
        ('{"image": "missing.png", "boxes": []}', "missing.png"),
    ],
)
def test_manifest_errors_name_line(tmp_path, line, match):
    path = tmp_path / "m.jsonl"
    path.write_text("\n" + line + "\n")
    with pytest.raises(ManifestError, match=match) as err:
        read_manifest(path)
    assert "m.jsonl:2" in str(err.value)


def test_manifest_missing_and_empty(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(tmp_path / "nope.jsonl")
    (tmp_path / "e.jsonl").write_text("\n")
    with pytest.raises(ManifestError, match="no scenes"):
        read_manifest(tmp_path / "e.jsonl")


# --- external detector ----------------------------------------------------------------

CHILD = textwrap.dedent(
    """
    import json, os, sys
    d = sys.argv[-1]
    mode = sys.argv[1]
    if mode == "fail":
        sys.stderr.write("model weights missing\\n"); sys.exit(3)
    for name in sorted(os.listdir(d)):
        if mode == "garbage":
            print("not json"); continue
        boxes = [{"cx": 0.5, "cy": 0.5, "w": 0.2, "h": 0.4, "class": 0, "score": 0.9},
                 {"cx": 0.2, "cy": 0.2, "w": 0.1, "h": 0.1, "class": 1, "score": 0.3}]
        print(json.dumps({"image": name, "boxes": boxes}))
    """
)


@pytest.fixture
def child(tmp_path):
    path = tmp_path / "child.py"
    path.write_text(CHILD)
    return lambda mode: ExternalDetector([sys.executable, str(path), mode])


def test_adapter_parses_and_filters(child):
    imgs = [np.zeros((8, 8, 3)), np.ones((8, 8, 3))]
    dets = child("ok").detect_images(imgs, conf=0.5, nms_iou=0.45)
    assert len(dets) == 2 and all(len(d) == 1 for d in dets)
    assert dets[0][0].score == pytest.approx(0.9) and dets[0][0].class_id == 0
    assert len(child("ok").detect_images(imgs, conf=0.1, nms_iou=0.45)[0]) == 2


def test_adapter_plugs_into_map_eval(child):
    scenes = synth_dataset(2, 3)
    rep = map_eval(child("ok"), scenes)
    assert rep.map == 100.0


def test_adapter_errors(child):
    with pytest.raises(AdapterError, match="status 3: model weights missing"):
        child("fail").detect_images([np.zeros((4, 4, 3))], 0.5, 0.45)
    with pytest.raises(AdapterError, match="line 1"):
        child("garbage").detect_images([np.zeros((4, 4, 3))], 0.5, 0.45)
    with pytest.raises(AdapterError, match="failed to run"):
        ExternalDetector(["/nonexistent/detector"]).detect_images([np.zeros((4, 4, 3))], 0.5, 0.45)


def test_from_spec():
    ext = ExternalDetector.from_spec("cmd:python3 -m my.detector --fast")
    assert ext.command == ["python3", "-m", "my.detector", "--fast"]
    with pytest.raises(AdapterError):
        ExternalDetector.from_spec("yolo.bin")
    with pytest.raises(AdapterError):
        ExternalDetector.from_spec("cmd:")
