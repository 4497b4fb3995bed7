# SPDX-License-Identifier: Apache-2.0
import os
from pathlib import Path

import numpy as np
import pytest

import ctquant

DATA = Path(os.environ.get("CTQUANT_DATA_DIR", Path(__file__).resolve().parents[2] / "data"))


def test_names_and_weights():
    assert len(ctquant.BIOMARKER_NAMES) == 18
    assert ctquant.BIOMARKER_NAMES[3] == "CACS"
    assert [ctquant.agatston_weight(h) for h in (129, 130, 200, 300, 400)] == [0, 1, 2, 3, 4]


def test_volume_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    hu = rng.integers(-1024, 4096, size=(3, 4, 5), dtype=np.int16)
    vol = ctquant.Volume(hu, spacing=(0.5, 0.7, 2.5), origin=(1.0, -2.0, 3.0))
    assert vol.dims == [5, 4, 3]
    ctquant.save_volume(vol, tmp_path / "v.ctqh")
    back = ctquant.load_volume(tmp_path / "v.ctqh")
    np.testing.assert_array_equal(back.hu, hu)
    assert back.spacing == [0.5, 0.7, 2.5]

    raw = bytearray((tmp_path / "v.raw").read_bytes())
    raw[7] ^= 0x10
    (tmp_path / "v.raw").write_bytes(bytes(raw))
    with pytest.raises(ctquant.CtquantError, match="ChecksumMismatch"):
        ctquant.load_volume(tmp_path / "v.ctqh")


def test_mask_rejects_illegal_labels():
    with pytest.raises(ctquant.CtquantError, match="IllegalLabel"):
        ctquant.Mask(np.full((2, 2, 2), 3, dtype=np.uint8), "aorta")


def test_bundled_phantom_meets_truth():
    ph = ctquant.generate_phantom((DATA / "phantoms" / "straight_oblique.json").read_text())
    got = ctquant.extract_all(ph["volume"], ph["pericardium"], ph["calcium"], ph["aorta"], ph["lungs"])
    for name, truth in ph["truth"].items():
        value, status = got[name]
        assert status == truth["status"], name
        if status == "ok":
            tol = max(truth["abs_tol"], truth["rel_tol"] * abs(truth["value"]))
            assert abs(value - truth["value"]) <= tol, name


def test_missing_mask_fails_its_group():
    ph = ctquant.generate_phantom((DATA / "phantoms" / "straight_oblique.json").read_text())
    got = ctquant.extract_all(ph["volume"], pericardium=ph["pericardium"])
    assert got["ATI"][1] == "failed"
    assert got["PFATV"][1] == "ok"


def test_metrics():
    scores = [0.1, 0.4, 0.35, 0.8]
    labels = [0, 0, 1, 1]
    assert ctquant.roc_auc(scores, labels) == pytest.approx(0.75, abs=1e-15)
    lo, hi = ctquant.bootstrap_auc_ci(scores * 10, labels * 10, replicates=200, seed=3)
    assert (lo, hi) == ctquant.bootstrap_auc_ci(scores * 10, labels * 10, replicates=200, seed=3)
    assert lo <= hi
    r = ctquant.mcnemar_test([1, 1, 0], [0, 0, 0], [1, 1, 1])
    assert r["exact"] and r["b"] == 2 and r["c"] == 0
    assert r["p_value"] == pytest.approx(0.5, abs=1e-15)


def test_train_predict_and_model_file(tmp_path):
    ctquant.write_synthetic_cohort(tmp_path / "train.csv", n=200, dim=8, informative=3, effect=3.0, seed=1)
    ctquant.write_synthetic_cohort(tmp_path / "val.csv", n=80, dim=8, informative=3, effect=3.0, seed=2)
    init = ctquant.init_model(deep_dim=8, embed=8, head_dim=4, encoder_hidden=8, seed=5)
    model, best_epoch, best_auc = ctquant.train(init, tmp_path / "train.csv", tmp_path / "val.csv", epochs=20, seed=5)
    assert 0 <= best_epoch <= 20
    assert best_auc > 0.9

    ctquant.save_model(model, tmp_path / "m.json")
    again = ctquant.load_model(tmp_path / "m.json")
    assert again.version_hash == model.version_hash

    reports = ctquant.predict_file(again, tmp_path / "val.csv")
    assert len(reports) == 80
    for r in reports:
        assert 0.0 <= r["probability"] <= 1.0
        assert abs(sum(r["contributions"].values()) - 1.0) < 1e-9
        assert list(r["contributions"])[0] == "deep_features"

    one = ctquant.predict(again, [0.0] * 8, [0.0] * 18, scan_id="zero")
    assert one["scan_id"] == "zero"
    with pytest.raises(ValueError):
        ctquant.predict(again, [0.0] * 8, [0.0] * 3)


def test_tampered_model_is_rejected(tmp_path):
    model = ctquant.init_model(deep_dim=4, embed=4, head_dim=2, encoder_hidden=4)
    ctquant.save_model(model, tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    i = text.index('"cls.b"') + 20
    bad = text[:i] + ("1" if text[i] != "1" else "2") + text[i + 1 :]
    (tmp_path / "m.json").write_text(bad)
    with pytest.raises(ctquant.CtquantError):
        ctquant.load_model(tmp_path / "m.json")
