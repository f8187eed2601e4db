from dataclasses import replace

import numpy as np
import pytest

from platescan.data import load_samples
from platescan.evaluate import (
    ModelPredictor, points_from_maps, predict_results, read_reports, report_splits,
    results_from_prediction_manifest, write_reports,
)
from platescan.labels import RadiusPolicy, generate_point_mask
from platescan.metrics import format_table
from platescan.model import MDCNeXt
from platescan.synth import DatasetConfig, make_dataset

from tiny import SMALL


@pytest.fixture(scope="module")
def test_samples(tmp_path_factory):
    # enough images that every difficulty split is populated
    m = make_dataset(DatasetConfig(train=4, test=24, seed=11), tmp_path_factory.mktemp("ds"))
    return load_samples(m["test"])


def label_oracle(samples):
    """A predictor that knows the answer: it looks the image up and paints unit disks at the true endpoints."""
    table = {s.image.tobytes(): s.ann for s in samples}

    def predict(image):
        ann = table[image.tobytes()]
        pol = RadiusPolicy.parse("Const-1")
        return np.stack([generate_point_mask(ann, pol, p) for p in ("anode", "cathode")]).astype(np.float32)

    return predict


def test_label_oracle_scores_perfectly(test_samples):
    reps = report_splits(predict_results(label_oracle(test_samples), test_samples))
    assert set(reps) == {"regular", "difficult", "tough", "average"}
    avg = reps["average"]
    assert avg.PN_ACC == 1.0 and avg.AN_MAE == 0.0 and avg.CN_MAE == 0.0
    # disks sit on rounded centers; the bbox center is within half a pixel per axis
    assert avg.AL_MAE <= np.sqrt(0.5) and avg.CL_MAE <= np.sqrt(0.5)
    assert avg.OH_MAE <= 2.0
    assert not avg.flags


def test_empty_maps_score_zero_with_dashes(test_samples):
    blank = lambda img: np.zeros((2,) + img.shape, dtype=np.float32)
    rep = report_splits(predict_results(blank, test_samples), per_split=False)["all"]
    assert rep.PN_ACC == 0.0 and rep.AN_ACC == 0.0
    assert rep.AL_MAE is None and rep.OH_MAE is None
    assert "—" in format_table({"all": rep})


def test_predictor_cannot_use_wrong_ground_truth(test_samples):
    # predictions for one image scored against another image's labels are worse
    a, b = test_samples[0], test_samples[1]
    good = results_from_prediction_manifest([a.ann], [a.ann])
    swapped = results_from_prediction_manifest([replace(b.ann, image_id=a.ann.image_id)], [a.ann])
    g = report_splits(good, per_split=False)["all"]
    s = report_splits(swapped, per_split=False)["all"]
    assert g.PN_ACC == 1.0 and g.AL_MAE == 0.0
    assert (s.PN_ACC < 1.0) or (s.AL_MAE > 0.0)


def test_missing_prediction_counts_as_empty(test_samples):
    res = results_from_prediction_manifest([], [s.ann for s in test_samples[:3]])
    rep = report_splits(res, per_split=False)["all"]
    assert rep.PN_ACC == 0.0 and rep.N == 3


def test_missing_split_is_flagged(test_samples):
    regular = [s for s in test_samples if s.ann.difficulty.value == "regular"]
    reps = report_splits(predict_results(label_oracle(regular), regular))
    assert reps["difficult"].N == 0
    assert any("missing splits" in f for f in reps["average"].flags)


def test_reports_round_trip_and_are_deterministic(test_samples, tmp_path):
    reps = report_splits(predict_results(label_oracle(test_samples), test_samples), mode="paper")
    p1 = write_reports(reps, tmp_path / "a", "t")
    p2 = write_reports(reps, tmp_path / "b", "t")
    assert p1["records"].read_bytes() == p2["records"].read_bytes()
    assert p1["table"].read_bytes() == p2["table"].read_bytes()
    back = read_reports(p1["records"])
    assert back == reps


def test_points_from_maps_rescales_to_native():
    maps = np.zeros((2, 64, 64), dtype=np.float32)
    maps[0, 63, 63] = 1.0
    maps[1, 0, 0] = 1.0
    an, ca = points_from_maps(maps, (128, 32), "x")
    assert an == [(127.0, 31.0)] and ca == [(0.0, 0.0)]


def test_model_predictor_shapes(test_samples):
    model = MDCNeXt(SMALL).eval()
    pred = ModelPredictor(model, test_samples[0].image, 64)
    assert pred(test_samples[1].image).shape == (2, 64, 64)
    with pytest.raises(ValueError):
        ModelPredictor(model, test_samples[0].image, 64, output="fine")
