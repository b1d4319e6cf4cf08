import json

import numpy as np
import pytest
import torch

from maskel.errors import ConfigError, DatasetError, ShapeError
from maskel.mae import ViTEncoder
from maskel.metrics import (
    REFERENCE_ROWS,
    ConfusionMatrix,
    confusion_from_ratings,
    confusion_from_rows,
    evaluate_pairs,
    format_table,
    mask_containment,
    perceptual_metric,
    psnr,
    read_ratings,
    ssim,
    study_report,
)
from maskel.oracles import psnr_loop, ssim_loop
from maskel.phantom import generate_dataset, render_arrays
from ratings_util import STUDY_TALLIES, write_ratings


def test_psnr_cap_and_closed_form():
    a = np.random.default_rng(0).random((8, 8))
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert psnr(a, b) == pytest.approx(psnr_loop(a, b), rel=1e-9)


def test_ssim_identity_exact():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = rng.random((16, 16))
        assert ssim(a, a) == 1.0


def test_ssim_matches_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim_loop(a, b), rel=1e-6)


def test_ssim_checkerboard_negative():
    a = (np.indices((16, 16)).sum(0) % 2).astype(float)
    assert ssim(a, 1 - a) < 0


def _containment_loop(pred, mask, r):
    h, w = mask.shape
    inside = total = 0
    for i in range(h):
        for j in range(w):
            if pred[i, j] > 0.1:
                total += 1
                win = mask[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1]
                inside += bool((win > 0.5).any())
    return 1.0 if total == 0 else inside / total


def test_mask_containment_matches_loop():
    rng = np.random.default_rng(2)
    for _ in range(20):
        mask = (rng.random((20, 20)) < 0.1).astype(float)
        pred = rng.random((20, 20)) * (rng.random((20, 20)) < 0.4)
        assert mask_containment(pred, mask) == pytest.approx(_containment_loop(pred, mask, 3), abs=1e-15)


def test_mask_containment_examples():
    mask = np.zeros((16, 16))
    mask[6:10, 6:10] = 1
    pred = np.zeros((16, 16))
    assert mask_containment(pred, mask) == 1.0
    pred[3, 3] = 0.5  # 3 px diagonal from the mask corner: inside the dilation
    assert mask_containment(pred, mask) == 1.0
    pred[2, 8] = 0.5  # 4 px above: outside
    assert mask_containment(pred, mask) == 0.5


def test_ssim_bounds_and_errors():
    rng = np.random.default_rng(4)
    for _ in range(10):
        v = ssim(rng.random((20, 20)), rng.random((20, 20)))
        assert -1 <= v <= 1
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


@pytest.fixture(scope="module")
def extractor():
    torch.manual_seed(0)
    return ViTEncoder(img_size=64, patch=8, dim=32, depth=4, heads=2).double().eval()


def test_perceptual_identity_and_symmetry(extractor):
    _, x = render_arrays(2, 64, seed=0)
    assert perceptual_metric(extractor, x[0], x[0]) == 0.0
    assert perceptual_metric(extractor, x[0], x[1]) == pytest.approx(perceptual_metric(extractor, x[1], x[0]), rel=1e-12)
    assert perceptual_metric(extractor, x[0], x[1]) > 0
    with pytest.raises(ConfigError):
        perceptual_metric(None, x[0], x[1])


def test_perceptual_monotone_in_noise(extractor):
    _, xs = render_arrays(4, 64, seed=1)
    rng = np.random.default_rng(0)
    for x in xs:
        noise = rng.standard_normal(x.shape)
        d = [perceptual_metric(extractor, x, x + e * noise) for e in (0.01, 0.05, 0.1)]
        assert d[0] < d[1] < d[2]


def test_reference_rows_render_verbatim():
    table = format_table(REFERENCE_ROWS)
    assert "33.82" in table and "0.9881" in table and "0.0210" in table
    assert "23.46" in table and "0.9206" in table and "0.0324" in table


def test_evaluate_identical_dirs(tmp_path, extractor):
    generate_dataset(3, 64, 0, tmp_path / "gt")
    generate_dataset(3, 64, 0, tmp_path / "pred")
    rep = evaluate_pairs(tmp_path / "pred", tmp_path / "gt", extractor, out_dir=tmp_path / "out")
    assert rep.count == 3
    assert rep.means() == {"psnr": 100.0, "ssim": 1.0, "perceptual": 0.0}
    data = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert data["count"] == 3
    assert "Ours_R" in (tmp_path / "out" / "metrics.txt").read_text()


def test_evaluate_count_mismatch(tmp_path):
    generate_dataset(3, 64, 0, tmp_path / "gt")
    generate_dataset(2, 64, 0, tmp_path / "pred")
    with pytest.raises(DatasetError):
        evaluate_pairs(tmp_path / "pred", tmp_path / "gt")


def test_single_perfect_rater(tmp_path):
    write_ratings(tmp_path / "r.csv", [(25, 0, 0, 25)])
    mats, avg = confusion_from_ratings(tmp_path / "r.csv")
    assert mats[0].as_tuple() == (25, 0, 0, 25)
    assert avg.accuracy == 1.0 and avg.false_negative_rate == 0.0


def test_published_average_matrix(tmp_path):
    write_ratings(tmp_path / "r.csv", STUDY_TALLIES)
    mats, avg = confusion_from_ratings(tmp_path / "r.csv")
    assert len(mats) == 6
    assert [round(v, 2) for v in avg.as_tuple()] == [18.83, 6.17, 12.33, 12.67]
    # exact elementwise mean of integer matrices
    assert avg.as_tuple() == tuple(np.mean([m.as_tuple() for m in mats], axis=0))
    # every rater saw 25 real and 25 generated images
    assert {m.tn + m.fp for m in mats} == {25} and {m.fn + m.tp for m in mats} == {25}


def test_confusion_convention():
    rows = [("a", "1", "generated", "real"), ("a", "2", "generated", "generated"),
            ("a", "3", "real", "real"), ("a", "4", "real", "generated"), ("a", "5", "generated", "real")]
    (m,), _ = confusion_from_rows(rows)
    assert (m.tn, m.fp, m.fn, m.tp) == (1, 1, 2, 1)
    assert m.false_negative_rate == pytest.approx(2 / 3)


def test_duplicate_and_unknown_labels(tmp_path):
    with pytest.raises(ConfigError):
        confusion_from_rows([("a", "1", "real", "real"), ("a", "1", "real", "generated")])
    (tmp_path / "bad.csv").write_text("rater,image,true_label,rated_label\na,1,real,fake\n")
    with pytest.raises(ConfigError):
        read_ratings(tmp_path / "bad.csv")
    (tmp_path / "hdr.csv").write_text("who,what\n")
    with pytest.raises(ConfigError):
        read_ratings(tmp_path / "hdr.csv")


def test_study_report_outputs(tmp_path):
    write_ratings(tmp_path / "r.csv", STUDY_TALLIES)
    study_report(tmp_path / "r.csv", tmp_path / "out")
    data = json.loads((tmp_path / "out" / "study.json").read_text())
    assert round(data["average"]["FN"], 2) == 12.33
    assert (tmp_path / "out" / "confusion.png").stat().st_size > 0
    assert "FN = generated images judged real" in (tmp_path / "out" / "study.txt").read_text()


def test_confusion_matrix_empty():
    m = ConfusionMatrix(0, 0, 0, 0)
    assert np.isnan(m.accuracy)
