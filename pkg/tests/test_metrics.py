import numpy as np
import pytest

from psgr import metrics
from psgr.errors import ShapeError
from psgr.tensor import Rng

from oracles import counting_metrics_oracle


def random_mask(rng, shape=(8, 8), n_classes=2, fg_prob=0.35):
    u = rng.uniform(0, 1, shape)
    mask = np.zeros(shape, dtype=np.int64)
    mask[u < fg_prob] = 1
    if n_classes == 3:
        v = rng.uniform(0, 1, shape)
        mask[(mask > 0) & (v < 0.5)] = 2
    return mask


def test_perfect_prediction():
    rng = Rng(0)
    mask = random_mask(rng)
    report = metrics.evaluate_pair(mask, mask, 2)
    assert report.dsc == 1.0
    assert report.miou == 1.0
    assert report.sen == 1.0
    assert report.spe == 1.0
    assert report.hd == 0.0
    assert report.mae == 0.0


def test_all_background_prediction():
    target = np.zeros((10, 10), dtype=np.int64)
    target[:2, :5] = 1  # 10 foreground pixels of 100
    pred = np.zeros_like(target)
    assert metrics.sen(pred, target) == 0.0
    assert metrics.mae(pred, target) == 0.1


def test_counting_oracle_agreement():
    for seed in range(100):
        rng = Rng(2000 + seed)
        n_classes = 2 if seed % 2 == 0 else 3
        pred = random_mask(rng, (8, 8), n_classes)
        target = random_mask(rng, (8, 8), n_classes)
        expected = counting_metrics_oracle(pred, target, n_classes)
        assert metrics.dsc(pred, target, n_classes) == expected["dsc"]
        assert metrics.miou(pred, target, n_classes) == expected["miou"]
        assert metrics.sen(pred, target) == expected["sen"]
        assert metrics.spe(pred, target) == expected["spe"]
        assert metrics.mae(pred, target) == expected["mae"]


def test_symmetric_metrics():
    rng = Rng(5)
    a = random_mask(rng)
    b = random_mask(rng)
    assert metrics.dsc(a, b) == metrics.dsc(b, a)
    assert metrics.miou(a, b) == metrics.miou(b, a)
    assert metrics.mae(a, b) == metrics.mae(b, a)
    assert metrics.hausdorff(a, b) == metrics.hausdorff(b, a)


def test_empty_mask_conventions():
    empty = np.zeros((6, 6), dtype=np.int64)
    full = empty.copy()
    full[2, 2] = 1
    assert metrics.dsc(empty, empty) == 1.0
    assert metrics.dsc(empty, full) == 0.0
    diagonal = float(np.sqrt(72))
    assert metrics.hausdorff(empty, full) == diagonal
    assert metrics.hausdorff(empty, empty) == diagonal


def test_hausdorff_examples():
    a = np.zeros((8, 8), dtype=np.int64)
    b = np.zeros((8, 8), dtype=np.int64)
    a[0, 0] = 1
    b[3, 4] = 1
    assert metrics.hausdorff(a, b) == 5.0
    assert metrics.hausdorff(a, a) == 0.0


def test_hausdorff_far_pixel_sanity():
    # adding one far pixel moves HD by exactly its boundary distance
    a = np.zeros((12, 12), dtype=np.int64)
    a[5:7, 5:7] = 1
    b = a.copy()
    b[0, 0] = 1
    expected = min(np.sqrt((y - 0) ** 2 + (x - 0) ** 2)
                   for y, x in np.argwhere(a > 0))
    assert metrics.hausdorff(a, b) == expected


def test_boundary_uses_four_neighbors_and_image_edge():
    mask = np.zeros((5, 5), dtype=np.int64)
    mask[1:4, 1:4] = 1
    pts = {tuple(p) for p in metrics.boundary_points(mask).astype(int)}
    assert (2, 2) not in pts          # interior
    assert (1, 1) in pts and (3, 3) in pts
    full = np.ones((3, 3), dtype=np.int64)
    pts_full = {tuple(p) for p in metrics.boundary_points(full).astype(int)}
    assert (1, 1) not in pts_full     # center is interior
    assert len(pts_full) == 8         # ring touches the image edge


def test_metric_report_ranges():
    rng = Rng(31)
    for _ in range(10):
        r = metrics.evaluate_pair(random_mask(rng), random_mask(rng), 2)
        assert 0 <= r.miou <= 1 and 0 <= r.dsc <= 1
        assert 0 <= r.sen <= 1 and 0 <= r.spe <= 1
        assert 0 <= r.mae <= 1 and r.hd >= 0


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        metrics.dsc(np.zeros((2, 2)), np.zeros((3, 3)))


def test_mean_report():
    rng = Rng(9)
    reports = [metrics.evaluate_pair(random_mask(rng), random_mask(rng), 2)
               for _ in range(4)]
    summary = metrics.mean_report(reports)
    assert abs(summary["dsc"] - np.mean([r.dsc for r in reports])) < 1e-15
