import numpy as np
import pytest

import yolco

TINY = {
    "data": {"count": 14, "slide": {"side": 512}, "tile_side": 256, "thumbnail_level": 3, "split": [4, 1, 1]},
    "patches": {"side": 128, "negatives": 1},
    "detector": {"epochs": 1, "batch_size": 4},
    "collect": {"n": 8},
    "classifier": {"width": 16, "heads": 2, "depth": 1, "ff": 16, "epochs": 3, "lr0": 0.001},
    "eval": {"bootstrap": 50},
}


def test_model_budget():
    params, macs = yolco.model_budget()
    tiny_params, _ = yolco.model_budget(tiny=True)
    assert abs(params - 1.79e6) / 1.79e6 < 0.1
    assert abs(macs - 3.55e9) / 3.55e9 < 0.1
    assert params / tiny_params < 0.25


def test_slide_generation_is_deterministic():
    a, manifest = yolco.generate_slide(7, {"side": 256, "lesion_count": 2, "lesion_min": 8, "lesion_max": 16})
    b, _ = yolco.generate_slide(7, {"side": 256, "lesion_count": 2, "lesion_min": 8, "lesion_max": 16})
    assert a.shape == (256, 256, 3) and a.dtype == np.uint8
    assert np.array_equal(a, b)
    assert manifest["label"] == "positive"
    assert len(manifest["annotations"]) == 2


def test_tiles_cover_disc():
    pixels, _ = yolco.generate_slide(3, {"side": 512})
    threshold, tiles = yolco.tile_slide(pixels, 3, 128)
    assert 0 < threshold < 255
    assert tiles
    origins = {(x, y) for x, y, _ in tiles}
    assert len(origins) == len(tiles)
    assert all(side == 128 for _, _, side in tiles)


def test_geometry_and_metrics():
    assert yolco.box_iou([0, 0, 2, 2], [0, 0, 2, 2]) == pytest.approx(1.0)
    assert yolco.box_iou([0, 0, 2, 2], [10, 10, 2, 2]) == 0.0
    kept = yolco.nms([[0, 0, 10, 10], [1, 0, 10, 10], [50, 50, 10, 10]], [0.9, 0.8, 0.7], 0.5)
    assert kept == [0, 2]
    assert yolco.select_topn([[0, 0, 4, 4], [1, 0, 4, 4], [20, 0, 4, 4]], [0.9, 0.8, 0.7], 2, 5.0) == [0, 2]
    assert yolco.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    h = [0] * 256
    h[20], h[200] = 10, 10
    assert 20 < yolco.otsu_threshold(h) <= 200


def test_bad_input_raises():
    with pytest.raises(ValueError):
        yolco.nms([[0, 0, 1, 1]], [0.5, 0.4])


def test_tiny_pipeline(tmp_path):
    rows = yolco.run_pipeline(TINY, "desk", str(tmp_path))
    assert len(rows) == 1
    assert 0.0 <= rows[0]["auc"] <= 1.0
    assert (tmp_path / "detector.ckpt").exists()
