"""Python access to the YOLCO core."""

import json

from . import _yolco
from ._yolco import box_iou, model_budget, nms, otsu_threshold, roc_auc, select_topn, tile_slide


def generate_slide(seed, params=None, id="slide"):
    """Returns (pixels HxWx3 uint8, manifest dict)."""
    pixels, manifest = _yolco.generate_slide(seed, json.dumps(params or {}), id)
    return pixels, json.loads(manifest)


def run_pipeline(config=None, profile="desk", out=""):
    """Runs every stage; returns one metrics dict per classifier run."""
    return json.loads(_yolco.run_pipeline(json.dumps(config or {}), profile, out))


__all__ = [
    "box_iou",
    "generate_slide",
    "model_budget",
    "nms",
    "otsu_threshold",
    "roc_auc",
    "run_pipeline",
    "select_topn",
    "tile_slide",
]
