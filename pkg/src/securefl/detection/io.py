"""Reading detection records and writing AP tables.

Input JSON layout::

    {"format": "yolo" | "corners",
     "images": [{"image_id": "...", "width": W, "height": H,
                 "ground_truths": [[class, a, b, c, d], ...],
                 "predictions":   [[class, conf, a, b, c, d], ...]}]}

With ``"yolo"`` the four numbers are normalized center x, center y, width and
height, scaled by the image size; with ``"corners"`` they are absolute x1, y1,
x2, y2.  A per-image ``format`` overrides the file-level one.
"""

from __future__ import annotations

import csv
import json

from .boxes import Box, DetectionRecord, yolo_to_corners
from .metrics import MapResult


def _box(fmt, coords, class_id, conf, w, h):
    if fmt == "yolo":
        x1, y1, x2, y2 = yolo_to_corners(*coords, img_w=w, img_h=h)
    elif fmt == "corners":
        x1, y1, x2, y2 = coords
    else:
        raise ValueError(f"unknown box format {fmt!r}")
    return Box(float(x1), float(y1), float(x2), float(y2), int(class_id),
               None if conf is None else float(conf))


def records_from_dict(doc: dict) -> list[DetectionRecord]:
    default_fmt = doc.get("format", "corners")
    out = []
    for img in doc["images"]:
        fmt = img.get("format", default_fmt)
        w, h = float(img.get("width", 1.0)), float(img.get("height", 1.0))
        gts = [_box(fmt, g[1:5], g[0], None, w, h) for g in img.get("ground_truths", [])]
        preds = [_box(fmt, p[2:6], p[0], p[1], w, h) for p in img.get("predictions", [])]
        out.append(DetectionRecord(str(img["image_id"]), preds, gts))
    return out


def load_records(path) -> list[DetectionRecord]:
    with open(path) as fh:
        return records_from_dict(json.load(fh))


def write_ap_csv(result: MapResult, path) -> None:
    thresholds = list(result.per_threshold)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", *[f"AP@{t:.2f}" for t in thresholds], "AP@[.50:.95]"])
        for k, row in result.ap.items():
            vals = [row[t] for t in thresholds]
            w.writerow([k, *[f"{v:.6f}" for v in vals], f"{sum(vals) / len(vals):.6f}"])
        w.writerow(["mAP", *[f"{result.per_threshold[t]:.6f}" for t in thresholds], f"{result.overall:.6f}"])


def write_summary_json(result: MapResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
