"""Synthetic detection records shared by the benchmark and its child processes."""

import numpy as np

from securefl.detection import Box, DetectionRecord


def records(scale=1.0, seed=1, n_classes=5):
    rng = np.random.default_rng(seed)
    out = []
    for img in range(max(1, int(200 * scale))):
        gts, preds = [], []
        for _ in range(int(rng.integers(2, 12))):
            x, y = rng.uniform(0, 600, 2)
            w, h = rng.uniform(10, 120, 2)
            k = int(rng.integers(n_classes))
            gts.append(Box(x, y, x + w, y + h, k))
            for _ in range(int(rng.integers(0, 4))):
                j = rng.normal(0, 0.15, 4) * [w, h, w, h]
                preds.append(Box(x + j[0], y + j[1], x + w + abs(j[2]) + 1, y + h + abs(j[3]) + 1, k,
                                 float(rng.uniform(0.01, 1.0))))
        for _ in range(int(rng.integers(0, 6))):
            x, y = rng.uniform(0, 600, 2)
            preds.append(Box(x, y, x + 40, y + 40, int(rng.integers(n_classes)), float(rng.uniform(0.01, 0.6))))
        out.append(DetectionRecord(f"img{img}", preds, gts))
    return out
