"""Sample manifests and synthetic toy datasets.

A manifest is JSONL with one sample per line::

    {"sample_id": "s00001", "log_id": "log003", "location": "site0", "month": 3,
     "features": [...], "label": 1.7, "annotations": [[cls, cx, cy, w, h], ...]}

``annotations`` use YOLO-normalized boxes.  CSV manifests carry the same
metadata columns plus ``label`` and feature columns ``f0 .. f{d-1}``.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyManifest


@dataclass(frozen=True)
class Sample:
    sample_id: str
    log_id: str = ""
    location: str = ""
    month: int = 0
    features: tuple[float, ...] = ()
    label: float | int | None = None
    annotations: tuple[tuple[float, ...], ...] = ()
    tags: dict = field(default_factory=dict, compare=False)

    def label_histogram(self) -> dict[int, int]:
        """Class -> annotation count; a classification label counts once."""
        if self.annotations:
            return dict(Counter(int(a[0]) for a in self.annotations))
        if isinstance(self.label, (int, np.integer)) and not isinstance(self.label, bool):
            return {int(self.label): 1}
        return {}

    def meta(self, key: str):
        if key in ("sample_id", "log_id", "location", "month"):
            return getattr(self, key)
        return self.tags.get(key)

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "log_id": self.log_id,
            "location": self.location,
            "month": self.month,
        }
        if self.features:
            d["features"] = list(self.features)
        if self.label is not None:
            d["label"] = self.label
        if self.annotations:
            d["annotations"] = [list(a) for a in self.annotations]
        if self.tags:
            d["tags"] = self.tags
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        label = d.get("label")
        return cls(
            sample_id=str(d["sample_id"]),
            log_id=str(d.get("log_id", d["sample_id"])),
            location=str(d.get("location", "")),
            month=int(d.get("month", 0)),
            features=tuple(float(x) for x in d.get("features", ())),
            label=label,
            annotations=tuple(tuple(float(v) if i else int(v) for i, v in enumerate(a))
                              for a in d.get("annotations", ())),
            tags=dict(d.get("tags", {})),
        )


def write_manifest(samples: Iterable[Sample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def _read_jsonl(path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Sample.from_dict(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
    return out


def _read_csv(path) -> list[Sample]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            feats = sorted((k for k in row if k.startswith("f") and k[1:].isdigit()), key=lambda k: int(k[1:]))
            label = row.get("label")
            if label not in (None, ""):
                label = float(label)
                if label.is_integer() and "." not in row["label"]:
                    label = int(label)
            else:
                label = None
            out.append(Sample(
                sample_id=row["sample_id"],
                log_id=row.get("log_id") or row["sample_id"],
                location=row.get("location", ""),
                month=int(row.get("month") or 0),
                features=tuple(float(row[k]) for k in feats),
                label=label,
            ))
    return out


def load_manifest(path) -> list[Sample]:
    path = Path(path)
    samples = _read_csv(path) if path.suffix.lower() == ".csv" else _read_jsonl(path)
    if not samples:
        raise EmptyManifest(f"{path} holds no samples")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate sample ids")
    return samples


def to_arrays(samples: Sequence[Sample], task: str) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and target array for a toy task."""
    X = np.array([s.features for s in samples], dtype=np.float64)
    if len(samples) == 0:
        X = X.reshape(0, 0)
    if task == "detection":
        y = np.array([[a[0], *a[1:5]] for s in samples for a in s.annotations[:1]],
                     dtype=np.float64).reshape(-1, 5)
    elif task == "classification":
        y = np.array([int(s.label) for s in samples], dtype=np.int64)
    else:
        y = np.array([float(s.label) for s in samples], dtype=np.float64)
    return X, y


# --- synthetic generators ----------------------------------------------------


def _meta(i, n_logs, n_groups, rng_months):
    group = i % n_groups
    return {
        "sample_id": f"s{i:05d}",
        "log_id": f"log{(i // max(1, n_groups)) % n_logs:03d}-g{group}",
        "location": f"site{group}",
        "month": int(rng_months[i]),
    }, group


def synthetic_regression(n: int, n_features: int, seed: int = 0, noise: float = 0.5,
                         groups: int = 1, shift: float = 0.0, n_logs: int = 10) -> list[Sample]:
    """Linear-Gaussian data; group ``g`` has its features shifted by ``shift * g``.

    The group index is stored as ``location = "site{g}"`` so metadata rules can
    produce feature-shifted (non-IID) client splits.
    """
    rng = np.random.default_rng(seed)
    w_true = rng.normal(0.0, 1.0, n_features)
    b_true = float(rng.normal())
    months = rng.integers(1, 13, n)
    out = []
    for i in range(n):
        meta, g = _meta(i, n_logs, groups, months)
        x = rng.normal(shift * g, 1.0, n_features)
        yv = float(x @ w_true + b_true + rng.normal(0.0, noise))
        out.append(Sample(features=tuple(x.tolist()), label=yv, **meta))
    return out


def synthetic_classification(n: int, n_features: int, n_classes: int = 2, seed: int = 0,
                             groups: int = 1, shift: float = 0.0, n_logs: int = 10) -> list[Sample]:
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 2.0, (n_features, n_classes))
    months = rng.integers(1, 13, n)
    out = []
    for i in range(n):
        meta, g = _meta(i, n_logs, groups, months)
        x = rng.normal(shift * g, 1.0, n_features)
        logits = x @ W + rng.gumbel(size=n_classes)
        out.append(Sample(features=tuple(x.tolist()), label=int(np.argmax(logits)), **meta))
    return out


def synthetic_detection(n: int, n_classes: int = 3, seed: int = 0, noise: float = 0.02,
                        groups: int = 1, n_logs: int = 10) -> list[Sample]:
    """One object per image; features are a noisy view of its box and class."""
    rng = np.random.default_rng(seed)
    months = rng.integers(1, 13, n)
    out = []
    for i in range(n):
        meta, _ = _meta(i, n_logs, groups, months)
        k = int(rng.integers(n_classes))
        w, h = rng.uniform(0.1, 0.4, 2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        onehot = np.zeros(n_classes)
        onehot[k] = 1.0
        x = np.concatenate([[cx, cy, w, h], onehot]) + rng.normal(0.0, noise, 4 + n_classes)
        out.append(Sample(features=tuple(x.tolist()),
                          annotations=((k, float(cx), float(cy), float(w), float(h)),), **meta))
    return out
