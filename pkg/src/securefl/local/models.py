"""Small numpy models with analytic gradients for desk-scale federations.

Gradients are returned as flat vectors laid out like the model's
:class:`~securefl.params.ParameterSet`, so the trainer can update every group
with one vector operation.
"""

from __future__ import annotations

import numpy as np

from ..params import Group, ParameterSet


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(probs, labels):
    p = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.clip(p, 1e-300, None))))


class ToyModel:
    """Base class: identity re-parameterization, loss-only primary metric."""

    name = "toy"
    task = "regression"

    def init_params(self, seed: int = 0) -> ParameterSet:
        raise NotImplementedError

    def loss_and_grad(self, params: ParameterSet, X, y) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def loss(self, params: ParameterSet, X, y) -> float:
        return self.loss_and_grad(params, X, y)[0]

    def evaluate(self, params: ParameterSet, X, y) -> dict[str, float]:
        return {"loss": self.loss(params, X, y)}

    def reparameterize(self, params: ParameterSet) -> ParameterSet:
        return params

    def buffers(self) -> ParameterSet:
        """Non-learnable state shipped with the full checkpoint only."""
        return ParameterSet()


class LinearRegression(ToyModel):
    """``y ~ X @ weight + bias`` under mean squared error."""

    name = "linear"

    def __init__(self, n_features: int, fit_bias: bool = True):
        self.n_features = n_features
        self.fit_bias = fit_bias

    def init_params(self, seed: int = 0) -> ParameterSet:
        entries = [("weight", Group.DECAY, (self.n_features,), np.zeros(self.n_features))]
        if self.fit_bias:
            entries.append(("bias", Group.BIAS, (1,), np.zeros(1)))
        return ParameterSet(entries)

    def predict(self, params, X):
        out = np.asarray(X, dtype=np.float64) @ params["weight"].values
        if self.fit_bias:
            out = out + params["bias"].values[0]
        return out

    def loss_and_grad(self, params, X, y):
        X = np.asarray(X, dtype=np.float64)
        r = self.predict(params, X) - y
        n = len(y)
        loss = float(r @ r / n)
        gw = 2.0 * (X.T @ r) / n
        if self.fit_bias:
            return loss, np.concatenate([gw, [2.0 * r.sum() / n]])
        return loss, gw


class LogisticRegression(ToyModel):
    """Multinomial logistic regression with integer labels."""

    name = "logistic"
    task = "classification"

    def __init__(self, n_features: int, n_classes: int = 2):
        self.n_features = n_features
        self.n_classes = n_classes

    def init_params(self, seed: int = 0) -> ParameterSet:
        d, c = self.n_features, self.n_classes
        return ParameterSet([
            ("weight", Group.DECAY, (d, c), np.zeros(d * c)),
            ("bias", Group.BIAS, (c,), np.zeros(c)),
        ])

    def logits(self, params, X):
        return np.asarray(X, dtype=np.float64) @ params["weight"].array() + params["bias"].values

    def loss_and_grad(self, params, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        probs = _softmax(self.logits(params, X))
        g = probs.copy()
        g[np.arange(y.size), y] -= 1.0
        g /= y.size
        return _cross_entropy(probs, y), np.concatenate([(X.T @ g).ravel(), g.sum(axis=0)])

    def evaluate(self, params, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        probs = _softmax(self.logits(params, X))
        return {
            "loss": _cross_entropy(probs, y),
            "accuracy": float(np.mean(probs.argmax(axis=1) == y)),
        }


class MLP(ToyModel):
    """One tanh hidden layer with a per-unit gain, softmax output.

    The gain vector is tagged ``NORM`` so that all three parameter groups are
    present.
    """

    name = "mlp"
    task = "classification"

    def __init__(self, n_features: int, hidden: int = 16, n_classes: int = 2):
        self.n_features = n_features
        self.hidden = hidden
        self.n_classes = n_classes

    def init_params(self, seed: int = 0) -> ParameterSet:
        rng = np.random.default_rng(seed)
        d, h, c = self.n_features, self.hidden, self.n_classes
        return ParameterSet([
            ("fc1.weight", Group.DECAY, (d, h), rng.normal(0.0, 1.0 / np.sqrt(d), d * h)),
            ("fc1.bias", Group.BIAS, (h,), np.zeros(h)),
            ("norm.gain", Group.NORM, (h,), np.ones(h)),
            ("fc2.weight", Group.DECAY, (h, c), rng.normal(0.0, 1.0 / np.sqrt(h), h * c)),
            ("fc2.bias", Group.BIAS, (c,), np.zeros(c)),
        ])

    def _forward(self, params, X):
        a = np.tanh(X @ params["fc1.weight"].array() + params["fc1.bias"].values)
        hid = a * params["norm.gain"].values
        return a, hid, hid @ params["fc2.weight"].array() + params["fc2.bias"].values

    def loss_and_grad(self, params, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        a, hid, logits = self._forward(params, X)
        probs = _softmax(logits)
        dlog = probs.copy()
        dlog[np.arange(y.size), y] -= 1.0
        dlog /= y.size
        dW2 = hid.T @ dlog
        db2 = dlog.sum(axis=0)
        dhid = dlog @ params["fc2.weight"].array().T
        dgain = (dhid * a).sum(axis=0)
        dz1 = dhid * params["norm.gain"].values * (1.0 - a * a)
        dW1 = X.T @ dz1
        db1 = dz1.sum(axis=0)
        grad = np.concatenate([dW1.ravel(), db1, dgain, dW2.ravel(), db2])
        return _cross_entropy(probs, y), grad

    def evaluate(self, params, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        probs = _softmax(self._forward(params, X)[2])
        return {
            "loss": _cross_entropy(probs, y),
            "accuracy": float(np.mean(probs.argmax(axis=1) == y)),
        }


class ToyBoxDetector(ToyModel):
    """Single-object detector: linear box regression plus linear class scores.

    Targets are rows ``[class, cx, cy, w, h]`` with normalized coordinates.
    Every image yields one scored box per class, all at the regressed
    location, which is what the NMS and mAP pipeline consumes.
    """

    name = "box-detector"
    task = "detection"

    def __init__(self, n_features: int, n_classes: int):
        self.n_features = n_features
        self.n_classes = n_classes

    def init_params(self, seed: int = 0) -> ParameterSet:
        d, c = self.n_features, self.n_classes
        return ParameterSet([
            ("box.weight", Group.DECAY, (d, 4), np.zeros(d * 4)),
            ("box.bias", Group.BIAS, (4,), np.array([0.5, 0.5, 0.2, 0.2])),
            ("cls.weight", Group.DECAY, (d, c), np.zeros(d * c)),
            ("cls.bias", Group.BIAS, (c,), np.zeros(c)),
        ])

    def _heads(self, params, X):
        X = np.asarray(X, dtype=np.float64)
        box = X @ params["box.weight"].array() + params["box.bias"].values
        probs = _softmax(X @ params["cls.weight"].array() + params["cls.bias"].values)
        return box, probs

    def loss_and_grad(self, params, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 5)
        labels = y[:, 0].astype(np.int64)
        box, probs = self._heads(params, X)
        n = len(y)
        r = box - y[:, 1:]
        loss = float(np.sum(r * r) / n) + _cross_entropy(probs, labels)
        gbox = 2.0 * r / n
        gcls = probs.copy()
        gcls[np.arange(n), labels] -= 1.0
        gcls /= n
        grad = np.concatenate([(X.T @ gbox).ravel(), gbox.sum(axis=0),
                               (X.T @ gcls).ravel(), gcls.sum(axis=0)])
        return loss, grad

    def detect(self, params, X, image_ids=None):
        from ..detection import Box, yolo_to_corners

        box, probs = self._heads(params, X)
        out = []
        for i in range(len(box)):
            cx, cy, w, h = box[i]
            w, h = max(w, 1e-3), max(h, 1e-3)
            x1, y1, x2, y2 = yolo_to_corners(cx, cy, w, h)
            out.append([Box(x1, y1, x2, y2, k, float(min(max(probs[i, k], 0.0), 1.0)))
                        for k in range(self.n_classes)])
        return out

    def evaluate(self, params, X, y):
        from ..detection import Box, DetectionRecord, mean_ap, nms, yolo_to_corners

        y = np.asarray(y, dtype=np.float64).reshape(-1, 5)
        records = []
        for i, preds in enumerate(self.detect(params, X)):
            x1, y1, x2, y2 = yolo_to_corners(*y[i, 1:])
            gt = Box(x1, y1, x2, y2, int(y[i, 0]))
            records.append(DetectionRecord(str(i), nms(preds), [gt]))
        result = mean_ap(records, classes=range(self.n_classes))
        return {"loss": self.loss(params, X, y), "mAP": result.overall, "mAP50": result.map50}


def build_model(kind: str, n_features: int, n_classes: int = 2, hidden: int = 16) -> ToyModel:
    kind = kind.lower()
    if kind in ("linear", "toy-regression"):
        return LinearRegression(n_features)
    if kind in ("logistic", "toy-classification"):
        return LogisticRegression(n_features, n_classes)
    if kind == "mlp":
        return MLP(n_features, hidden, n_classes)
    if kind in ("box-detector", "detection-fixture"):
        return ToyBoxDetector(n_features, n_classes)
    raise ValueError(f"unknown toy model {kind!r}")
