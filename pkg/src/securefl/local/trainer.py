"""Client-side local training.

Two regimes are supported.  ``FEDAVG_LOCAL`` is plain mini-batch SGD at a
fixed rate.  ``FEDOPT_LOCAL`` uses the per-group one-cycle schedule, Nesterov
momentum and coupled weight decay on the ``DECAY`` group only.  Momentum
buffers stay on the client between rounds and are never aggregated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergedLoss, EmptyDataset
from ..params import Group, ParameterSet, check_compatible
from .models import ToyModel
from .schedule import LocalMode, ScheduleState, TrainConfig, fixed_schedule, schedule_at


@dataclass
class LocalModel:
    """A toy network, its current parameters and the client's private data."""

    net: ToyModel
    params: ParameterSet
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)

    @property
    def n_samples(self) -> int:
        return int(len(self.y))

    def reparameterize(self) -> ParameterSet:
        return self.net.reparameterize(self.params)


@dataclass(frozen=True)
class RoundResult:
    params: ParameterSet
    sample_count: int
    schedule: ScheduleState
    loss: float
    momentum_buffer: np.ndarray | None = None
    epoch_losses: tuple[float, ...] = field(default_factory=tuple)


def _group_rates(params: ParameterSet, lrs: dict[Group, float]) -> np.ndarray:
    rates = np.empty(params.numel, dtype=np.float64)
    for g in Group:
        rates[params.group_mask(g)] = lrs[g]
    return rates


def epoch_rng(seed: int, global_epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(global_epoch)])


def train_round(model: LocalModel, cfg: TrainConfig, sched: ScheduleState, seed: int,
                momentum_buffer: np.ndarray | None = None, epochs: int | None = None) -> RoundResult:
    """Run ``epochs`` (default ``cfg.epochs_per_round``) epochs of local SGD.

    Shuffling for global epoch ``e`` is drawn from ``(seed, e)`` so splitting a
    round into single-epoch calls reproduces it exactly.

    Raises:
        EmptyDataset: the client holds no samples.
        DivergedLoss: a batch loss or the parameters became non-finite.
    """
    n = model.n_samples
    if n == 0:
        raise EmptyDataset("client dataset is empty")
    epochs = cfg.epochs_per_round if epochs is None else epochs
    params = model.params
    w = params.flat.copy()
    decay = params.group_mask(Group.DECAY)
    fedopt = cfg.mode is LocalMode.FEDOPT_LOCAL
    buf = None
    if fedopt:
        if momentum_buffer is None:
            buf = np.zeros_like(w)
        else:
            buf = np.array(momentum_buffer, dtype=np.float64)
            if buf.shape != w.shape:
                raise ValueError("momentum buffer does not match the model layout")
    X, y = model.X, model.y
    B = cfg.batch_size
    epoch_losses = []
    total_loss = 0.0
    total_seen = 0
    lrs, momentum = fixed_schedule(cfg)
    for k in range(epochs):
        e = sched.global_epoch + k
        if fedopt:
            lrs, momentum = schedule_at(cfg, e)
        rates = _group_rates(params, lrs)
        perm = epoch_rng(seed, e).permutation(n)
        ep_loss = 0.0
        for start in range(0, n, B):
            idx = perm[start:start + B]
            loss, g = model.net.loss_and_grad(params.with_flat(w), X[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at global epoch {e}")
            if fedopt:
                g = g.copy()
                g[decay] += cfg.weight_decay * w[decay]
                buf = momentum * buf + g
                w = w - rates * (g + momentum * buf)
            else:
                w = w - rates * g
            ep_loss += loss * len(idx)
        if not np.all(np.isfinite(w)):
            raise DivergedLoss(f"non-finite parameters after global epoch {e}")
        epoch_losses.append(ep_loss / n)
        total_loss += ep_loss
        total_seen += n
    new_sched = ScheduleState(sched.global_epoch + epochs, tuple(lrs[g] for g in Group), momentum)
    return RoundResult(
        params=params.with_flat(w),
        sample_count=n,
        schedule=new_sched,
        loss=total_loss / total_seen if total_seen else 0.0,
        momentum_buffer=buf,
        epoch_losses=tuple(epoch_losses),
    )


class LocalClient:
    """Persistent client state across rounds: data, schedule and momentum."""

    def __init__(self, client_id: int, net: ToyModel, X, y, cfg: TrainConfig, seed: int = 0):
        self.client_id = client_id
        self.net = net
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y)
        self.cfg = cfg
        self.seed = seed
        self.schedule = ScheduleState(0)
        self.momentum_buffer = None

    @property
    def n_samples(self) -> int:
        return int(len(self.y))

    def update(self, global_params: ParameterSet) -> RoundResult:
        if self.momentum_buffer is not None and self.momentum_buffer.size != global_params.numel:
            raise ValueError("global model layout changed between rounds")
        model = LocalModel(self.net, global_params, self.X, self.y)
        result = train_round(model, self.cfg, self.schedule, self.seed, self.momentum_buffer)
        check_compatible(global_params, result.params)
        self.schedule = result.schedule
        self.momentum_buffer = result.momentum_buffer
        return result


def reparameterize(model: LocalModel) -> ParameterSet:
    return model.reparameterize()
