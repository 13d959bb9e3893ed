"""Server-side aggregation and optimizers.

Clients send weight-update vectors ``delta_i = w - w_i``.  The server forms the
sample-weighted mean of those deltas (the pseudo-gradient) and feeds it to a
server optimizer.  Plain averaging and server momentum follow

    v <- beta * v + delta
    w <- w - eta * v

The adaptive variants keep a first moment ``m`` and a second moment ``s`` and
step with ``w <- w - eta * m / (sqrt(s) + tau)`` without bias correction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyRound, InvalidHyperparameter, ShapeMismatch
from .params import ParameterSet, axpy, check_compatible


class OptimizerKind(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDAVGM = "fedavgm"
    FEDADAGRAD = "fedadagrad"
    FEDADAM = "fedadam"
    FEDYOGI = "fedyogi"

    @classmethod
    def parse(cls, value) -> "OptimizerKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidHyperparameter(f"unknown server optimizer {value!r}") from None


ADAPTIVE = (OptimizerKind.FEDADAGRAD, OptimizerKind.FEDADAM, OptimizerKind.FEDYOGI)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: ParameterSet
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"client {self.client_id}: sample_count must be >= 1")


@dataclass(frozen=True)
class ServerOptimizerState:
    kind: OptimizerKind
    eta: float = 1.0
    beta: float = 0.0
    beta2: float = 0.99
    tau: float = 1e-3
    velocity: ParameterSet = field(default_factory=ParameterSet)
    second_moment: ParameterSet = field(default_factory=ParameterSet)
    step: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.beta < 1.0:
            raise InvalidHyperparameter(f"beta must lie in [0, 1), got {self.beta}")
        if not self.eta > 0.0:
            raise InvalidHyperparameter(f"eta must be positive, got {self.eta}")
        if self.kind in ADAPTIVE:
            if not self.tau > 0.0:
                raise InvalidHyperparameter(f"tau must be positive, got {self.tau}")
            if not 0.0 <= self.beta2 < 1.0:
                raise InvalidHyperparameter(f"beta2 must lie in [0, 1), got {self.beta2}")


def init_state(kind, w: ParameterSet, eta: float = 1.0, beta: float | None = None,
               beta2: float = 0.99, tau: float = 1e-3) -> ServerOptimizerState:
    """Zero-slot optimizer state shaped like ``w``.

    ``beta`` defaults to 0.9 for the adaptive kinds and 0 otherwise.
    """
    kind = OptimizerKind.parse(kind)
    if beta is None:
        beta = 0.9 if kind in ADAPTIVE else 0.0
    state = ServerOptimizerState(
        kind=kind, eta=float(eta), beta=float(beta), beta2=float(beta2), tau=float(tau),
        velocity=w.zeros_like(), second_moment=w.zeros_like(),
    )
    state.validate()
    return state


def aggregate(updates: Sequence[ClientUpdate]) -> ParameterSet:
    """Sample-weighted mean of the client deltas."""
    if not updates:
        raise EmptyRound("no client updates received this round")
    ref = updates[0].delta
    for u in updates[1:]:
        try:
            check_compatible(ref, u.delta)
        except ShapeMismatch as exc:
            raise ShapeMismatch(f"client {u.client_id}: {exc}") from None
    n = sum(int(u.sample_count) for u in updates)
    # sorted so that the floating-point sum is independent of arrival order
    ordered = sorted(updates, key=lambda u: u.client_id)
    acc = np.zeros_like(ref.flat)
    for u in ordered:
        acc += (u.sample_count / n) * u.delta.flat
    return ref.with_flat(acc)


def weighted_mean(values: Sequence[float], counts: Sequence[int]) -> float:
    n = sum(counts)
    return float(sum((c / n) * v for v, c in zip(values, counts)))


def server_step(state: ServerOptimizerState, w: ParameterSet,
                pseudo_grad: ParameterSet) -> tuple[ParameterSet, ServerOptimizerState]:
    """Apply one server optimizer step; returns ``(new_weights, new_state)``."""
    state.validate()
    check_compatible(w, pseudo_grad)
    check_compatible(w, state.velocity)
    kind = state.kind

    if kind is OptimizerKind.FEDAVG:
        return axpy(w, -1.0, pseudo_grad), replace(state, step=state.step + 1)

    if kind is OptimizerKind.FEDAVGM:
        # beta == 0 takes v = delta directly so signed zeros match FedAvg bit for bit
        v = pseudo_grad if state.beta == 0.0 else pseudo_grad.with_flat(state.beta * state.velocity.flat + pseudo_grad.flat)
        return axpy(w, -state.eta, v), replace(state, velocity=v, step=state.step + 1)

    check_compatible(w, state.second_moment)
    d = pseudo_grad.flat
    m = state.beta * state.velocity.flat + (1.0 - state.beta) * d
    s_prev = state.second_moment.flat
    d2 = d * d
    if kind is OptimizerKind.FEDADAGRAD:
        s = s_prev + d2
    elif kind is OptimizerKind.FEDADAM:
        s = state.beta2 * s_prev + (1.0 - state.beta2) * d2
    else:
        s = s_prev - (1.0 - state.beta2) * d2 * np.sign(s_prev - d2)
    step = m / (np.sqrt(s) + state.tau)
    new_w = w.with_flat(w.flat - state.eta * step)
    new_state = replace(
        state,
        velocity=w.with_flat(m),
        second_moment=w.with_flat(s),
        step=state.step + 1,
    )
    return new_w, new_state
