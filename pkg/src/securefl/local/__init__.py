"""Client-side training: schedules, toy models and the local SGD loop."""

from .models import MLP, LinearRegression, LogisticRegression, ToyBoxDetector, ToyModel, build_model
from .schedule import LocalMode, ScheduleState, TrainConfig, schedule_at
from .trainer import LocalClient, LocalModel, RoundResult, reparameterize, train_round

__all__ = [
    "LinearRegression",
    "LocalClient",
    "LocalMode",
    "LocalModel",
    "LogisticRegression",
    "MLP",
    "RoundResult",
    "ScheduleState",
    "ToyBoxDetector",
    "ToyModel",
    "TrainConfig",
    "build_model",
    "reparameterize",
    "schedule_at",
    "train_round",
]
