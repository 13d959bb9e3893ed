"""Encrypted federated optimization: FP16 transport, server optimizers,
local schedules, data splits and detection metrics."""

__version__ = "0.1.0"
