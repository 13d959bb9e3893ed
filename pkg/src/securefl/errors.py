"""Exception hierarchy shared by every subsystem."""


class FederationError(Exception):
    """Base class for all package errors."""


# parameter store
class CodecError(FederationError):
    pass


class NonFiniteValue(CodecError):
    pass


class TruncatedPayload(CodecError):
    pass


class BadMagic(CodecError):
    pass


class UnknownVersion(CodecError):
    pass


class ShapeMismatch(FederationError):
    pass


# server optimizer
class EmptyRound(FederationError):
    pass


class InvalidHyperparameter(FederationError, ValueError):
    pass


# local training
class EpochOutOfRange(FederationError, ValueError):
    pass


class EmptyDataset(FederationError):
    pass


class DivergedLoss(FederationError):
    pass


# secure channel
class CryptoError(FederationError):
    pass


class RngFailure(CryptoError):
    pass


class KeyTooSmall(CryptoError):
    pass


class EncryptFailure(CryptoError):
    pass


class DecryptFailure(CryptoError):
    pass


class NonceReuseDetected(CryptoError):
    pass


class AuthFailure(CryptoError):
    def __init__(self, message="authentication tag mismatch", sender_id=None):
        if sender_id is not None:
            message = f"{message} (sender {sender_id})"
        super().__init__(message)
        self.sender_id = sender_id


class RoundMismatch(AuthFailure):
    """Envelope round differs from the key's round (stale key or replay)."""

    def __init__(self, message, sender_id=None):
        super().__init__(message, sender_id)


# protocol
class ClientFailure(FederationError):
    def __init__(self, client_id, reason):
        super().__init__(f"client {client_id} failed: {reason}")
        self.client_id = client_id
        self.reason = reason


class Timeout(FederationError):
    def __init__(self, client_ids, seconds):
        ids = ", ".join(str(c) for c in client_ids)
        super().__init__(f"no message from client(s) {ids} within {seconds}s")
        self.client_ids = list(client_ids)
        self.seconds = seconds


class EmptyEvalSet(FederationError):
    pass


# partitioning
class EmptyManifest(FederationError):
    pass


class UnmatchedSamples(FederationError):
    def __init__(self, sample_ids):
        preview = ", ".join(map(str, list(sample_ids)[:10]))
        super().__init__(f"{len(sample_ids)} sample(s) match no rule: {preview}")
        self.sample_ids = list(sample_ids)


class OverlappingRules(FederationError):
    pass


# detection metrics
class NoGroundTruth(FederationError):
    pass


class EmptyRecords(FederationError):
    pass


# experiment configuration
class ConfigError(FederationError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
