"""Synchronous federation over an encrypted transport.

Per round the server derives a fresh AES key, broadcasts the sealed global
model, scatters the key wrapped for each client, gathers one sealed update
per client, aggregates them, applies the server optimizer and evaluates the
re-parameterized model on its own data.  Round 0 ships the full checkpoint
(parameters, buffers and metadata); later rounds ship learnable parameters
only.  Every client participates in every round; a missing or failed client
aborts the run.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import asdict, dataclass, field


from . import crypto
from .crypto import KeyPair, NonceRegistry, PayloadKind, RoundKey, SeededRandom, SystemRandom
from .errors import AuthFailure, ClientFailure, EmptyEvalSet, FederationError, Timeout
from .local.models import ToyModel
from .local.schedule import TrainConfig
from .local.trainer import LocalClient
from .optim import ClientUpdate, aggregate, init_state, server_step, weighted_mean
from .params import Checkpoint, ParameterSet, decode_checkpoint, decode_fp16, encode_checkpoint, encode_fp16
from .transport import Transport, _Closed, broadcast, gather, scatter

log = logging.getLogger(__name__)

SERVER_ID = 0
_UPDATE = struct.Struct("<BQd")
_STATUS_OK = 0
_STATUS_FAILED = 1


def sender_of(client_id: int) -> int:
    return client_id + 1


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int
    train: TrainConfig
    optimizer: str = "fedavg"
    eta: float = 1.0
    beta: float | None = None
    beta2: float = 0.99
    tau: float = 1e-3
    seed: int = 0
    timeout: float = 60.0
    deterministic_crypto: bool = False
    rsa_bits: int = crypto.RSA_BITS

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @property
    def rounds(self) -> int:
        return self.train.rounds


@dataclass
class ClientRoundStats:
    client_id: int
    n_samples: int
    loss: float
    bytes_sent: int
    bytes_received: int
    model_bytes: int


@dataclass
class RoundRecord:
    round: int
    clients: list[ClientRoundStats]
    train_loss: float
    metrics: dict[str, float]
    wall_time: float = 0.0

    @property
    def participants(self) -> list[int]:
        return [c.client_id for c in self.clients]

    def to_dict(self, with_time: bool = True) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(
            round=int(d["round"]),
            clients=[ClientRoundStats(**c) for c in d["clients"]],
            train_loss=float(d["train_loss"]),
            metrics={k: float(v) for k, v in d["metrics"].items()},
            wall_time=float(d.get("wall_time", 0.0)),
        )


@dataclass
class FederationResult:
    best: Checkpoint
    records: list[RoundRecord]
    final_params: ParameterSet
    transcript: list[tuple] = field(default_factory=list)
    best_round: int = 0
    best_score: float = float("-inf")


def score_of(metrics: dict[str, float]) -> float:
    """Best-checkpoint criterion: mAP when the task reports it, else -loss."""
    if "mAP" in metrics:
        return metrics["mAP"]
    return -metrics["loss"]


def evaluate_global(net: ToyModel, w_r: ParameterSet, X, y) -> dict[str, float]:
    if len(y) == 0:
        raise EmptyEvalSet("the server holds no evaluation samples")
    return net.evaluate(w_r, X, y)


def encode_update(n_samples: int, loss: float, delta: ParameterSet) -> bytes:
    return _UPDATE.pack(_STATUS_OK, n_samples, loss) + encode_fp16(delta)


def encode_failure(reason: str) -> bytes:
    return _UPDATE.pack(_STATUS_FAILED, 0, float("nan")) + reason.encode("utf-8", "replace")


def decode_update(payload: bytes, client_id: int) -> tuple[int, float, ParameterSet]:
    status, n, loss = _UPDATE.unpack_from(payload, 0)
    if status != _STATUS_OK:
        raise ClientFailure(client_id, payload[_UPDATE.size:].decode("utf-8", "replace"))
    return n, loss, decode_fp16(payload[_UPDATE.size:])


class ClientWorker:
    """Client side of the protocol, driven from its own thread."""

    def __init__(self, local: LocalClient, endpoint, rounds: int, rng, registry: NonceRegistry,
                 rsa_bits: int = crypto.RSA_BITS, poll: float = 0.2):
        self.local = local
        self.endpoint = endpoint
        self.rounds = rounds
        self.rng = rng
        self.registry = registry
        self.rsa_bits = rsa_bits
        self.poll = poll
        self.stop = threading.Event()
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._run, name=f"client-{local.client_id}", daemon=True)

    @property
    def client_id(self) -> int:
        return self.local.client_id

    def start(self) -> None:
        self.thread.start()

    def _recv(self) -> bytes:
        while not self.stop.is_set():
            try:
                return self.endpoint.recv(self.poll)
            except Timeout:
                continue
        raise _Closed()

    def _run(self) -> None:
        try:
            keys = KeyPair.generate(self.rsa_bits)
            hello = crypto.plain_envelope(PayloadKind.PUBKEY, 0, sender_of(self.client_id), keys.public_bytes())
            self.endpoint.send(hello.to_bytes())
            for t in range(self.rounds):
                self._round(t, keys)
        except _Closed:
            pass
        except BaseException as exc:  # reported to the server through the timeout path
            self.error = exc
            log.exception("client %d crashed", self.client_id)

    def _round(self, t: int, keys: KeyPair) -> None:
        model_env = crypto.EncryptedEnvelope.from_bytes(self._recv())
        key_env = crypto.EncryptedEnvelope.from_bytes(self._recv())
        if key_env.kind is not PayloadKind.WRAPPED_KEY or model_env.kind is not PayloadKind.GLOBAL_MODEL:
            raise FederationError(f"client {self.client_id}: unexpected message order in round {t}")
        rk = crypto.unwrap_key(key_env.ciphertext, keys.private, key_env.round)
        _, payload = crypto.open_envelope(model_env, rk)
        if t == 0:
            w = decode_checkpoint(payload).params
        else:
            w = decode_fp16(payload)
        try:
            result = self.local.update(w)
            delta = w.with_flat(w.flat - result.params.flat)
            body = encode_update(result.sample_count, result.loss, delta)
        except FederationError as exc:
            body = encode_failure(f"{type(exc).__name__}: {exc}")
        env = crypto.seal(rk, PayloadKind.CLIENT_UPDATE, body, self.rng,
                          sender_id=sender_of(self.client_id), registry=self.registry)
        self.endpoint.send(env.to_bytes())


def _open_update(data: bytes, rk: RoundKey, client_id: int, t: int):
    try:
        kind, payload = crypto.open_wire(data, rk)
    except AuthFailure as exc:
        raise AuthFailure(str(exc), sender_id=client_id) from exc
    env = crypto.EncryptedEnvelope.from_bytes(data)
    if kind is not PayloadKind.CLIENT_UPDATE or env.sender_id != sender_of(client_id):
        raise AuthFailure(f"unexpected {kind.name} from sender {env.sender_id} in round {t}",
                          sender_id=client_id)
    return decode_update(payload, client_id)


def run_federation(cfg: FederationConfig, transport: Transport, net: ToyModel,
                   clients: list[LocalClient], server_X, server_y,
                   init: Checkpoint | None = None) -> FederationResult:
    """Execute ``cfg.rounds`` synchronous rounds; return the best checkpoint.

    Raises:
        ClientFailure: a client timed out or reported a failed round.
        AuthFailure: an update failed authentication (``sender_id`` set).
    """
    if len(clients) != cfg.n_clients or transport.n_clients != cfg.n_clients:
        raise ValueError("client count, transport size and config disagree")
    if len(server_y) == 0:
        raise EmptyEvalSet("the server holds no evaluation samples")
    registry = NonceRegistry()
    if cfg.deterministic_crypto:
        server_rng = SeededRandom(cfg.seed, "server")
        client_rngs = [SeededRandom(cfg.seed, f"client{i}") for i in range(cfg.n_clients)]
    else:
        server_rng = SystemRandom()
        client_rngs = [SystemRandom() for _ in range(cfg.n_clients)]

    if init is None:
        init = Checkpoint(net.init_params(cfg.seed), {"model": net.name, "round": "0"}, net.buffers())
    w = init.params
    state = init_state(cfg.optimizer, w, eta=cfg.eta, beta=cfg.beta, beta2=cfg.beta2, tau=cfg.tau)

    workers = [ClientWorker(c, transport.endpoint(c.client_id), cfg.rounds, client_rngs[i], registry, cfg.rsa_bits)
               for i, c in enumerate(clients)]
    for i, c in enumerate(clients):
        if c.client_id != i:
            raise ValueError("clients must be ordered by id 0..m-1")
    transcript: list[tuple] = []
    records: list[RoundRecord] = []
    best = None
    best_score = float("-inf")
    best_round = -1
    for wk in workers:
        wk.start()
    try:
        hellos = _gather(transport, cfg, workers)
        pubkeys = {}
        for i, data in hellos.items():
            env = crypto.EncryptedEnvelope.from_bytes(data)
            if env.kind is not PayloadKind.PUBKEY or env.sender_id != sender_of(i):
                raise ClientFailure(i, "registration message missing")
            pubkeys[i] = crypto.load_public_key(env.ciphertext)
        transcript.append(("register", -1, len(pubkeys)))

        for t in range(cfg.rounds):
            t0 = time.perf_counter()
            rk = crypto.gen_round_key(t, server_rng)
            if t == 0:
                plain = encode_checkpoint(Checkpoint(w, dict(init.meta, round="0"), init.buffers))
            else:
                plain = encode_fp16(w)
            model_env = crypto.seal(rk, PayloadKind.GLOBAL_MODEL, plain, server_rng,
                                    sender_id=SERVER_ID, registry=registry).to_bytes()
            broadcast(transport, model_env)
            transcript.append(("broadcast", t, len(model_env)))
            wrapped = {i: crypto.plain_envelope(PayloadKind.WRAPPED_KEY, t, SERVER_ID,
                                                crypto.wrap_key(rk, pubkeys[i])).to_bytes()
                       for i in range(cfg.n_clients)}
            scatter(transport, wrapped)
            transcript.append(("scatter", t, cfg.n_clients))

            replies = _gather(transport, cfg, workers)
            updates = []
            stats = []
            for i in range(cfg.n_clients):
                data = replies[i]
                transcript.append(("gather", t, i))
                n_i, loss_i, delta = _open_update(data, rk, i, t)
                updates.append(ClientUpdate(i, delta, n_i))
                stats.append(ClientRoundStats(i, n_i, loss_i, len(model_env) + len(wrapped[i]),
                                              len(data), len(model_env)))
            registry.forget(rk.key_id)

            pseudo = aggregate(updates)
            w, state = server_step(state, w, pseudo)
            w_r = net.reparameterize(w)
            metrics = evaluate_global(net, w_r, server_X, server_y)
            rec = RoundRecord(
                round=t,
                clients=stats,
                train_loss=weighted_mean([s.loss for s in stats], [s.n_samples for s in stats]),
                metrics=metrics,
                wall_time=time.perf_counter() - t0,
            )
            records.append(rec)
            score = score_of(metrics)
            if score > best_score:
                best_score, best_round = score, t
                meta = dict(init.meta, round=str(t), score=repr(score))
                best = Checkpoint(w_r, meta, init.buffers)
            log.info("round %d: train_loss=%.6g %s", t, rec.train_loss, metrics)
    finally:
        for wk in workers:
            wk.stop.set()
        transport.close()
        for wk in workers:
            wk.thread.join(timeout=5.0)
    return FederationResult(best, records, w, transcript, best_round, best_score)


def _gather(transport: Transport, cfg: FederationConfig, workers: list[ClientWorker]) -> dict[int, bytes]:
    try:
        return gather(transport, cfg.timeout)
    except Timeout as exc:
        cid = exc.client_ids[0]
        err = workers[cid].error
        reason = f"no message within {cfg.timeout}s" + (f" ({type(err).__name__}: {err})" if err else "")
        raise ClientFailure(cid, reason) from exc
