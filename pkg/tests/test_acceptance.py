"""End-to-end acceptance checks, one criterion per marker.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_fixture, regression_federation
from oracles import box_iou, brute_force_ap, naive_weighted_sum, normal_equations
from securefl.crypto import (
    ENVELOPE_OVERHEAD,
    NONCE_LEN,
    EncryptedEnvelope,
    NonceRegistry,
    PayloadKind,
    RoundKey,
    SeededRandom,
    derive_secret,
    gen_round_key,
    open_wire,
    seal,
)
from securefl.datasets import synthetic_regression, to_arrays
from securefl.detection import COCO_THRESHOLDS, Box, DetectionRecord, average_precision, iou, mean_ap
from securefl.errors import AuthFailure
from securefl.experiment import cmd_grid, cmd_run, cmd_split, load_config
from securefl.local import LinearRegression, LocalClient, TrainConfig
from securefl.local.schedule import schedule_at
from securefl.optim import ClientUpdate, aggregate, init_state, server_step
from securefl.params import Checkpoint, Group, ParameterSet, encode_checkpoint, encode_fp16, encoded_size
from securefl.partition import SERVER, check_partition, match, split_by_rules, split_iid
from securefl.protocol import FederationConfig, run_federation
from securefl.transport import make_transport

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEALED = (PayloadKind.GLOBAL_MODEL, PayloadKind.CLIENT_UPDATE)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# 1 ---------------------------------------------------------------------------


def _random_params(rng):
    entries = []
    for i in range(int(rng.integers(1, 4))):
        shape = [int(d) for d in rng.integers(1, 6, int(rng.integers(0, 3)))]
        entries.append((f"p{i}", Group(int(rng.integers(3))), shape, rng.normal(size=int(np.prod(shape)))))
    return ParameterSet(entries)


@criterion(1, "FedAvgM(beta=0, eta=1) is bitwise FedAvg")
def test_c1_fedavg_reduction(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    steps = 0
    for _ in range(120):
        w0 = _random_params(rng)
        a, sa = w0, init_state("fedavg", w0)
        b, sb = w0, init_state("fedavgm", w0, eta=1.0, beta=0.0)
        for _ in range(int(rng.integers(1, 25))):
            ups = []
            for c in range(int(rng.integers(1, 8))):
                d = w0.with_flat(rng.normal(size=w0.numel) * 10.0 ** rng.uniform(-4, 2))
                if rng.random() < 0.2:
                    d = d.with_flat(np.where(rng.random(w0.numel) < 0.5, -0.0, d.flat))
                ups.append(ClientUpdate(c, d, int(rng.integers(1, 1000))))
            g = aggregate(ups)
            a, sa = server_step(sa, a, g)
            b, sb = server_step(sb, b, g)
            assert a.flat.tobytes() == b.flat.tobytes()
            steps += 1
    # and through the whole encrypted protocol
    for seed in range(3):
        x, _, _ = regression_federation(m=3, n=60, rounds=4, epochs=1, seed=seed, optimizer="fedavg",
                                        deterministic_crypto=True)
        y, _, _ = regression_federation(m=3, n=60, rounds=4, epochs=1, seed=seed, optimizer="fedavgm",
                                        eta=1.0, beta=0.0, deterministic_crypto=True)
        assert x.final_params.flat.tobytes() == y.final_params.flat.tobytes()
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    record_property("detail", f"120 sequences, {steps} steps, 3 federations, {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------


@criterion(2, "aggregate matches the naive weighted-sum loop")
def test_c2_aggregation_oracle(record_property):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        m, k = int(rng.integers(1, 11)), int(rng.integers(1, 101))
        deltas = [rng.normal(size=k) * 10.0 ** rng.uniform(-3, 3) for _ in range(m)]
        counts = [int(n) for n in rng.integers(1, 10_000, m)]
        ups = [ClientUpdate(i, ParameterSet([("w", Group.DECAY, [k], d)]), n)
               for i, (d, n) in enumerate(zip(deltas, counts))]
        got = aggregate(ups).flat
        want = np.array(naive_weighted_sum(deltas, counts))
        rel = np.abs(got - want) / np.abs(want)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-12
    record_property("detail", f"1000 instances, worst relative error {worst:.2e}")


# 3 ---------------------------------------------------------------------------


@criterion(3, "convex convergence to the least-squares optimum")
def test_c3_iid_convergence(record_property):
    start = time.perf_counter()
    res, _, (_, _, X, y) = regression_federation(m=5, n=200, rounds=30, epochs=5, batch=32)
    _, opt = normal_equations(X, y)
    final = res.records[-1].metrics["loss"]
    assert abs(final - opt) <= 1e-3
    assert time.perf_counter() - start < 60.0
    record_property("detail", f"IID loss {final:.6f} vs optimum {opt:.6f}")


@criterion(3, "convex convergence to the least-squares optimum")
def test_c3_noniid_convergence(record_property):
    start = time.perf_counter()
    samples = synthetic_regression(200, 5, seed=0, groups=5, shift=1.0)
    split = split_by_rules(samples, [(c, match({"location": f"site{c}"})) for c in range(5)])
    by_id = {s.sample_id: s for s in samples}
    cfg = TrainConfig(epochs_per_round=5, batch_size=32, rounds=30, warmup_epochs=0, mode="fedavg")
    net = LinearRegression(5)
    clients = [LocalClient(c, net, *to_arrays([by_id[i] for i in split.client_ids[c]], "regression"), cfg, seed=c)
               for c in range(5)]
    # the feature means really differ between clients
    means = [c.X.mean() for c in clients]
    assert max(means) - min(means) > 3.0
    X, y = to_arrays(samples, "regression")
    res = run_federation(FederationConfig(5, cfg), make_transport("inproc", 5), net, clients, X, y)
    _, opt = normal_equations(X, y)
    final = res.records[-1].metrics["loss"]
    assert final < 1.1 * opt
    assert time.perf_counter() - start < 60.0
    record_property("detail", f"non-IID ratio {final / opt:.4f}")


# 4 ---------------------------------------------------------------------------

SCRYPT_VECTOR = bytes.fromhex(
    "7023bdcb3afd7348461c06cd81fd38ebfda8fbba904f8e3ea9b543f6545da1f2"
    "d5432955613f0fcf62d49705242a9af9e61e85dc0d651e40dfcf017b45575887"
)


@criterion(4, "crypto suite")
def test_c4_roundtrip_and_tampering(record_property):
    rng = np.random.default_rng(404)
    rk = gen_round_key(5, SeededRandom(404, "c4"))
    reg = NonceRegistry()
    flips = 0
    for i in range(1000):
        payload = rng.bytes(int(rng.integers(1, 2048)))
        kind = list(PayloadKind)[i % len(PayloadKind)]
        wire = seal(rk, kind, payload, sender_id=int(rng.integers(0, 6)), registry=reg).to_bytes()
        assert open_wire(wire, rk) == (kind, payload)
        # one random flip in each region: header, nonce, tag, length field, ciphertext
        hdr_end = 12
        regions = [(0, hdr_end), (hdr_end, hdr_end + NONCE_LEN), (hdr_end + NONCE_LEN, hdr_end + NONCE_LEN + 16),
                   (ENVELOPE_OVERHEAD - 4, ENVELOPE_OVERHEAD), (ENVELOPE_OVERHEAD, len(wire))]
        for lo, hi in regions:
            bit = int(rng.integers(lo * 8, hi * 8))
            bad = bytearray(wire)
            bad[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(AuthFailure):
                open_wire(bytes(bad), rk)
            flips += 1
    # exhaustive on a short envelope
    wire = seal(rk, PayloadKind.CLIENT_UPDATE, b"update-bytes", sender_id=3, registry=reg).to_bytes()
    for bit in range(len(wire) * 8):
        bad = bytearray(wire)
        bad[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(AuthFailure):
            open_wire(bytes(bad), rk)
        flips += 1
    assert derive_secret(b"pleaseletmein", b"SodiumChloride", length=64) == SCRYPT_VECTOR
    record_property("detail", f"1000 roundtrips, {flips} tampered envelopes all rejected, scrypt vector ok")


@criterion(4, "crypto suite")
def test_c4_nonces_unique_over_50_rounds(record_property):
    pairs = []
    for deterministic in (True, False):
        res, t, _ = regression_federation(m=2, n=30, rounds=50, epochs=1, capture=True,
                                          deterministic_crypto=deterministic, rsa_bits=2048)
        # a broadcast is one envelope delivered to every client
        distinct = list(dict.fromkeys(b for _, _, b in t.payloads))
        sealed = [e for e in map(EncryptedEnvelope.from_bytes, distinct) if e.kind in SEALED]
        assert len(sealed) == 50 * (1 + 2)
        keys = [(e.round, e.nonce) for e in sealed]
        assert len(set(keys)) == len(keys)
        pairs.append(len(keys))
    record_property("detail", f"{pairs[0]} (round, nonce) pairs unique per run, seeded and system RNG")


# 5 ---------------------------------------------------------------------------


@criterion(5, "wire accounting for a 36.5M-parameter model")
def test_c5_wire_accounting(record_property):
    n = 36_500_000
    rng = np.random.default_rng(5)
    sizes = {"backbone.conv.weight": 30_000_000, "head.conv.weight": 6_400_000, "head.conv.bias": 100_000}
    assert sum(sizes.values()) == n
    groups = {"backbone.conv.weight": Group.DECAY, "head.conv.weight": Group.DECAY, "head.conv.bias": Group.BIAS}
    w = ParameterSet([(k, groups[k], [v], rng.normal(0.0, 0.05, v)) for k, v in sizes.items()])
    blob = encode_fp16(w)
    assert len(blob) == encoded_size(w)
    rk = RoundKey(1, b"k" * 32, b"s" * 16)
    env = seal(rk, PayloadKind.GLOBAL_MODEL, blob, SeededRandom(0, "c5"), registry=NonceRegistry()).to_bytes()
    values = 2 * n
    assert values == 73_000_000
    overhead = (len(env) - values) / values
    assert 0 < overhead < 1e-3
    # round 0 additionally ships the non-learnable buffers
    buffers = ParameterSet([("neck.bn.running_mean", Group.NORM, [65_536], np.zeros(65_536)),
                            ("neck.bn.running_var", Group.NORM, [65_536], np.ones(65_536))])
    round0 = len(encode_checkpoint(Checkpoint(w, {"model": "synthetic", "round": "0"}, buffers)))
    assert len(blob) < round0
    # and in a real federation every later round is strictly smaller than round 0
    res, _, _ = regression_federation(m=2, n=30, rounds=4, epochs=1)
    per_round = [r.clients[0].model_bytes for r in res.records]
    assert all(b < per_round[0] for b in per_round[1:])
    record_property("detail", f"payload {len(env)} B for {values} value bytes, overhead {overhead:.2e}; "
                              f"round 0 {round0} B vs later {len(blob)} B")


# 6 ---------------------------------------------------------------------------


@criterion(6, "local schedule endpoints")
def test_c6_schedule_endpoints(record_property):
    cfg = TrainConfig()  # R=30, E=5, warm-up 30 epochs
    lrs, mom = schedule_at(cfg, 0)
    assert abs(lrs[Group.BIAS] - 0.1) <= 1e-9 and abs(mom - 0.8) <= 1e-9
    lrs, mom = schedule_at(cfg, cfg.warmup_epochs)
    assert all(abs(v - 0.01) <= 1e-9 for v in lrs.values()) and abs(mom - 0.937) <= 1e-9
    lrs, mom = schedule_at(cfg, cfg.total_epochs)
    assert all(abs(v - 0.001) <= 1e-9 for v in lrs.values())
    for e in range(cfg.warmup_epochs + 1):
        _, m_e = schedule_at(cfg, e)
        assert abs(m_e - (0.8 + (0.937 - 0.8) * e / cfg.warmup_epochs)) <= 1e-9
    # continuity at the boundary: the warm-up line and the cosine branch meet
    before, _ = schedule_at(cfg, cfg.warmup_epochs - 1)
    at, _ = schedule_at(cfg, cfg.warmup_epochs)
    after, _ = schedule_at(cfg, cfg.warmup_epochs + 1)
    for g in Group:
        assert abs(at[g] - before[g]) <= abs(0.01 - 0.1) / cfg.warmup_epochs + 1e-12
        assert abs(after[g] - at[g]) < 1e-4
    record_property("detail", "0.1 / 0.01 / 0.001, momentum linear 0.8 to 0.937")


# 7 ---------------------------------------------------------------------------


@criterion(7, "detection metrics against the brute-force oracle")
def test_c7_detection_oracle(record_property):
    rng = np.random.default_rng(707)
    fixtures = checked = 0
    worst = 0.0
    while fixtures < 200:
        images, recs = random_fixture(rng, n_images=int(rng.integers(1, 6)), max_boxes=10, n_classes=3)
        n_boxes = sum(len(p) + len(g) for p, g in images)
        assert n_boxes <= 10
        if not any(g for _, g in images):
            continue
        fixtures += 1
        for k in range(3):
            for t in COCO_THRESHOLDS:
                want = brute_force_ap(images, k, t)
                if want is None:
                    continue
                worst = max(worst, abs(average_precision(recs, k, t) - want))
                checked += 1
    assert worst <= 1e-10
    g = Box(0, 0, 1, 1, 0)
    worked = [DetectionRecord("a", [Box(0, 0, 1, 1, 0, 0.9), Box(5, 5, 6, 6, 0, 0.8)], [g]),
              DetectionRecord("b", [Box(0, 0, 1, 1, 0, 0.7)], [g])]
    assert average_precision(worked, 0, 0.5) == 0.5 * 1 + 0.5 * (2 / 3)
    assert iou(Box(0, 0, 2, 2, 0), Box(1, 1, 3, 3, 0)) == 1 / 7 == box_iou((0, 0, 2, 2), (1, 1, 3, 3))
    res = mean_ap(random_fixture(np.random.default_rng(1), n_images=10, max_boxes=40)[1])
    assert list(res.per_threshold) == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
    assert res.overall == sum(res.per_threshold.values()) / 10
    record_property("detail", f"200 fixtures, {checked} AP values, worst error {worst:.1e}")


# 8 ---------------------------------------------------------------------------


def _tagged_manifest(n, n_logs, seed):
    rng = np.random.default_rng(seed)
    from securefl.datasets import Sample
    return [Sample(f"s{i:04d}", log_id=f"log{int(rng.integers(n_logs))}", location=f"loc{i % 3}",
                   month=int(rng.integers(1, 13)), label=int(rng.integers(4))) for i in range(n)]


@criterion(8, "partition properties")
def test_c8_partition_properties(record_property):
    from securefl.datasets import Sample
    base = [Sample(f"s{i:03d}", log_id=f"log{i // 7}", label=i % 4) for i in range(100)]
    s = split_iid(base, 0.25, 5, 0)
    assert len(s.server_ids) == 25 and [len(v) for v in s.client_ids.values()] == [15] * 5
    rng = np.random.default_rng(808)
    for seed in range(1000):
        n = int(rng.integers(1, 120))
        frac = float(rng.uniform(0, 0.95))
        m = int(rng.integers(1, 9))
        samples = _tagged_manifest(n, max(1, n // 4), seed)
        a = split_iid(samples, frac, m, seed)
        check_partition(a, samples)
        sizes = [len(v) for v in a.client_ids.values()]
        assert max(sizes) - min(sizes) <= 1
        assert a.to_json() == split_iid(samples, frac, m, seed).to_json()
        # logs are shared across locations, so route by log only
        pool_clients = list(range(m))
        r = split_by_rules(samples, [(SERVER, lambda x: x.log_id == "log0")],
                           [(pool_clients, lambda x: x.log_id != "log0")], seed=seed)
        check_partition(r, samples)
        owner = r.owner_of()
        homes = {}
        for x in samples:
            homes.setdefault(x.log_id, set()).add(owner[x.sample_id])
        assert all(len(h) == 1 for h in homes.values())
        assert r.to_json() == split_by_rules(samples, [(SERVER, lambda x: x.log_id == "log0")],
                                             [(pool_clients, lambda x: x.log_id != "log0")], seed=seed).to_json()
    record_property("detail", "1000 seeds x (IID, log pool); 25/15x5 counts")


# 9 ---------------------------------------------------------------------------


def _envelopes(transport):
    out = {}
    for direction, client, data in transport.payloads:
        env = EncryptedEnvelope.from_bytes(data)
        out.setdefault((direction, client, env.kind, env.round), []).append(data)
    return out


@criterion(9, "protocol transcript and transport equivalence")
def test_c9_transcript(record_property):
    runs = {}
    for kind in ("inproc", "socket"):
        runs[kind] = regression_federation(m=5, n=100, rounds=10, epochs=1, capture=True, transport=kind,
                                           deterministic_crypto=True)
    res, t, _ = runs["inproc"]
    events = [e for e in res.transcript if e[0] != "register"]
    broadcasts = [e for e in events if e[0] == "broadcast"]
    scatters = [e for e in events if e[0] == "scatter"]
    gathers = [e for e in events if e[0] == "gather"]
    assert (len(broadcasts), len(scatters), len(gathers)) == (10, 10, 50)
    rounds = [e[1] for e in broadcasts]
    assert all(b > a for a, b in zip(rounds, rounds[1:]))
    again, _, _ = regression_federation(m=5, n=100, rounds=10, epochs=1, deterministic_crypto=True)
    assert [r.to_dict(with_time=False) for r in res.records] == [r.to_dict(with_time=False) for r in again.records]
    a, b = _envelopes(runs["inproc"][1]), _envelopes(runs["socket"][1])
    assert a.keys() == b.keys()
    sealed = [k for k in a if k[2] in SEALED]
    assert len(sealed) == 10 * 5 * 2
    for k in sealed:
        assert a[k] == b[k]
    # RSA-OAEP uses fresh randomness; the wrapped-key envelopes agree in size only
    for k in a:
        if k[2] is PayloadKind.WRAPPED_KEY:
            assert [len(x) for x in a[k]] == [len(x) for x in b[k]]
    assert runs["socket"][0].final_params.flat.tobytes() == res.final_params.flat.tobytes()
    record_property("detail", f"10/10/50 events, {len(sealed)} sealed envelopes identical across transports")


# 10 --------------------------------------------------------------------------


@criterion(10, "3x5 server grid on the toy task")
def test_c10_grid(tmp_path, record_property):
    start = time.perf_counter()
    cfg = load_config(CONFIGS / "toy_regression.yaml", out=str(tmp_path / "grid"))
    assert len(cfg.grid["eta"]) == 3 and len(cfg.grid["beta"]) == 5
    cmd_split(cfg)
    rows = cmd_grid(cfg)
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0
    with open(cfg.output_dir / "grid.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 15 and all(r["status"] == "ok" for r in table)
    assert [(r["eta"], r["beta"]) for r in rows] == [(e, b) for e in cfg.grid["eta"] for b in cfg.grid["beta"]]
    assert (cfg.output_dir / "grid_heatmap.svg").stat().st_size > 1000
    best = min(rows, key=lambda r: r["best"])
    # the unit cell of the same config reproduces FedAvg bit for bit
    unit = load_config(CONFIGS / "toy_regression.yaml", out=str(tmp_path / "unit"))
    unit.grid = {"eta": [1.0], "beta": [0.0]}
    cmd_split(unit)
    cell, = cmd_grid(unit)
    plain = cmd_run(unit)
    assert cell["final_weights_sha256"] == plain["final_weights_sha256"]
    assert math.isfinite(best["best"])
    record_property("detail", f"15 cells in {elapsed:.0f}s, best loss {best['best']:.4f} at "
                              f"eta={best['eta']:g} beta={best['beta']:g}; (1, 0) cell == FedAvg")
