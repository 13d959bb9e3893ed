"""Server/client dataset splits and their heterogeneity statistics.

Two strategies are provided:

* :func:`split_iid` keeps a random fraction on the server and deals the rest
  uniformly to ``m`` clients.
* :func:`split_by_rules` routes samples by metadata.  Direct rules send every
  matching sample to one target.  Pool rules collect whole logs (driving
  sequences) and, after a seeded shuffle, deal them round-robin to a set of
  clients, so no log is ever split.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .datasets import Sample
from .errors import EmptyManifest, OverlappingRules, UnmatchedSamples

SERVER = "server"

Predicate = Callable[[Sample], bool]


def match(spec: Mapping) -> Predicate:
    """Predicate from a declarative spec.

    Each key names a metadata field; a scalar value requires equality, a list
    requires membership and ``{"min": a, "max": b}`` an inclusive range.
    """
    spec = dict(spec)

    def pred(s: Sample) -> bool:
        for key, want in spec.items():
            have = s.meta(key)
            if isinstance(want, Mapping):
                if have is None:
                    return False
                if "min" in want and have < want["min"]:
                    return False
                if "max" in want and have > want["max"]:
                    return False
            elif isinstance(want, (list, tuple, set)):
                if have not in want:
                    return False
            elif have != want:
                return False
        return True

    pred.spec = spec
    return pred


def _describe(pred) -> object:
    return getattr(pred, "spec", getattr(pred, "__name__", repr(pred)))


@dataclass
class SplitManifest:
    server_ids: list[str]
    client_ids: dict[int, list[str]]
    seed: int
    strategy: dict
    stats: dict = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.client_ids)

    def owner_of(self) -> dict[str, object]:
        owner = {sid: SERVER for sid in self.server_ids}
        for c, ids in self.client_ids.items():
            for sid in ids:
                owner[sid] = c
        return owner

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "strategy": self.strategy,
            "server_ids": self.server_ids,
            "client_ids": {str(c): ids for c, ids in sorted(self.client_ids.items())},
            "stats": self.stats,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(
            server_ids=list(d["server_ids"]),
            client_ids={int(c): list(ids) for c, ids in d["client_ids"].items()},
            seed=int(d["seed"]),
            strategy=d.get("strategy", {}),
            stats=d.get("stats", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_manifest(samples: Sequence[Sample]) -> None:
    if not samples:
        raise EmptyManifest("manifest holds no samples")


def split_iid(samples: Sequence[Sample], server_fraction: float, m: int, seed: int) -> SplitManifest:
    """Uniform random split; client sizes differ by at most one."""
    _check_manifest(samples)
    if not 0.0 <= server_fraction < 1.0:
        raise ValueError(f"server_fraction must lie in [0, 1), got {server_fraction}")
    if m < 1:
        raise ValueError("need at least one client")
    ids = [s.sample_id for s in samples]
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_server = int(math.floor(server_fraction * len(ids) + 1e-9))
    server = [ids[i] for i in perm[:n_server]]
    rest = perm[n_server:]
    clients = {c: [ids[i] for i in chunk] for c, chunk in enumerate(np.array_split(rest, m))}
    split = SplitManifest(server, clients, seed, {"kind": "iid", "server_fraction": server_fraction, "clients": m})
    split.stats = compute_stats(split, samples)
    return split


def split_by_rules(samples: Sequence[Sample], rules: Sequence[tuple[object, Predicate]],
                   log_pool_rules: Sequence[tuple[Sequence[int], Predicate]] = (),
                   seed: int = 0, n_clients: int | None = None) -> SplitManifest:
    """Metadata-driven split.

    Args:
        rules: ``(target, predicate)`` pairs; ``target`` is a client index or
            ``"server"``.
        log_pool_rules: ``(clients, predicate)`` pairs; matching samples are
            grouped by ``log_id`` and whole logs are dealt round-robin to
            ``clients`` after a seeded shuffle.
        n_clients: total client count, for clients that receive nothing.

    Raises:
        UnmatchedSamples: some samples match no rule.
        OverlappingRules: a sample matches several rules, or a pooled log has
            samples outside its pool.
    """
    _check_manifest(samples)
    targets: list[tuple[str, object]] = [("rule", t) for t, _ in rules] + [("pool", i) for i in range(len(log_pool_rules))]
    preds = [p for _, p in rules] + [p for _, p in log_pool_rules]
    hit: dict[str, int] = {}
    unmatched = []
    for s in samples:
        matches = [j for j, p in enumerate(preds) if p(s)]
        if not matches:
            unmatched.append(s.sample_id)
        elif len(matches) > 1:
            raise OverlappingRules(f"sample {s.sample_id} matches rules {matches}")
        else:
            hit[s.sample_id] = matches[0]
    if unmatched:
        raise UnmatchedSamples(unmatched)

    all_clients = set()
    for t, _ in rules:
        if t != SERVER:
            all_clients.add(int(t))
    for cs, _ in log_pool_rules:
        all_clients.update(int(c) for c in cs)
    if n_clients is not None:
        all_clients.update(range(n_clients))
    server: list[str] = []
    clients: dict[int, list[str]] = {c: [] for c in sorted(all_clients)}

    pools: list[dict[str, list[str]]] = [defaultdict(list) for _ in log_pool_rules]
    log_home: dict[str, int] = {}
    for s in samples:
        j = hit[s.sample_id]
        kind, t = targets[j]
        if kind == "rule":
            (server if t == SERVER else clients[int(t)]).append(s.sample_id)
        else:
            pools[t][s.log_id].append(s.sample_id)
    # a log is indivisible, so every sample of a pooled log must share the pool
    for s in samples:
        j = hit[s.sample_id]
        kind, t = targets[j]
        owner = t if kind == "pool" else None
        prev = log_home.setdefault(s.log_id, owner)
        if (prev is not None or owner is not None) and prev != owner:
            raise OverlappingRules(f"log {s.log_id} straddles a log pool and another rule")

    rng = np.random.default_rng(seed)
    for (cs, _), pool in zip(log_pool_rules, pools):
        cs = [int(c) for c in cs]
        logs = sorted(pool)
        order = rng.permutation(len(logs))
        for k, li in enumerate(order):
            clients[cs[k % len(cs)]].extend(pool[logs[li]])

    # keep manifest order inside each list
    pos = {s.sample_id: i for i, s in enumerate(samples)}
    server.sort(key=pos.__getitem__)
    for c in clients:
        clients[c].sort(key=pos.__getitem__)
    strategy = {
        "kind": "rules",
        "rules": [{"target": t, "match": _describe(p)} for t, p in rules],
        "pools": [{"clients": list(cs), "match": _describe(p)} for cs, p in log_pool_rules],
    }
    split = SplitManifest(server, clients, seed, strategy)
    split.stats = compute_stats(split, samples)
    return split


# --- statistics ------------------------------------------------------------


def _holder_stats(members: Sequence[Sample], class_totals: Mapping[int, int]) -> dict:
    counts: Counter = Counter()
    for s in members:
        counts.update(s.label_histogram())
    n_ann = sum(counts.values())
    n = len(members)
    return {
        "sample_count": n,
        "annotation_count": n_ann,
        "annotations_per_sample": n_ann / n if n else 0.0,
        "label_counts": {str(k): counts[k] for k in sorted(counts)},
        "label_distribution": {str(k): counts[k] / n_ann for k in sorted(counts)} if n_ann else {},
        "class_share": {str(k): (counts.get(k, 0) / tot if tot else 0.0) for k, tot in sorted(class_totals.items())},
        "logs": len({s.log_id for s in members}),
    }


def compute_stats(split: SplitManifest, samples: Sequence[Sample]) -> dict:
    by_id = {s.sample_id: s for s in samples}
    client_members = {c: [by_id[i] for i in ids] for c, ids in split.client_ids.items()}
    totals: Counter = Counter()
    for members in client_members.values():
        for s in members:
            totals.update(s.label_histogram())
    clients = {str(c): _holder_stats(m, totals) for c, m in sorted(client_members.items())}
    sizes = [len(m) for m in client_members.values()] or [0]
    mean_aps = [v["annotations_per_sample"] for v in clients.values()]
    peak = max(mean_aps, default=0.0)
    for v in clients.values():
        v["normalized_annotations_per_sample"] = v["annotations_per_sample"] / peak if peak else 0.0
    return {
        "server": _holder_stats([by_id[i] for i in split.server_ids], totals),
        "clients": clients,
        "unbalancedness": {
            "min": min(sizes),
            "max": max(sizes),
            "cv": float(np.std(sizes) / np.mean(sizes)) if np.mean(sizes) else 0.0,
        },
    }


def skew_report(split: SplitManifest, samples: Sequence[Sample] | None = None) -> dict:
    """Per-holder sample counts, annotation density and label distribution."""
    if samples is not None:
        return compute_stats(split, samples)
    return split.stats


def chi_square_uniform(counts: Sequence[int]) -> float:
    """Pearson statistic of ``counts`` against equal expected frequencies."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    expected = total / counts.size
    return float(np.sum((counts - expected) ** 2) / expected)


def check_partition(split: SplitManifest, samples: Sequence[Sample]) -> None:
    """Assert disjointness and coverage; raises ``AssertionError`` otherwise."""
    seen: list[str] = list(split.server_ids)
    for ids in split.client_ids.values():
        seen.extend(ids)
    assert len(seen) == len(set(seen)), "holders overlap"
    assert set(seen) == {s.sample_id for s in samples}, "split does not cover the manifest"


# --- class maps ------------------------------------------------------------


@dataclass(frozen=True)
class ClassMap:
    """Raw class id -> mapped id, or ``None`` to drop the annotation."""

    mapping: Mapping[int, int | None]

    def apply(self, samples: Iterable[Sample]) -> tuple[list[Sample], dict]:
        raw = mapped = dropped = 0
        out = []
        for s in samples:
            anns = []
            for a in s.annotations:
                raw += 1
                k = self.mapping.get(int(a[0]))
                if k is None:
                    dropped += 1
                else:
                    mapped += 1
                    anns.append((int(k), *a[1:]))
            out.append(Sample(s.sample_id, s.log_id, s.location, s.month, s.features,
                              s.label, tuple(anns), s.tags))
        return out, {"raw": raw, "mapped": mapped, "dropped": dropped}
