"""Declarative experiment configuration and the split/run/grid/report commands.

A config is one YAML file::

    task: toy-regression            # toy-classification | detection-fixture
    seed: 0
    output_dir: out
    data:     {n_samples: 300, n_features: 5, noise: 0.5}   # or {manifest: path}
    split:    {strategy: iid, server_fraction: 0.25, clients: 5}
    federation:
      rounds: 30
      local_epochs: 5
      batch_size: 32
      optimizer: fedavgm
      eta: 1.0
      beta: 0.0
      local_mode: fedavg            # or fedopt
    grid:     {eta: [0.5, 1.0, 1.5], beta: [0.1, 0.3, 0.5, 0.7, 0.9]}

Non-image outputs are byte-for-byte reproducible for a fixed config and
seed; wall-clock timings go to a separate ``timings.jsonl``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import datasets
from .datasets import Sample
from .errors import ConfigError, FederationError
from .local.models import ToyModel, build_model
from .local.schedule import LocalMode, TrainConfig
from .local.trainer import LocalClient
from .optim import OptimizerKind, init_state
from .params import save_checkpoint
from .partition import SERVER, SplitManifest, match, split_by_rules, split_iid
from .protocol import FederationConfig, FederationResult, RoundRecord, run_federation, score_of
from .transport import make_transport

log = logging.getLogger(__name__)

TASKS = {
    "toy-regression": "regression",
    "toy-classification": "classification",
    "detection-fixture": "detection",
}

_KNOWN = {
    (): {"task", "seed", "output_dir", "data", "split", "federation", "grid"},
    ("data",): {"manifest", "n_samples", "n_features", "n_classes", "noise", "groups", "shift",
                "n_logs", "model", "hidden"},
    ("split",): {"strategy", "server_fraction", "clients", "rules", "pools", "emit_trees"},
    ("federation",): {"rounds", "local_epochs", "batch_size", "optimizer", "eta", "beta", "beta2",
                      "tau", "local_mode", "warmup_epochs", "lr_bias_init", "lr_other_init",
                      "lr_peak", "lr_final", "lr_fixed", "momentum_init", "momentum_final",
                      "weight_decay", "timeout", "transport", "deterministic_crypto", "rsa_bits"},
    ("grid",): {"eta", "beta"},
}
# detector-training knobs accepted for compatibility but meaningless for toy models
_IGNORED = {"gradient_accumulation", "accumulate", "ema", "mosaic", "fliplr", "mixup", "img_size"}


# --- loading ---------------------------------------------------------------


def _line_map(node, path=(), out=None) -> dict[tuple, int]:
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


@dataclass
class ExperimentConfig:
    task: str
    seed: int
    output_dir: Path
    data: dict
    split: dict
    federation: dict
    grid: dict | None
    source: Path | None = None
    lines: dict = field(default_factory=dict, repr=False)

    @property
    def task_kind(self) -> str:
        return TASKS[self.task]

    def line(self, *path) -> int | None:
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def fail(self, message: str, *path):
        raise ConfigError(f"{'.'.join(map(str, path)) or 'config'}: {message}", self.line(*path))

    def train_config(self) -> TrainConfig:
        f = self.federation
        rounds = int(f.get("rounds", 30))
        epochs = int(f.get("local_epochs", 5))
        mode = LocalMode.parse(f.get("local_mode", "fedavg"))
        default_warmup = min(30, rounds * epochs) if mode is LocalMode.FEDOPT_LOCAL else 0
        kw = dict(
            epochs_per_round=epochs,
            batch_size=int(f.get("batch_size", 32)),
            rounds=rounds,
            warmup_epochs=int(f.get("warmup_epochs", default_warmup)),
            mode=mode,
        )
        for k in ("lr_bias_init", "lr_other_init", "lr_peak", "lr_final", "lr_fixed",
                  "momentum_init", "momentum_final", "weight_decay"):
            if k in f:
                kw[k] = float(f[k])
        return TrainConfig(**kw)

    def federation_config(self, n_clients: int, eta=None, beta=None, optimizer=None) -> FederationConfig:
        f = self.federation
        beta = f.get("beta") if beta is None else beta
        return FederationConfig(
            n_clients=n_clients,
            train=self.train_config(),
            optimizer=optimizer or f.get("optimizer", "fedavg"),
            eta=float(f.get("eta", 1.0) if eta is None else eta),
            beta=None if beta is None else float(beta),
            beta2=float(f.get("beta2", 0.99)),
            tau=float(f.get("tau", 1e-3)),
            seed=self.seed,
            timeout=float(f.get("timeout", 60.0)),
            deterministic_crypto=bool(f.get("deterministic_crypto", True)),
            rsa_bits=int(f.get("rsa_bits", 2048)),
        )

    @property
    def n_clients(self) -> int:
        if self.split.get("strategy", "iid") == "iid":
            return int(self.split.get("clients", 5))
        ids = {int(r["target"]) for r in self.split.get("rules", []) if r["target"] != SERVER}
        for p in self.split.get("pools", []):
            ids.update(int(c) for c in p["clients"])
        return max(ids) + 1 if ids else 0

    def to_dict(self) -> dict:
        return {
            "task": self.task, "seed": self.seed, "output_dir": str(self.output_dir),
            "data": self.data, "split": self.split, "federation": self.federation, "grid": self.grid,
        }


def config_from_dict(doc: dict, lines: dict | None = None, source: Path | None = None,
                     seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping", 1)
    lines = lines or {}
    base = source.resolve().parent if source else Path.cwd()
    cfg = ExperimentConfig(
        task=str(doc.get("task", "")),
        seed=int(doc.get("seed", 0) if seed is None else seed),
        output_dir=Path(out if out is not None else doc.get("output_dir", "out")),
        data=dict(doc.get("data") or {}),
        split=dict(doc.get("split") or {}),
        federation=dict(doc.get("federation") or {}),
        grid=dict(doc["grid"]) if doc.get("grid") else None,
        source=source,
        lines=lines,
    )
    if not cfg.output_dir.is_absolute():
        cfg.output_dir = (base / cfg.output_dir).resolve()
    if cfg.data.get("manifest"):
        p = Path(cfg.data["manifest"])
        cfg.data["manifest"] = str(p if p.is_absolute() else base / p)
    _warn_unknown(doc, cfg)
    validate(cfg)
    return cfg


def _warn_unknown(doc: dict, cfg: ExperimentConfig) -> None:
    for path, known in _KNOWN.items():
        section = doc
        for k in path:
            section = section.get(k) or {}
        if not isinstance(section, dict):
            continue
        for key in section:
            if key in known:
                continue
            where = cfg.line(*path, key)
            if key in _IGNORED:
                log.warning("line %s: %s is ignored by the bundled toy models", where, ".".join((*path, key)))
            else:
                log.warning("line %s: unknown config key %s", where, ".".join((*path, key)))


def validate(cfg: ExperimentConfig) -> None:
    """Reject every constraint violation before any computation starts."""
    if cfg.task not in TASKS:
        cfg.fail(f"task must be one of {sorted(TASKS)}, got {cfg.task!r}", "task")
    s = cfg.split
    strategy = s.get("strategy", "iid")
    if strategy == "iid":
        frac = s.get("server_fraction", 0.25)
        if not isinstance(frac, (int, float)) or not 0.0 <= frac < 1.0:
            cfg.fail(f"server_fraction must lie in [0, 1), got {frac!r}", "split", "server_fraction")
        if int(s.get("clients", 5)) < 1:
            cfg.fail("need at least one client", "split", "clients")
    elif strategy == "rules":
        for i, r in enumerate(s.get("rules", [])):
            if "target" not in r or "match" not in r:
                cfg.fail("rules need 'target' and 'match'", "split", "rules", i)
        for i, p in enumerate(s.get("pools", [])):
            if not p.get("clients") or "match" not in p:
                cfg.fail("pools need non-empty 'clients' and 'match'", "split", "pools", i)
        if cfg.n_clients < 1:
            cfg.fail("rules assign no client", "split")
    else:
        cfg.fail(f"unknown split strategy {strategy!r}", "split", "strategy")
    d = cfg.data
    if d.get("manifest"):
        if not Path(d["manifest"]).exists():
            cfg.fail(f"manifest {d['manifest']} does not exist", "data", "manifest")
    else:
        if int(d.get("n_samples", 200)) < 1:
            cfg.fail("n_samples must be >= 1", "data", "n_samples")
        if int(d.get("n_features", 5)) < 1:
            cfg.fail("n_features must be >= 1", "data", "n_features")
    try:
        tc = cfg.train_config()
    except ValueError as exc:
        cfg.fail(str(exc), "federation")
    try:
        kind = OptimizerKind.parse(cfg.federation.get("optimizer", "fedavg"))
        fc = cfg.federation_config(max(1, cfg.n_clients))
        from .params import ParameterSet
        init_state(kind, ParameterSet(), eta=fc.eta, beta=fc.beta, beta2=fc.beta2, tau=fc.tau)
    except (ValueError, FederationError) as exc:
        cfg.fail(str(exc), "federation")
    transport = cfg.federation.get("transport", "inproc")
    if transport not in ("inproc", "socket"):
        cfg.fail(f"transport must be inproc or socket, got {transport!r}", "federation", "transport")
    if cfg.grid is not None:
        for axis in ("eta", "beta"):
            vals = cfg.grid.get(axis)
            if not vals:
                cfg.fail(f"grid axis {axis} must be a non-empty list", "grid", axis)
        for b in cfg.grid["beta"]:
            if not 0.0 <= float(b) < 1.0:
                cfg.fail(f"grid beta {b} outside [0, 1)", "grid", "beta")
        for e in cfg.grid["eta"]:
            if not float(e) > 0.0:
                cfg.fail(f"grid eta {e} must be positive", "grid", "eta")
    del tc


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML parse error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None) from None
    lines = _line_map(node) if node is not None else {}
    return config_from_dict(doc or {}, lines, path, seed, out)


# --- data --------------------------------------------------------------------


def build_samples(cfg: ExperimentConfig) -> list[Sample]:
    d = cfg.data
    if d.get("manifest"):
        return datasets.load_manifest(d["manifest"])
    n = int(d.get("n_samples", 200))
    nf = int(d.get("n_features", 5))
    common = dict(seed=cfg.seed, groups=int(d.get("groups", 1)), n_logs=int(d.get("n_logs", 10)))
    kind = cfg.task_kind
    if kind == "regression":
        return datasets.synthetic_regression(n, nf, noise=float(d.get("noise", 0.5)),
                                             shift=float(d.get("shift", 0.0)), **common)
    if kind == "classification":
        return datasets.synthetic_classification(n, nf, int(d.get("n_classes", 2)),
                                                 shift=float(d.get("shift", 0.0)), **common)
    return datasets.synthetic_detection(n, int(d.get("n_classes", 3)), noise=float(d.get("noise", 0.02)), **common)


def build_net(cfg: ExperimentConfig, samples: list[Sample]) -> ToyModel:
    d = cfg.data
    n_features = len(samples[0].features) if samples else int(d.get("n_features", 5))
    kind = cfg.task_kind
    if kind == "classification":
        return build_model(d.get("model", "logistic"), n_features, int(d.get("n_classes", 2)),
                           int(d.get("hidden", 16)))
    if kind == "detection":
        return build_model("box-detector", n_features, int(d.get("n_classes", 3)))
    return build_model("linear", n_features)


def make_split(cfg: ExperimentConfig, samples: list[Sample]) -> SplitManifest:
    s = cfg.split
    if s.get("strategy", "iid") == "iid":
        return split_iid(samples, float(s.get("server_fraction", 0.25)), int(s.get("clients", 5)), cfg.seed)
    rules = [(r["target"] if r["target"] == SERVER else int(r["target"]), match(r["match"]))
             for r in s.get("rules", [])]
    pools = [([int(c) for c in p["clients"]], match(p["match"])) for p in s.get("pools", [])]
    return split_by_rules(samples, rules, pools, cfg.seed, n_clients=cfg.n_clients)


# --- commands ----------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_split(cfg: ExperimentConfig) -> SplitManifest:
    """Write ``manifest.jsonl`` and ``split.json`` (plus optional per-holder trees)."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    samples = build_samples(cfg)
    split = make_split(cfg, samples)
    datasets.write_manifest(samples, out / "manifest.jsonl")
    split.save(out / "split.json")
    if cfg.split.get("emit_trees"):
        by_id = {x.sample_id: x for x in samples}
        holders = {"server": split.server_ids, **{f"client_{c}": ids for c, ids in split.client_ids.items()}}
        for name, ids in holders.items():
            d = out / "nodes" / name
            d.mkdir(parents=True, exist_ok=True)
            datasets.write_manifest((by_id[i] for i in ids), d / "samples.jsonl")
    return split


def _load_split(cfg: ExperimentConfig):
    out = cfg.output_dir
    split_path, manifest_path = out / "split.json", out / "manifest.jsonl"
    for p in (split_path, manifest_path):
        if not p.exists():
            raise ConfigError(f"{p} not found; run the split command first")
    return datasets.load_manifest(manifest_path), SplitManifest.load(split_path)


def _arrays(cfg, by_id, ids):
    return datasets.to_arrays([by_id[i] for i in ids], cfg.task_kind)


def federate(cfg: ExperimentConfig, samples, split, eta=None, beta=None, optimizer=None,
             transport: str | None = None) -> FederationResult:
    by_id = {s.sample_id: s for s in samples}
    net = build_net(cfg, samples)
    fc = cfg.federation_config(split.n_clients, eta=eta, beta=beta, optimizer=optimizer)
    clients = []
    for c in sorted(split.client_ids):
        X, y = _arrays(cfg, by_id, split.client_ids[c])
        clients.append(LocalClient(c, net, X, y, fc.train, seed=cfg.seed * 1000 + c))
    if [c.client_id for c in clients] != list(range(len(clients))):
        raise ConfigError("client ids must be contiguous from 0")
    Xs, ys = _arrays(cfg, by_id, split.server_ids)
    kind = transport or cfg.federation.get("transport", "inproc")
    return run_federation(fc, make_transport(kind, fc.n_clients), net, clients, Xs, ys)


def weights_digest(result: FederationResult) -> str:
    return hashlib.sha256(np.ascontiguousarray(result.final_params.flat).tobytes()).hexdigest()


def _write_run(cfg: ExperimentConfig, result: FederationResult, out: Path, extra: dict | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.jsonl", "w") as fh:
        for r in result.records:
            fh.write(json.dumps(r.to_dict(with_time=False), sort_keys=True) + "\n")
    with open(out / "timings.jsonl", "w") as fh:
        for r in result.records:
            fh.write(json.dumps({"round": r.round, "wall_time": r.wall_time}) + "\n")
    save_checkpoint(result.best, out / "best_checkpoint.ckpt")
    fc = cfg.train_config()
    metric = "mAP" if "mAP" in result.records[0].metrics else "loss"
    summary = {
        "task": cfg.task,
        "rounds": len(result.records),
        "local_epochs": fc.epochs_per_round,
        "total_local_epochs": len(result.records) * fc.epochs_per_round,
        "best_round": result.best_round,
        "best_metric": {"name": metric, "value": result.records[result.best_round].metrics[metric]},
        "final_metrics": result.records[-1].metrics,
        "bytes_down_total": sum(c.bytes_sent for r in result.records for c in r.clients),
        "bytes_up_total": sum(c.bytes_received for r in result.records for c in r.clients),
        "final_weights_sha256": weights_digest(result),
        "best_checkpoint_sha256": _sha256(out / "best_checkpoint.ckpt"),
        **(extra or {}),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def cmd_run(cfg: ExperimentConfig, transport: str | None = None) -> dict:
    samples, split = _load_split(cfg)
    result = federate(cfg, samples, split, transport=transport)
    extra = {"optimizer": cfg.federation.get("optimizer", "fedavg"),
             "transport": transport or cfg.federation.get("transport", "inproc")}
    return _write_run(cfg, result, cfg.output_dir, extra)


def _grid_cell(args):
    cfg_dict, source, seed, out, eta, beta, transport = args
    cfg = config_from_dict(cfg_dict, source=source, seed=seed, out=out)
    samples, split = _load_split(cfg)
    cell_dir = cfg.output_dir / "grid" / f"eta{eta:g}_beta{beta:g}"
    try:
        result = federate(cfg, samples, split, eta=eta, beta=beta, optimizer="fedavgm", transport=transport)
    except FederationError as exc:
        return {"eta": eta, "beta": beta, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    summary = _write_run(cfg, result, cell_dir, {"optimizer": "fedavgm", "eta": eta, "beta": beta})
    metric = summary["best_metric"]["name"]
    return {
        "eta": eta, "beta": beta, "status": "ok", "metric": metric,
        "final": summary["final_metrics"][metric],
        "best": summary["best_metric"]["value"],
        "best_round": summary["best_round"],
        "final_weights_sha256": summary["final_weights_sha256"],
    }


def cmd_grid(cfg: ExperimentConfig, parallel_cells: int = 1, transport: str | None = None) -> list[dict]:
    """One FedAvgM federation per (eta, beta) cell; CSV table plus SVG heatmap."""
    if cfg.grid is None:
        cfg.fail("grid section missing", "grid")
    _load_split(cfg)
    etas = [float(e) for e in cfg.grid["eta"]]
    betas = [float(b) for b in cfg.grid["beta"]]
    doc = cfg.to_dict()
    jobs = [(doc, cfg.source, cfg.seed, str(cfg.output_dir), e, b, transport) for e in etas for b in betas]
    if parallel_cells > 1:
        with ProcessPoolExecutor(max_workers=parallel_cells) as pool:
            rows = list(pool.map(_grid_cell, jobs))
    else:
        rows = [_grid_cell(j) for j in jobs]
    out = cfg.output_dir
    fields = ["eta", "beta", "status", "metric", "final", "best", "best_round", "final_weights_sha256", "error"]
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    _heatmap(rows, etas, betas, out / "grid_heatmap.svg")
    return rows


def _svg_metadata():
    return {"Date": None, "Creator": None}


def _heatmap(rows, etas, betas, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "securefl"
    grid = np.full((len(etas), len(betas)), np.nan)
    metric = next((r["metric"] for r in rows if r["status"] == "ok"), "metric")
    for r in rows:
        if r["status"] == "ok":
            grid[etas.index(r["eta"]), betas.index(r["beta"])] = r["best"]
    fig, ax = plt.subplots(figsize=(1.2 * len(betas) + 2, 0.9 * len(etas) + 1.5))
    im = ax.imshow(grid, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(betas)), [f"{b:g}" for b in betas])
    ax.set_yticks(range(len(etas)), [f"{e:g}" for e in etas])
    ax.set_xlabel("server momentum beta")
    ax.set_ylabel("server learning rate eta")
    for i in range(len(etas)):
        for j in range(len(betas)):
            label = "failed" if np.isnan(grid[i, j]) else f"{grid[i, j]:.4g}"
            ax.text(j, i, label, ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label=f"best {metric}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_svg_metadata())
    plt.close(fig)


def read_records(path) -> list[RoundRecord]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path} not found")
    records = []
    with open(path) as fh:
        for idx, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                records.append(RoundRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}: malformed record at index {idx}: {exc}", idx + 1) from None
    if not records:
        raise ConfigError(f"{path} holds no round records")
    return records


def cmd_report(records_path, out_dir=None) -> dict:
    """Plot aggregated weighted training loss and eval metrics per round."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "securefl"
    records = read_records(records_path)
    out = Path(out_dir) if out_dir else Path(records_path).parent
    out.mkdir(parents=True, exist_ok=True)
    rounds = [r.round for r in records]
    recomputed = []
    for r in records:
        n = sum(c.n_samples for c in r.clients)
        recomputed.append(sum(c.n_samples / n * c.loss for c in r.clients))
    drift = max(abs(a - r.train_loss) for a, r in zip(recomputed, records))
    if drift > 1e-9:
        raise ConfigError(f"stored train_loss disagrees with per-client losses by {drift:g}")
    paths = {}
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, [r.train_loss for r in records], marker="o", ms=3)
    ax.set_xlabel("communication round")
    ax.set_ylabel("weighted local training loss")
    fig.tight_layout()
    paths["loss"] = out / "loss_vs_round.svg"
    fig.savefig(paths["loss"], format="svg", metadata=_svg_metadata())
    plt.close(fig)
    metric_keys = sorted(records[0].metrics)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in metric_keys:
        ax.plot(rounds, [r.metrics[k] for r in records], marker="o", ms=3, label=k)
    ax.set_xlabel("communication round")
    ax.set_ylabel("server evaluation")
    ax.legend()
    fig.tight_layout()
    paths["metrics"] = out / "metric_vs_round.svg"
    fig.savefig(paths["metrics"], format="svg", metadata=_svg_metadata())
    plt.close(fig)
    return {"rounds": rounds, "train_loss": recomputed, "plots": {k: str(v) for k, v in paths.items()}}


__all__ = [
    "ExperimentConfig",
    "cmd_grid",
    "cmd_report",
    "cmd_run",
    "cmd_split",
    "config_from_dict",
    "federate",
    "load_config",
    "read_records",
    "score_of",
]
