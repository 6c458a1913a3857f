"""Experiment harness: config parsing, subcommands, run directories, plots.

Subcommands: ``partition``, ``train``, ``infer``, ``verify``, ``plot``,
``emd``.  Exit codes: 0 success, 2 configuration/validation failure,
1 runtime failure.

Configs are INI-style ``key = value`` text with sections; every run directory
receives a resolved snapshot of its config plus a ``metrics.ndjson`` stream
with one JSON record per line (step, split, loss, accuracy, delta, bytes_up,
bytes_down).  Identical config and seed reproduce byte-identical metrics.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    emd as emd_value,
    encode_dataset,
    label_distribution,
    load_idx,
    partition_cycle,
    partition_star,
)
from .federation import (
    FedAvgConfig,
    measure_divergence,
    param_payload_bytes,
    run_fedavg,
    train_centralized,
)
from .model import ClassifierHead, TrainConfig, evaluate, save_checkpoint
from .qfedinf import (
    InferenceMode,
    evaluate_ensemble,
    infer,
    load_ensemble,
    run_theorem1_suite,
    save_ensemble,
    train_clients,
)
from .qsim import CircuitSpec

DESK_PER_CLASS = 512
DESK_TEST_SIZE = 1024
DESK_DEPTH = 12
DESK_LOCAL_DEPTH = 6
DESK_EPOCHS = 3
DESK_BATCH = 8
DESK_LR = 2e-2
DESK_GMM_MODES = 8

FULL_DEPTH = 48
FULL_LOCAL_DEPTH = 6
FULL_EPOCHS = 5
FULL_BATCH = 128
FULL_LR = 1e-2
FULL_GMM_MODES = 5


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_classes: int = 8
    per_class_train: int = DESK_PER_CLASS  # 0 = use everything
    test_size: int = DESK_TEST_SIZE  # 0 = use everything
    scheme: str = "star"  # star | cycle | centralized
    m: int = 0  # cycle-m class count
    fixed_class: int = 0
    partition_seed: int = 0
    depth: int = DESK_DEPTH
    local_depth: int = DESK_LOCAL_DEPTH
    algorithm: str = "centralized"  # centralized | fedavg | fedinf
    learning_rate: float = DESK_LR
    batch_size: int = DESK_BATCH
    epochs: int = DESK_EPOCHS
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"
    sync_period: int = 1
    rounds: int = 0
    eval_every: int = 5
    track_divergence: bool = False
    gmm_modes: int = DESK_GMM_MODES
    inference_mode: str = "expectation"
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    full_scale: bool = False

    def validate(self) -> None:
        if self.algorithm not in ("centralized", "fedavg", "fedinf"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.scheme not in ("star", "cycle", "centralized"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.algorithm in ("fedavg", "fedinf") and self.scheme == "centralized":
            raise ConfigError(f"{self.algorithm} needs a star or cycle partition")
        if self.scheme == "cycle" and not (1 <= self.m <= self.n_classes):
            raise ConfigError(f"cycle scheme needs m in 1..{self.n_classes}, got {self.m}")
        if self.scheme != "cycle" and self.m:
            raise ConfigError("m is only meaningful with the cycle scheme")
        if self.algorithm != "fedavg" and (
            self.sync_period != 1 or self.rounds or self.track_divergence
        ):
            raise ConfigError("sync_period/rounds/track_divergence apply only to fedavg")
        if self.inference_mode not in ("expectation", "random"):
            raise ConfigError(f"unknown inference mode {self.inference_mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for p in ("train_images", "train_labels"):
            if not getattr(self, p):
                raise ConfigError(f"missing dataset path: {p}")

    def resolved(self) -> "ExperimentConfig":
        if not self.full_scale:
            return self
        return replace(
            self,
            depth=FULL_DEPTH,
            local_depth=FULL_LOCAL_DEPTH,
            epochs=FULL_EPOCHS,
            batch_size=FULL_BATCH,
            learning_rate=FULL_LR,
            gmm_modes=FULL_GMM_MODES,
            per_class_train=0,
        )


_SECTION_FIELDS = {
    "data": (
        "train_images",
        "train_labels",
        "test_images",
        "test_labels",
        "n_classes",
        "per_class_train",
        "test_size",
    ),
    "partition": ("scheme", "m", "fixed_class", "partition_seed"),
    "circuit": ("depth", "local_depth"),
    "train": (
        "learning_rate",
        "batch_size",
        "epochs",
        "beta1",
        "beta2",
        "eps",
        "optimizer",
    ),
    "fedavg": ("sync_period", "rounds", "eval_every", "track_divergence"),
    "fedinf": ("gmm_modes", "inference_mode"),
    "run": ("algorithm", "seeds", "out", "full_scale"),
}


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = ExperimentConfig()
    for section, keys in _SECTION_FIELDS.items():
        if not parser.has_section(section):
            continue
        for key, value in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key [{section}] {key}")
            current = getattr(cfg, key)
            if key == "seeds":
                parsed: object = tuple(int(s) for s in value.replace(",", " ").split())
            elif isinstance(current, bool):
                parsed = value.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value.strip()
            setattr(cfg, key, parsed)
    return cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, keys in _SECTION_FIELDS.items():
        parser.add_section(section)
        for key in keys:
            value = getattr(cfg, key)
            if key == "seeds":
                value = " ".join(str(s) for s in value)
            parser.set(section, key, str(value))
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Data assembly
# ---------------------------------------------------------------------------


def _subset_per_class(samples, per_class: int, n_classes: int, seed: int):
    if per_class <= 0:
        return samples
    rng = np.random.default_rng(seed)
    by_class = [[] for _ in range(n_classes)]
    for s in samples:
        if s.label < n_classes:
            by_class[s.label].append(s)
    picked = []
    for group in by_class:
        idx = rng.permutation(len(group))[:per_class]
        picked.extend(group[i] for i in sorted(idx))
    return picked


def _load_split(images, labels, limit_per_class, n_classes, seed):
    pairs = load_idx(images, labels)
    pairs = [(img, lab) for img, lab in pairs if lab < n_classes]
    samples, rejected = encode_dataset(pairs)
    samples = _subset_per_class(samples, limit_per_class, n_classes, seed)
    return samples, rejected


def _partition(cfg: ExperimentConfig, samples):
    if cfg.scheme == "star":
        return partition_star(
            samples, cfg.n_classes - 1, cfg.fixed_class, seed=cfg.partition_seed
        )
    if cfg.scheme == "cycle":
        return partition_cycle(samples, cfg.n_classes, cfg.m, seed=cfg.partition_seed)
    raise ConfigError(f"scheme {cfg.scheme!r} does not define clients")


# ---------------------------------------------------------------------------
# Metrics stream
# ---------------------------------------------------------------------------


class MetricsWriter:
    FIELDS = ("run_id", "step", "split", "loss", "accuracy", "delta", "bytes_up", "bytes_down")

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self._records: list[dict] = []

    def record(self, step, split, loss=None, accuracy=None, delta=None, bytes_up=None, bytes_down=None):
        rec = {
            "run_id": self.run_id,
            "step": int(step),
            "split": split,
            "loss": None if loss is None else float(loss),
            "accuracy": None if accuracy is None else float(accuracy),
            "delta": None if delta is None else float(delta),
            "bytes_up": None if bytes_up is None else int(bytes_up),
            "bytes_down": None if bytes_down is None else int(bytes_down),
        }
        self._records.append(rec)

    def flush(self) -> None:
        with open(self.path, "w", encoding="utf-8") as fh:
            for rec in self._records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


# ---------------------------------------------------------------------------
# Experiment runner (shared by `qfed train` and the acceptance suite)
# ---------------------------------------------------------------------------


def run_id_for(cfg: ExperimentConfig, seed: int) -> str:
    scheme = cfg.scheme if cfg.scheme != "cycle" else f"cycle{cfg.m}"
    return f"{cfg.algorithm}-{scheme}-s{seed}"


def run_single(cfg: ExperimentConfig, seed: int, train_samples, test_samples) -> dict:
    """One seed of the configured experiment; writes its run directory."""
    run_dir = Path(cfg.out) / run_id_for(cfg, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(replace(cfg, seeds=(seed,)), run_dir / "config.ini")
    metrics = MetricsWriter(run_dir / "metrics.ndjson", run_id_for(cfg, seed))
    head = ClassifierHead(n_classes=cfg.n_classes)
    tcfg = TrainConfig(
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        adam_beta1=cfg.beta1,
        adam_beta2=cfg.beta2,
        adam_eps=cfg.eps,
        seed=seed,
        optimizer=cfg.optimizer,
    )
    summary: dict = {"run_id": metrics.run_id, "seed": seed, "algorithm": cfg.algorithm}

    if cfg.algorithm == "centralized":
        spec = CircuitSpec(n_qubits=8, n_layers=cfg.depth)
        params, log = train_centralized(spec, head, train_samples, tcfg)
        for i, loss in enumerate(log.step_losses):
            metrics.record(step=i + 1, split="train", loss=loss)
        acc = evaluate(spec, params, head, test_samples) if test_samples else None
        if acc is not None:
            metrics.record(step=len(log.step_losses), split="test", accuracy=acc)
        save_checkpoint(run_dir / "checkpoint.json", spec, params, head=head)
        summary.update(accuracy=acc, rounds=0, bytes_up=0, bytes_down=0)

    elif cfg.algorithm == "fedavg":
        spec = CircuitSpec(n_qubits=8, n_layers=cfg.depth)
        clients = _partition(cfg, train_samples)
        fcfg = FedAvgConfig(sync_period_T=cfg.sync_period, rounds=cfg.rounds, train=tcfg)
        eval_fn = None
        if test_samples:
            eval_fn = lambda p: evaluate(spec, p, head, test_samples)  # noqa: E731
        result = run_fedavg(
            spec, head, clients, fcfg, eval_fn=eval_fn, eval_every=cfg.eval_every
        )
        deltas = None
        if cfg.track_divergence:
            # centralized comparison: same seed and init over the merged data,
            # divergence sampled at every averaging step (round r <-> step r*T)
            rounds = len(result.sync_params)
            total_steps = rounds * cfg.sync_period
            steps_per_epoch = int(np.ceil(len(train_samples) / tcfg.batch_size))
            cent_cfg = replace(tcfg, epochs=int(np.ceil(total_steps / steps_per_epoch)))
            _, _, cent_steps = train_centralized(
                spec, head, train_samples, cent_cfg, snapshot_steps=True
            )
            trace = measure_divergence(
                [((r + 1) * cfg.sync_period, w) for r, w in enumerate(result.sync_params)],
                [
                    ((r + 1) * cfg.sync_period, cent_steps[(r + 1) * cfg.sync_period - 1])
                    for r in range(rounds)
                ],
            )
            deltas = trace.deltas
        payload = param_payload_bytes(spec)
        eval_at = dict(result.eval_trace)
        for r, loss in enumerate(result.round_losses, start=1):
            metrics.record(
                step=r,
                split="train",
                loss=loss,
                accuracy=eval_at.get(r),
                delta=None if deltas is None else deltas[r - 1],
                bytes_up=len(clients) * payload,
                bytes_down=len(clients) * payload,
            )
        acc = result.eval_trace[-1][1] if result.eval_trace else None
        save_checkpoint(run_dir / "checkpoint.json", spec, result.params, head=head)
        summary.update(
            accuracy=acc,
            rounds=result.comm.rounds,
            bytes_up=result.comm.bytes_up,
            bytes_down=result.comm.bytes_down,
        )

    else:  # fedinf
        spec = CircuitSpec(n_qubits=8, n_layers=cfg.local_depth)
        clients = _partition(cfg, train_samples)
        result = train_clients(clients, spec, head, tcfg, gmm_modes=cfg.gmm_modes)
        for cid, log in sorted(result.logs.items()):
            for i, loss in enumerate(log.step_losses):
                metrics.record(step=i + 1, split=f"client{cid}/train", loss=loss)
            for e, acc in enumerate(log.epoch_accuracies):
                metrics.record(step=e + 1, split=f"client{cid}/epoch", accuracy=acc)
        mode = (
            InferenceMode.EXPECTATION_MIX
            if cfg.inference_mode == "expectation"
            else InferenceMode.RANDOM_SELECT
        )
        acc = None
        if test_samples:
            acc = evaluate_ensemble(
                result.ensemble, test_samples, mode=mode, rng=np.random.default_rng(seed)
            )
            metrics.record(step=1, split="test", accuracy=acc, bytes_up=result.comm.bytes_up)
        save_ensemble(result.ensemble, run_dir / "bundle")
        summary.update(
            accuracy=acc,
            rounds=1,
            bytes_up=result.comm.bytes_up,
            bytes_down=result.comm.bytes_down,
        )

    metrics.flush()
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def run_experiment(cfg: ExperimentConfig) -> dict:
    """All seeds of one experiment; writes per-seed run dirs plus a summary."""
    cfg = cfg.resolved()
    cfg.validate()
    train_samples, rejected = _load_split(
        cfg.train_images, cfg.train_labels, cfg.per_class_train, cfg.n_classes, cfg.partition_seed
    )
    test_samples = []
    if cfg.test_images:
        test_samples, _ = _load_split(
            cfg.test_images, cfg.test_labels, 0, cfg.n_classes, cfg.partition_seed
        )
        if cfg.test_size and len(test_samples) > cfg.test_size:
            rng = np.random.default_rng(cfg.partition_seed)
            idx = sorted(rng.permutation(len(test_samples))[: cfg.test_size])
            test_samples = [test_samples[i] for i in idx]
    per_seed = [run_single(cfg, seed, train_samples, test_samples) for seed in cfg.seeds]
    accs = [s["accuracy"] for s in per_seed if s["accuracy"] is not None]
    summary = {
        "algorithm": cfg.algorithm,
        "scheme": cfg.scheme,
        "m": cfg.m,
        "seeds": list(cfg.seeds),
        "rejected_images": rejected,
        "accuracy_mean": float(np.mean(accs)) if accs else None,
        "accuracy_std": float(np.std(accs)) if accs else None,
        "rounds": per_seed[0]["rounds"],
        "bytes_up_total": int(sum(s["bytes_up"] for s in per_seed)),
        "bytes_down_total": int(sum(s["bytes_down"] for s in per_seed)),
        "runs": [s["run_id"] for s in per_seed],
    }
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_partition(cfg: ExperimentConfig) -> int:
    cfg.validate()
    if cfg.scheme == "centralized":
        raise ConfigError("partition requires the star or cycle scheme")
    samples, rejected = _load_split(
        cfg.train_images, cfg.train_labels, cfg.per_class_train, cfg.n_classes, cfg.partition_seed
    )
    clients = _partition(cfg, samples)
    global_dist = label_distribution(samples, cfg.n_classes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scheme": cfg.scheme,
        "m": cfg.m,
        "fixed_class": cfg.fixed_class,
        "seed": cfg.partition_seed,
        "n_classes": cfg.n_classes,
        "n_samples": len(samples),
        "rejected_images": rejected,
        "clients": [
            {
                "client_id": c.client_id,
                "n_samples": len(c),
                "weight_p": c.weight_p,
                "class_histogram": [
                    int(sum(1 for s in c.samples if s.label == k)) for k in range(cfg.n_classes)
                ],
                "sample_indices": list(c.indices),
            }
            for c in clients
        ],
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    lines = ["client_id,emd"]
    for c in clients:
        value = emd_value(label_distribution(c.samples, cfg.n_classes), global_dist)
        lines.append(f"{c.client_id},{value!r}")
    (out / "emd.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'manifest.json'} and {out / 'emd.csv'} ({len(clients)} clients)")
    return 0


def cmd_emd(cfg: ExperimentConfig) -> int:
    cfg.validate()
    if cfg.scheme == "centralized":
        raise ConfigError("emd requires the star or cycle scheme")
    samples, _ = _load_split(
        cfg.train_images, cfg.train_labels, cfg.per_class_train, cfg.n_classes, cfg.partition_seed
    )
    clients = _partition(cfg, samples)
    global_dist = label_distribution(samples, cfg.n_classes)
    print("client_id,emd")
    for c in clients:
        print(f"{c.client_id},{emd_value(label_distribution(c.samples, cfg.n_classes), global_dist)!r}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    summary = run_experiment(cfg)
    acc = summary["accuracy_mean"]
    acc_str = "n/a" if acc is None else f"{acc:.4f} +- {summary['accuracy_std']:.4f}"
    print(
        f"{summary['algorithm']} ({summary['scheme']}"
        + (f"-{summary['m']}" if summary["m"] else "")
        + f"): accuracy {acc_str}, rounds {summary['rounds']}, "
        f"bytes up {summary['bytes_up_total']}"
    )
    return 0


def cmd_infer(cfg: ExperimentConfig, bundle: str, index: int, mode: str, seed: int) -> int:
    ensemble = load_ensemble(bundle)
    images = cfg.test_images or cfg.train_images
    labels = cfg.test_labels or cfg.train_labels
    samples, _ = _load_split(images, labels, 0, cfg.n_classes, 0)
    if not (0 <= index < len(samples)):
        raise ConfigError(f"sample index {index} out of range (dataset has {len(samples)})")
    sample = samples[index]
    imode = InferenceMode.EXPECTATION_MIX if mode == "expectation" else InferenceMode.RANDOM_SELECT
    dist = infer(ensemble, sample.state, mode=imode, rng=np.random.default_rng(seed))
    print(
        json.dumps(
            {
                "index": index,
                "label": sample.label,
                "predicted": int(np.argmax(dist.probs)),
                "probs": [float(p) for p in dist.probs],
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_verify(which: str, seed: int, instances: int) -> int:
    failures = 0
    if which in ("theorem1", "all"):
        rep = run_theorem1_suite(n_instances=instances, seed=seed)
        status = "PASS" if rep.ok else "FAIL"
        print(
            f"[{status}] theorem1: {rep.n_checked} checks, {rep.n_skipped} skipped, "
            f"max deviation {rep.max_deviation:.3e} (tol {rep.tol:.0e})"
        )
        failures += 0 if rep.ok else 1
    if which in ("prop1", "all"):
        from .federation import prop1_synthetic_check

        worst = 0
        for s in range(instances if which == "prop1" else 20):
            rep = prop1_synthetic_check(seed=seed + s)
            worst += len(rep.violations)
        status = "PASS" if worst == 0 else "FAIL"
        print(f"[{status}] prop1: {worst} bound violations across seeds")
        failures += 0 if worst == 0 else 1
    if which in ("gradients", "all"):
        max_dev = _gradient_suite(seed=seed, instances=min(instances, 50))
        status = "PASS" if max_dev <= 1e-5 else "FAIL"
        print(f"[{status}] gradients: max |shift - finite difference| = {max_dev:.3e} (tol 1e-05)")
        failures += 0 if max_dev <= 1e-5 else 1
    return 1 if failures else 0


def _gradient_suite(seed: int, instances: int) -> float:
    """Parameter-shift gradients vs. central finite differences (h = 1e-5)."""
    from .data import EncodedSample
    from .model import _forward_z, _probs_from_z, parameter_shift_grad
    from .qsim import ParamVector, StateVector

    rng = np.random.default_rng(seed)
    h = 1e-5
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 4))
        layers = int(rng.integers(1, 4))
        spec = CircuitSpec(n_qubits=n, n_layers=layers)
        head = ClassifierHead(n_classes=int(rng.integers(1, n + 1)), scale=10.0)
        params = ParamVector(rng.uniform(-np.pi, np.pi, size=(layers, n)))
        batch = []
        for _ in range(int(rng.integers(1, 5))):
            amps = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
            batch.append(
                EncodedSample(
                    state=StateVector(amps / np.linalg.norm(amps)),
                    label=int(rng.integers(0, head.n_classes)),
                )
            )
        X = np.stack([s.state.amps for s in batch])
        y = np.asarray([s.label for s in batch])

        def loss_at(flat):
            p = ParamVector(flat.reshape(layers, n))
            probs = _probs_from_z(_forward_z(spec, p, X), head)
            picked = probs[np.arange(len(y)), y]
            return float(np.mean(-np.log(picked + 1e-12)))

        grad = parameter_shift_grad(spec, params, head, batch)
        base = params.flat.copy()
        for i in range(base.size):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            fd = (loss_at(up) - loss_at(dn)) / (2 * h)
            worst = max(worst, abs(fd - grad[i]))
    return worst


# ---------------------------------------------------------------------------
# Plotting (CSV + minimal SVG)
# ---------------------------------------------------------------------------


def _group_key(config: configparser.ConfigParser) -> str:
    alg = config.get("run", "algorithm")
    scheme = config.get("partition", "scheme")
    m = config.get("partition", "m")
    return f"{alg}-{scheme}" + (f"-m{m}" if scheme == "cycle" and m != "0" else "")


def _mean_std(series_by_seed: list[dict[int, float]]) -> list[tuple[int, float, float, int]]:
    steps = sorted({s for series in series_by_seed for s in series})
    out = []
    for s in steps:
        vals = [series[s] for series in series_by_seed if s in series]
        out.append((s, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    return out


def _svg_chart(path, title, xlabel, ylabel, series):
    """series: list of (name, points) with points = [(x, mean, std), ...]."""
    width, height, pad = 640, 420, 56
    xs = [p[0] for _, pts in series for p in pts]
    ys = [p[1] + p[2] for _, pts in series for p in pts] + [
        p[1] - p[2] for _, pts in series for p in pts
    ]
    if not xs:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    span_x, span_y = x1 - x0, (y1 - y0) * 1.08

    def sx(x):
        return pad + (x - x0) / span_x * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / span_y * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{width/2:.0f}" y="{height-16}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{height/2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {height/2:.0f})">{ylabel}</text>',
        f'<text x="{pad}" y="{height-pad+16}" font-size="10" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width-pad}" y="{height-pad+16}" font-size="10" text-anchor="middle">{x1:g}</text>',
        f'<text x="{pad-6}" y="{sy(y0):.0f}" font-size="10" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{pad-6}" y="{sy(y1):.0f}" font-size="10" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (name, pts) in enumerate(series):
        color = colors[i % len(colors)]
        if len(pts) > 1 and any(p[2] > 0 for p in pts):
            upper = " ".join(f"{sx(p[0]):.1f},{sy(p[1] + p[2]):.1f}" for p in pts)
            lower = " ".join(f"{sx(p[0]):.1f},{sy(p[1] - p[2]):.1f}" for p in reversed(pts))
            parts.append(f'<polygon points="{upper} {lower}" fill="{color}" opacity="0.15"/>')
        if len(pts) == 1:
            p = pts[0]
            parts.append(f'<circle cx="{sx(p[0]):.1f}" cy="{sy(p[1]):.1f}" r="3" fill="{color}"/>')
        else:
            poly = " ".join(f"{sx(p[0]):.1f},{sy(p[1]):.1f}" for p in pts)
            parts.append(f'<polyline points="{poly}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width-pad+4}" y="{pad + 14*i}" font-size="11" fill="{color}" '
            f'text-anchor="end">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


def cmd_plot(run_dirs: list[str], out: str) -> int:
    out_path = Path(out)
    out_path.mkdir(parents=True, exist_ok=True)
    groups: dict[str, dict] = {}
    for run_dir in run_dirs:
        run = Path(run_dir)
        parser = configparser.ConfigParser()
        if not parser.read(run / "config.ini"):
            raise FileNotFoundError(f"{run}: missing config.ini")
        metrics_path = run / "metrics.ndjson"
        if not metrics_path.exists():
            raise FileNotFoundError(f"{metrics_path}: missing metrics")
        key = _group_key(parser)
        group = groups.setdefault(
            key,
            {
                "m": parser.getint("partition", "m"),
                "loss": [],
                "accuracy": [],
                "final": [],
                "clients": {},
            },
        )
        records = read_metrics(metrics_path)
        loss_series = {
            r["step"]: r["loss"]
            for r in records
            if r["split"] == "train" and r["loss"] is not None
        }
        acc_series = {
            r["step"]: r["accuracy"]
            for r in records
            if r["accuracy"] is not None and not r["split"].startswith("client")
        }
        if loss_series:
            group["loss"].append(loss_series)
        if acc_series:
            group["accuracy"].append(acc_series)
            group["final"].append(acc_series[max(acc_series)])
        client_losses: dict[str, dict[int, float]] = {}
        for r in records:
            if r["split"].endswith("/train") and r["loss"] is not None:
                name = r["split"].split("/")[0]
                client_losses.setdefault(name, {})[r["step"]] = r["loss"]
        for name, series in client_losses.items():
            group["clients"].setdefault(name, []).append(series)

    # curves CSV: stable columns (group, metric, step, mean, std, n)
    rows = ["group,metric,step,mean,std,n"]
    curve_plots = {"loss": [], "accuracy": []}
    for key in sorted(groups):
        for metric in ("loss", "accuracy"):
            if not groups[key][metric]:
                continue
            pts = _mean_std(groups[key][metric])
            rows.extend(f"{key},{metric},{s},{m!r},{sd!r},{n}" for s, m, sd, n in pts)
            curve_plots[metric].append((key, [(s, m, sd) for s, m, sd, _ in pts]))
    (out_path / "curves.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    for metric, series in curve_plots.items():
        if series:
            _svg_chart(
                out_path / f"curves-{metric}.svg",
                f"{metric} vs step",
                "step",
                metric,
                series,
            )

    # local-client training curves (one-shot runs), average series highlighted
    for key in sorted(groups):
        clients = groups[key]["clients"]
        if not clients:
            continue
        rows = ["group,client,step,mean,std,n"]
        series = []
        for name in sorted(clients, key=lambda s: int(s.replace("client", ""))):
            pts = _mean_std(clients[name])
            rows.extend(f"{key},{name},{s},{m!r},{sd!r},{n}" for s, m, sd, n in pts)
            series.append((name, [(s, m, 0.0) for s, m, _, _ in pts]))
        all_series = [pt for _, pts in series for pt in pts]
        steps = sorted({p[0] for p in all_series})
        avg = [
            (s, float(np.mean([p[1] for p in all_series if p[0] == s])), 0.0) for s in steps
        ]
        series.append(("average", avg))
        (out_path / f"client-curves-{key}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        _svg_chart(
            out_path / f"client-curves-{key}.svg",
            f"local training loss ({key})",
            "step",
            "loss",
            series,
        )

    # accuracy vs m for cycle groups
    cycle_groups = {k: g for k, g in groups.items() if "-m" in k and g["final"]}
    if cycle_groups:
        rows = ["group,m,accuracy_mean,accuracy_std,n"]
        by_alg: dict[str, list] = {}
        for key in sorted(cycle_groups):
            g = cycle_groups[key]
            mean, std = float(np.mean(g["final"])), float(np.std(g["final"]))
            rows.append(f"{key},{g['m']},{mean!r},{std!r},{len(g['final'])}")
            alg = key.split("-")[0]
            by_alg.setdefault(alg, []).append((g["m"], mean, std))
        (out_path / "accuracy_vs_m.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        series = [(alg, sorted(pts)) for alg, pts in sorted(by_alg.items())]
        _svg_chart(
            out_path / "accuracy_vs_m.svg",
            "final accuracy vs classes per client",
            "m",
            "accuracy",
            series,
        )
    print(f"wrote plots to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfed", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qfed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="experiment config file (INI)")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--full-scale", action="store_true", help="use full-scale settings")

    add_config_args(sub.add_parser("partition", help="write partition manifest and EMD table"))
    add_config_args(sub.add_parser("train", help="run the configured experiment end to end"))
    add_config_args(sub.add_parser("emd", help="print the per-client EMD table"))

    p_infer = sub.add_parser("infer", help="run one-shot inference from a saved bundle")
    add_config_args(p_infer)
    p_infer.add_argument("--bundle", required=True, help="ensemble bundle directory")
    p_infer.add_argument("--index", type=int, default=0, help="sample index in the dataset")
    p_infer.add_argument("--mode", choices=("expectation", "random"), default="expectation")

    p_verify = sub.add_parser("verify", help="run a verification oracle suite")
    p_verify.add_argument("which", choices=("theorem1", "prop1", "gradients", "all"))
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--instances", type=int, default=100)

    p_plot = sub.add_parser("plot", help="emit CSV and SVG charts from run directories")
    p_plot.add_argument("runs", nargs="+", help="run directories with metrics.ndjson")
    p_plot.add_argument("--out", default="plots")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "full_scale", False):
        cfg.full_scale = True
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "partition":
            return cmd_partition(_config_from_args(args))
        if args.command == "train":
            return cmd_train(_config_from_args(args))
        if args.command == "emd":
            return cmd_emd(_config_from_args(args))
        if args.command == "infer":
            return cmd_infer(
                _config_from_args(args), args.bundle, args.index, args.mode, args.seed or 0
            )
        if args.command == "verify":
            return cmd_verify(args.which, args.seed, args.instances)
        if args.command == "plot":
            return cmd_plot(args.runs, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
