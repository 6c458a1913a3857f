"""Variational quantum classifier: forward pass, loss, gradients, training.

Logit k of a sample is the expectation <Z_k> on qubit k after the circuit,
amplified by ``head.scale`` and fed through softmax.  Gradients are exact
parameter-shift values,

    d<Z_k>/dtheta_p = (<Z_k>(theta_p + pi/2) - <Z_k>(theta_p - pi/2)) / 2,

with the softmax/cross-entropy outer derivative in closed form.  The shifted
evaluations reuse the stored layer states of the forward pass: adding an
extra R_y(+-pi/2) after a layer equals shifting that layer's angle, because
same-qubit R_y rotations add.

Everything is deterministic under a fixed seed: mini-batch order comes from a
seeded generator and all reductions run in fixed index order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset, LabelDistribution
from .qsim import (
    CircuitSpec,
    ParamVector,
    RotationAxis,
    StateVector,
    _apply_rotation_inplace,
    _expect_z_all,
    _layer_matrix_t,
)

CROSS_ENTROPY_EPS = 1e-12


@dataclass(frozen=True)
class ClassifierHead:
    """Readout: softmax over the first ``n_classes`` qubits' <Z_k>, amplified."""

    n_classes: int
    scale: float = 10.0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 128
    epochs: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    optimizer: str = "adam"  # "adam" or "sgd" (plain gradient descent)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not (0.0 <= b < 1.0):
                raise ValueError("adam betas must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        m = np.asarray(self.first_moment, dtype=np.float64)
        v = np.asarray(self.second_moment, dtype=np.float64)
        if m.shape != v.shape or m.ndim != 1:
            raise ValueError("moment vectors must be 1-D with equal length")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")
        m.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "first_moment", m)
        object.__setattr__(self, "second_moment", v)

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0)


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    epoch_accuracies: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Batched internals
# ---------------------------------------------------------------------------


def design_matrix(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack encoded samples into (X, y); X is float64 when amplitudes are real."""
    if isinstance(samples, ClientDataset):
        samples = samples.samples
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    amps = np.stack([s.state.amps for s in samples])
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    if np.all(amps.imag == 0.0):
        return np.ascontiguousarray(amps.real), labels
    return amps, labels


def _layer_matrices(spec: CircuitSpec, params: ParamVector) -> list[np.ndarray]:
    return [
        _layer_matrix_t(spec.n_qubits, spec.cnot_pattern, params.values[layer])
        for layer in range(spec.n_layers)
    ]


def _forward_layer_states(
    spec: CircuitSpec, layer_ts: list[np.ndarray], X: np.ndarray
) -> list[np.ndarray]:
    """States after each layer: result[j] is the batch after layers 0..j-1."""
    states = [X]
    work = X
    for m in layer_ts:
        work = work @ m
        states.append(work)
    return states


def _forward_z(spec: CircuitSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    layer_ts = _layer_matrices(spec, params)
    work = X
    if X.shape[0] >= spec.dim and layer_ts:
        # composing the circuit first is cheaper than chaining a large batch
        full = layer_ts[0]
        for m in layer_ts[1:]:
            full = full @ m
        work = X @ full
    else:
        for m in layer_ts:
            work = work @ m
    return _expect_z_all(work, spec.n_qubits)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _probs_from_z(z: np.ndarray, head: ClassifierHead) -> np.ndarray:
    return _softmax(head.scale * z[:, : head.n_classes])


def _batch_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(picked + CROSS_ENTROPY_EPS)))


def _outer_gradient(probs: np.ndarray, labels: np.ndarray, head: ClassifierHead, n_qubits: int) -> np.ndarray:
    """d(mean clamped cross-entropy)/d<Z_q> per sample, zero beyond the head."""
    b = len(labels)
    picked = probs[np.arange(b), labels]
    clamp = picked / (picked + CROSS_ENTROPY_EPS)  # eps-clamp factor of -log(p + eps)
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), labels] = 1.0
    # dL/dz_j = (p_y/(p_y+eps)) * (p_j - delta_jy) per sample, z = scale * <Z>.
    d_logits = clamp[:, None] * (probs - onehot)
    out = np.zeros((b, n_qubits))
    out[:, : head.n_classes] = head.scale * d_logits / b
    return out


def _grad_mean_loss(
    spec: CircuitSpec,
    params: ParamVector,
    head: ClassifierHead,
    X: np.ndarray,
    labels: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Parameter-shift gradient of the mean batch loss; returns (flat grad, loss)."""
    b, n = X.shape[0], spec.n_qubits
    layer_ts = _layer_matrices(spec, params)
    states = _forward_layer_states(spec, layer_ts, X)
    z = _expect_z_all(states[-1], n)
    probs = _probs_from_z(z, head)
    loss = _batch_loss(probs, labels)
    outer = _outer_gradient(probs, labels, head, n)

    # suffixes[j] maps the state after layer j to the circuit output
    suffixes: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    suffix = np.eye(spec.dim)
    for j in range(spec.n_layers - 1, -1, -1):
        suffixes[j] = suffix
        suffix = layer_ts[j] @ suffix

    grad = np.zeros((spec.n_layers, n))
    half_pi = np.pi / 2.0
    for layer in range(spec.n_layers):
        base = states[layer + 1]
        # an extra R_y(+-pi/2) after layer j equals shifting angle (j, q)
        stack = np.empty((2, n) + base.shape, dtype=base.dtype)
        for q in range(n):
            for si, sign in enumerate((+1.0, -1.0)):
                shifted = base.copy()
                _apply_rotation_inplace(shifted, n, q, sign * half_pi)
                stack[si, q] = shifted
        flat = stack.reshape(2 * n * b, base.shape[1]) @ suffixes[layer]
        z_shift = _expect_z_all(flat, n).reshape(2, n, b, n)
        dz = (z_shift[0] - z_shift[1]) / 2.0  # (shifted qubit, batch, measured qubit)
        grad[layer] = np.einsum("qbk,bk->q", dz, outer)
    return grad.reshape(-1), loss


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def init_params(spec: CircuitSpec, seed: int) -> ParamVector:
    """Small-angle start: uniform on [-pi/100, pi/100], seeded."""
    rng = np.random.default_rng(seed)
    lim = np.pi / 100.0
    return ParamVector(rng.uniform(-lim, lim, size=(spec.n_layers, spec.n_qubits)))


def forward_probs(
    spec: CircuitSpec, params: ParamVector, head: ClassifierHead, sample: StateVector
) -> LabelDistribution:
    """softmax(scale * <Z_k>) over the first n_classes qubits."""
    if sample.n_qubits != spec.n_qubits:
        raise ValueError(f"sample has {sample.n_qubits} qubits, circuit expects {spec.n_qubits}")
    if head.n_classes > spec.n_qubits:
        raise ValueError(f"head reads {head.n_classes} qubits but circuit has {spec.n_qubits}")
    z = _forward_z(spec, params, sample.amps[None, :])
    return LabelDistribution(_probs_from_z(z, head)[0])


def cross_entropy(probs: LabelDistribution, label: int) -> float:
    """-log(probs_label + 1e-12); finite even at probability zero."""
    if not (0 <= label < len(probs)):
        raise ValueError(f"label {label} out of range for {len(probs)} classes")
    return float(-np.log(probs.probs[label] + CROSS_ENTROPY_EPS))


def parameter_shift_grad(
    spec: CircuitSpec, params: ParamVector, head: ClassifierHead, batch
) -> np.ndarray:
    """Gradient of the mean batch loss w.r.t. every angle, flattened (layer, qubit)."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    X, y = design_matrix(batch)
    grad, _ = _grad_mean_loss(spec, params, head, X, y)
    return grad


def adam_step(
    params: ParamVector, grads, state: AdamState, cfg: TrainConfig
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; returns fresh parameter and state values."""
    g = np.asarray(grads, dtype=np.float64).reshape(-1)
    theta = params.flat
    if g.size != theta.size or state.first_moment.size != theta.size:
        raise ValueError(
            f"length mismatch: params {theta.size}, grads {g.size}, "
            f"moments {state.first_moment.size}"
        )
    t = state.step_count + 1
    m = cfg.adam_beta1 * state.first_moment + (1.0 - cfg.adam_beta1) * g
    v = cfg.adam_beta2 * state.second_moment + (1.0 - cfg.adam_beta2) * g**2
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    new_params = ParamVector(theta.reshape(params.values.shape))
    return new_params, AdamState(m, v, t)


def _opt_step(
    params: ParamVector, grads: np.ndarray, state: AdamState, cfg: TrainConfig
) -> tuple[ParamVector, AdamState]:
    if cfg.optimizer == "sgd":
        theta = params.flat - cfg.learning_rate * grads
        return ParamVector(theta.reshape(params.values.shape)), AdamState(
            state.first_moment, state.second_moment, state.step_count + 1
        )
    return adam_step(params, grads, state, cfg)


def _accuracy(
    spec: CircuitSpec, params: ParamVector, head: ClassifierHead, X: np.ndarray, y: np.ndarray
) -> float:
    correct = 0
    for start in range(0, X.shape[0], 1024):
        z = _forward_z(spec, params, X[start : start + 1024])
        probs = _probs_from_z(z, head)
        correct += int(np.sum(np.argmax(probs, axis=1) == y[start : start + 1024]))
    return correct / X.shape[0]


def train(
    spec: CircuitSpec,
    init: ParamVector,
    head: ClassifierHead,
    dataset,
    cfg: TrainConfig,
    opt_state: AdamState | None = None,
    snapshot_steps: bool = False,
):
    """Mini-batch training: seeded shuffle per epoch, short final batch kept.

    Returns (params, TrainLog); with ``snapshot_steps`` also the flat parameter
    vector after every optimizer step (for trajectory comparisons).
    """
    X, y = design_matrix(dataset)
    if init.values.shape != (spec.n_layers, spec.n_qubits):
        raise ValueError("initial parameters do not match the circuit spec")
    rng = np.random.default_rng(cfg.seed)
    params = init
    state = opt_state if opt_state is not None else AdamState.zeros(spec.n_params)
    log = TrainLog()
    snapshots: list[np.ndarray] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            grad, loss = _grad_mean_loss(spec, params, head, X[idx], y[idx])
            params, state = _opt_step(params, grad, state, cfg)
            log.step_losses.append(loss)
            if snapshot_steps:
                snapshots.append(params.flat.copy())
        log.epoch_accuracies.append(_accuracy(spec, params, head, X, y))
    if snapshot_steps:
        return params, log, snapshots
    return params, log


def evaluate(spec: CircuitSpec, params: ParamVector, head: ClassifierHead, test) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    test = list(test)
    if not test:
        raise ValueError("empty test set")
    X, y = design_matrix(test)
    return _accuracy(spec, params, head, X, y)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    spec: CircuitSpec,
    params: ParamVector,
    head: ClassifierHead | None = None,
    opt_state: AdamState | None = None,
    rng_state: dict | None = None,
) -> None:
    """Versioned JSON checkpoint; floats round-trip bit-exactly via repr."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": "qfed-checkpoint",
        "circuit": {
            "n_qubits": spec.n_qubits,
            "n_layers": spec.n_layers,
            "cnot_pattern": [list(p) for p in spec.cnot_pattern],
            "rotation_axis": spec.rotation_axis.value,
        },
        "params": params.flat.tolist(),
        "head": None if head is None else {"n_classes": head.n_classes, "scale": head.scale},
        "adam": None
        if opt_state is None
        else {
            "first_moment": opt_state.first_moment.tolist(),
            "second_moment": opt_state.second_moment.tolist(),
            "step_count": opt_state.step_count,
        },
        "rng_state": rng_state,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


@dataclass(frozen=True)
class Checkpoint:
    spec: CircuitSpec
    params: ParamVector
    head: ClassifierHead | None
    opt_state: AdamState | None
    rng_state: dict | None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "qfed-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    c = doc["circuit"]
    spec = CircuitSpec(
        n_qubits=c["n_qubits"],
        n_layers=c["n_layers"],
        cnot_pattern=tuple(tuple(p) for p in c["cnot_pattern"]),
        rotation_axis=RotationAxis(c["rotation_axis"]),
    )
    params = ParamVector.from_flat(np.asarray(doc["params"], dtype=np.float64), spec)
    head = None
    if doc.get("head"):
        head = ClassifierHead(n_classes=doc["head"]["n_classes"], scale=doc["head"]["scale"])
    opt_state = None
    if doc.get("adam"):
        a = doc["adam"]
        opt_state = AdamState(
            np.asarray(a["first_moment"], dtype=np.float64),
            np.asarray(a["second_moment"], dtype=np.float64),
            a["step_count"],
        )
    return Checkpoint(spec=spec, params=params, head=head, opt_state=opt_state, rng_state=doc.get("rng_state"))
