"""One-shot federated inference: local training, density-gated mixing, oracles.

Protocol: every client trains a local classifier and a local density model on
its own data and uploads both exactly once.  At inference the server turns
the density values into weights

    q_i = D_i(x) * p_i / sum_j D_j(x) * p_j

and either mixes the local outputs with those weights (deterministic) or
draws one local model with probability q_i (the literal protocol; equal in
expectation).  The exact-decomposition oracle checks, by brute-force
density-matrix arithmetic on small systems, that conditioning a mixture on a
pure query and channel-mapping it equals the q-weighted sum of the per-client
conditioned-and-mapped states, entrywise.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClientDataset, LabelDistribution
from .density import (
    DensityEstimate,
    GmmDensityModel,
    gmm_fit,
    gmm_log_density_batch,
    load_density_model,
    mixture_weights,
    mixture_weights_from_log,
    quantum_density,
    save_density_model,
)
from .federation import CommMeter, param_payload_bytes
from .model import (
    ClassifierHead,
    TrainConfig,
    TrainLog,
    _forward_z,
    _probs_from_z,
    design_matrix,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .qsim import (
    CircuitSpec,
    DensityMatrix,
    KrausChannel,
    ParamVector,
    StateVector,
    density_from_mixture,
    random_kraus_channel,
)


class InferenceMode(enum.Enum):
    RANDOM_SELECT = "random"  # draw one local channel with probability q_i
    EXPECTATION_MIX = "expectation"  # deterministic sum_i q_i * output_i


@dataclass(frozen=True)
class LocalChannel:
    client_id: int
    spec: CircuitSpec
    params: ParamVector
    head: ClassifierHead


@dataclass(frozen=True)
class FederatedEnsemble:
    """Everything the server holds after one-shot training."""

    channels: tuple[LocalChannel, ...]
    densities: tuple  # GmmDensityModel per client, or DensityMatrix in oracle mode
    client_weights: np.ndarray  # p_Ci

    def __post_init__(self):
        w = np.asarray(self.client_weights, dtype=np.float64)
        channels = tuple(self.channels)
        densities = tuple(self.densities)
        if not (len(channels) == len(densities) == w.size):
            raise ValueError("channels, densities, and weights must have equal length")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("client weights must be non-negative and sum to 1")
        order = np.argsort([ch.client_id for ch in channels])
        channels = tuple(channels[i] for i in order)
        densities = tuple(densities[i] for i in order)
        w = w[order]
        w.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "densities", densities)
        object.__setattr__(self, "client_weights", w)

    @property
    def n_clients(self) -> int:
        return len(self.channels)


@dataclass
class TrainClientsResult:
    ensemble: FederatedEnsemble
    logs: dict[int, TrainLog]
    comm: CommMeter


def train_clients(
    clients: list[ClientDataset],
    local_spec: CircuitSpec,
    head: ClassifierHead,
    cfg: TrainConfig,
    gmm_modes: int = 5,
) -> TrainClientsResult:
    """Train one channel and one density model per client; one upload each.

    Each client optimizes only its own data (full class head, so heads stay
    interchangeable at inference) and fits a GMM on its real amplitude
    vectors.  The meter records n uploads and zero download rounds.
    """
    if not clients:
        raise ValueError("need at least one client")
    total_w = sum(c.weight_p for c in clients)
    if abs(total_w - 1.0) > 1e-9:
        raise ValueError(f"client weights must sum to 1, got {total_w!r}")
    seed_children = np.random.SeedSequence(cfg.seed).spawn(len(clients))
    channels, densities, logs = [], [], {}
    meter = CommMeter()
    for client, child in zip(clients, seed_children):
        if len(client) == 0:
            raise ValueError(f"client {client.client_id} has no samples")
        client_seed = int(child.generate_state(1)[0])
        local_cfg = TrainConfig(
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            adam_beta1=cfg.adam_beta1,
            adam_beta2=cfg.adam_beta2,
            adam_eps=cfg.adam_eps,
            seed=client_seed,
            optimizer=cfg.optimizer,
        )
        params, log = train(
            local_spec, init_params(local_spec, client_seed), head, client, local_cfg
        )
        X, _ = design_matrix(client)
        density = gmm_fit(X, n_modes=min(gmm_modes, X.shape[0]), seed=client_seed)
        channels.append(
            LocalChannel(client_id=client.client_id, spec=local_spec, params=params, head=head)
        )
        densities.append(density)
        logs[client.client_id] = log
        meter.messages_up += 1
        meter.bytes_up += param_payload_bytes(local_spec) + _gmm_payload_bytes(density)
    ensemble = FederatedEnsemble(
        channels=tuple(channels),
        densities=tuple(densities),
        client_weights=np.asarray([c.weight_p for c in clients]),
    )
    return TrainClientsResult(ensemble=ensemble, logs=logs, comm=meter)


def _gmm_payload_bytes(model: GmmDensityModel) -> int:
    return 8 * (model.n_modes + 2 * model.n_modes * model.dim)


def ensemble_weights(ensemble: FederatedEnsemble, state: StateVector) -> DensityEstimate:
    """Decomposition weights q_i for one query state."""
    first = ensemble.densities[0]
    if isinstance(first, DensityMatrix):
        raw = [quantum_density(d, state) for d in ensemble.densities]
        return mixture_weights(raw, ensemble.client_weights)
    feats = state.amps.real[None, :]
    logs = np.array(
        [float(gmm_log_density_batch(d, feats)[0]) for d in ensemble.densities]
    )
    return mixture_weights_from_log(logs, ensemble.client_weights)


def infer(
    ensemble: FederatedEnsemble,
    state: StateVector,
    mode: InferenceMode = InferenceMode.EXPECTATION_MIX,
    rng: np.random.Generator | None = None,
) -> LabelDistribution:
    """One-shot federated inference on a single encoded sample."""
    for ch in ensemble.channels:
        if ch.spec.n_qubits != state.n_qubits:
            raise ValueError(
                f"query has {state.n_qubits} qubits, channel expects {ch.spec.n_qubits}"
            )
    q = ensemble_weights(ensemble, state).weights
    if mode is InferenceMode.RANDOM_SELECT:
        if rng is None:
            rng = np.random.default_rng()
        pick = int(rng.choice(len(q), p=q))
        ch = ensemble.channels[pick]
        z = _forward_z(ch.spec, ch.params, state.amps[None, :])
        return LabelDistribution(_probs_from_z(z, ch.head)[0])
    head = ensemble.channels[0].head
    mixed = np.zeros(head.n_classes)
    for qi, ch in zip(q, ensemble.channels):  # channels are sorted by client id
        z = _forward_z(ch.spec, ch.params, state.amps[None, :])
        mixed = mixed + qi * _probs_from_z(z, ch.head)[0]
    return LabelDistribution(mixed)


def evaluate_ensemble(
    ensemble: FederatedEnsemble,
    test,
    mode: InferenceMode = InferenceMode.EXPECTATION_MIX,
    rng: np.random.Generator | None = None,
) -> float:
    """Top-1 accuracy of the mixed global model over a test set (vectorized)."""
    test = list(test)
    if not test:
        raise ValueError("empty test set")
    X, y = design_matrix(test)
    probs = _ensemble_probs_batch(ensemble, X, mode, rng)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def _ensemble_probs_batch(
    ensemble: FederatedEnsemble,
    X: np.ndarray,
    mode: InferenceMode = InferenceMode.EXPECTATION_MIX,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    n, b = ensemble.n_clients, X.shape[0]
    first = ensemble.densities[0]
    if isinstance(first, DensityMatrix):
        raw = np.stack(
            [
                np.clip(np.einsum("bi,ij,bj->b", X.conj(), d.entries, X).real, 0.0, 1.0)
                for d in ensemble.densities
            ],
            axis=1,
        )
        mass = raw * ensemble.client_weights[None, :]
    else:
        feats = X.real if np.iscomplexobj(X) else X
        log_d = np.stack(
            [gmm_log_density_batch(d, feats) for d in ensemble.densities], axis=1
        )
        shift = log_d - log_d.max(axis=1, keepdims=True)
        mass = np.exp(shift) * ensemble.client_weights[None, :]
    totals = mass.sum(axis=1, keepdims=True)
    q = np.where(totals > 0, mass / np.where(totals > 0, totals, 1.0), ensemble.client_weights)

    head = ensemble.channels[0].head
    per_client = np.empty((n, b, head.n_classes))
    for i, ch in enumerate(ensemble.channels):
        z = _forward_z(ch.spec, ch.params, X)
        per_client[i] = _probs_from_z(z, ch.head)
    if mode is InferenceMode.RANDOM_SELECT:
        if rng is None:
            rng = np.random.default_rng()
        cum = np.cumsum(q, axis=1)
        picks = (rng.random(b)[:, None] > cum).sum(axis=1)
        picks = np.minimum(picks, n - 1)
        return per_client[picks, np.arange(b)]
    return np.einsum("bi,ibk->bk", q, per_client)


# ---------------------------------------------------------------------------
# Exact decomposition oracle (brute-force density-matrix arithmetic)
# ---------------------------------------------------------------------------


@dataclass
class Theorem1Report:
    max_deviation: float
    n_checked: int
    n_skipped: int  # queries with zero support on the mixture
    tol: float
    details: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.n_checked > 0 and self.max_deviation <= self.tol


def verify_theorem1(
    client_states: list[list[StateVector]],
    channel: KrausChannel,
    queries: list[StateVector],
    tol: float = 1e-10,
) -> Theorem1Report:
    """Check the exact channel decomposition on one small instance.

    LHS: condition the global mixture rho_x on the query projector and apply
    the fixed channel.  RHS: per client, condition the local mixture, apply
    the same channel, and combine with the exact-density weights q_i.  Both
    sides are computed by direct matrix arithmetic and compared entrywise.
    """
    if not client_states or any(len(s) == 0 for s in client_states):
        raise ValueError("every client needs at least one state")
    counts = np.array([len(s) for s in client_states], dtype=np.float64)
    p = counts / counts.sum()
    rhos = [
        density_from_mixture(states, np.full(len(states), 1.0 / len(states)))
        for states in client_states
    ]
    dim = rhos[0].dim
    if channel.dim != dim:
        raise ValueError(f"channel dim {channel.dim} does not match data dim {dim}")
    rho_x = np.zeros((dim, dim), dtype=np.complex128)
    for pi, rho in zip(p, rhos):
        rho_x += pi * rho.entries

    max_dev = 0.0
    checked = skipped = 0
    details = []
    for psi in queries:
        proj = np.outer(psi.amps, psi.amps.conj())
        support = float(np.trace(proj @ rho_x).real)
        if support <= 1e-14:
            skipped += 1
            details.append({"support": support, "skipped": True})
            continue
        lhs = channel.apply_matrix(proj @ rho_x @ proj / support)

        raw = [quantum_density(rho, psi) for rho in rhos]
        q = mixture_weights(raw, p).weights
        rhs = np.zeros_like(lhs)
        for qi, rho, d in zip(q, rhos, raw):
            if qi == 0.0 or d <= 0.0:
                continue  # zero-density client: conditional state undefined, weight 0
            conditional = proj @ rho.entries @ proj / d
            rhs += qi * channel.apply_matrix(conditional)
        dev = float(np.max(np.abs(lhs - rhs)))
        max_dev = max(max_dev, dev)
        checked += 1
        details.append({"support": support, "deviation": dev, "skipped": False})
    return Theorem1Report(
        max_deviation=max_dev, n_checked=checked, n_skipped=skipped, tol=tol, details=details
    )


def _random_pure_state(dim: int, rng: np.random.Generator, real: bool = False) -> StateVector:
    amps = rng.normal(size=dim) + (0.0 if real else 1j * rng.normal(size=dim))
    return StateVector(amps / np.linalg.norm(amps))


def run_theorem1_suite(
    n_instances: int = 100,
    seed: int = 0,
    max_qubits: int = 2,
    max_clients: int = 4,
    max_states: int = 4,
    n_queries: int = 5,
    tol: float = 1e-10,
) -> Theorem1Report:
    """Randomized decomposition check: random mixtures, channels, and queries."""
    rng = np.random.default_rng(seed)
    max_dev, checked, skipped = 0.0, 0, 0
    for _ in range(n_instances):
        n_qubits = int(rng.integers(1, max_qubits + 1))
        dim = 2**n_qubits
        n_clients = int(rng.integers(1, max_clients + 1))
        clients = [
            [_random_pure_state(dim, rng) for _ in range(int(rng.integers(1, max_states + 1)))]
            for _ in range(n_clients)
        ]
        channel = random_kraus_channel(dim, int(rng.integers(1, 4)), rng)
        queries = [_random_pure_state(dim, rng) for _ in range(n_queries)]
        queries.append(clients[0][0])  # always include a dataset state
        report = verify_theorem1(clients, channel, queries, tol=tol)
        max_dev = max(max_dev, report.max_deviation)
        checked += report.n_checked
        skipped += report.n_skipped
    return Theorem1Report(
        max_deviation=max_dev, n_checked=checked, n_skipped=skipped, tol=tol
    )


# ---------------------------------------------------------------------------
# Generative-mixture check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureReport:
    trace_distance: float
    fidelity: float


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def generative_mixture_check(
    local_states: list[DensityMatrix], weights, target: DensityMatrix
) -> MixtureReport:
    """Form sum_i p_i rho_i and report trace distance and fidelity to a target."""
    w = np.asarray(weights, dtype=np.float64)
    if len(local_states) != w.size or len(local_states) == 0:
        raise ValueError("need one weight per local state")
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    dim = target.dim
    mixed = np.zeros((dim, dim), dtype=np.complex128)
    for wi, rho in zip(w, local_states):
        if rho.dim != dim:
            raise ValueError("dimension mismatch between local states and target")
        mixed += wi * rho.entries
    diff_eigs = np.linalg.eigvalsh(mixed - target.entries)
    trace_distance = 0.5 * float(np.sum(np.abs(diff_eigs)))
    root = _sqrtm_psd(target.entries)
    fid_eigs = np.linalg.eigvalsh(root @ mixed @ root)
    fidelity = float(np.sum(np.sqrt(np.clip(fid_eigs, 0.0, None)))) ** 2
    return MixtureReport(trace_distance=trace_distance, fidelity=min(fidelity, 1.0))


# ---------------------------------------------------------------------------
# Ensemble bundle directory
# ---------------------------------------------------------------------------

BUNDLE_VERSION = 1


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def save_ensemble(ensemble: FederatedEnsemble, directory) -> None:
    """Write one channel checkpoint and one density file per client plus a
    manifest with client weights and content digests."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for ch, density in zip(ensemble.channels, ensemble.densities):
        if not isinstance(density, GmmDensityModel):
            raise ValueError("only GMM-backed ensembles can be saved")
        ch_name = f"channel-{ch.client_id}.json"
        de_name = f"density-{ch.client_id}.json"
        save_checkpoint(directory / ch_name, ch.spec, ch.params, head=ch.head)
        save_density_model(density, directory / de_name)
        files[ch_name] = _sha256(directory / ch_name)
        files[de_name] = _sha256(directory / de_name)
    manifest = {
        "version": BUNDLE_VERSION,
        "kind": "qfed-ensemble",
        "client_ids": [ch.client_id for ch in ensemble.channels],
        "client_weights": ensemble.client_weights.tolist(),
        "files": files,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_ensemble(directory) -> FederatedEnsemble:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "qfed-ensemble":
        raise ValueError(f"{directory}: not an ensemble bundle")
    if manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{directory}: unsupported bundle version")
    for name, digest in manifest["files"].items():
        actual = _sha256(directory / name)
        if actual != digest:
            raise ValueError(f"{directory / name}: content digest mismatch")
    channels, densities = [], []
    for cid in manifest["client_ids"]:
        ckpt = load_checkpoint(directory / f"channel-{cid}.json")
        if ckpt.head is None:
            raise ValueError(f"channel {cid} checkpoint is missing its head")
        channels.append(
            LocalChannel(client_id=cid, spec=ckpt.spec, params=ckpt.params, head=ckpt.head)
        )
        densities.append(load_density_model(directory / f"density-{cid}.json"))
    return FederatedEnsemble(
        channels=tuple(channels),
        densities=tuple(densities),
        client_weights=np.asarray(manifest["client_weights"], dtype=np.float64),
    )
