"""Centralized baseline, federated averaging, and the weight-divergence bound.

Federated averaging: every round the server broadcasts the global parameters,
each client takes ``sync_period_T`` local optimizer steps on its own data,
and the server replaces the global parameters by the p_Ci-weighted average,
summed in client-index order.  Per-client optimizer moments and batch
schedules persist across rounds; only parameters are averaged.

The divergence bound evaluator implements

    Delta_mT <= sum_i p_i a_i^T Delta_prev
               + eta sum_i p_i EMD_i sum_{j=1}^{T-1} a_i^j g(w^c_{mT-1-j})

with a_i = 1 + eta sum_k p_i(y=k) lambda_k.  It is exercised on a synthetic
family of per-class quadratic losses f_k(w) = lambda_k/2 ||w - c_k||^2 whose
conditional gradients are exactly lambda_k-Lipschitz, trained by plain
gradient descent, where the inequality's hypotheses hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset, LabelDistribution, emd
from .model import (
    AdamState,
    ClassifierHead,
    ParamVector,
    TrainConfig,
    _grad_mean_loss,
    _opt_step,
    design_matrix,
    train,
)
from .qsim import CircuitSpec


@dataclass(frozen=True)
class FedAvgConfig:
    sync_period_T: int = 1
    rounds: int = 0  # 0 = derive from train.epochs and the largest client
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.sync_period_T < 1:
            raise ValueError("sync_period_T must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass
class CommMeter:
    """Message and byte counters for a federated run (uploads are client->server)."""

    rounds: int = 0
    messages_up: int = 0
    messages_down: int = 0
    bytes_up: int = 0
    bytes_down: int = 0


def param_payload_bytes(spec: CircuitSpec) -> int:
    return spec.n_params * 8  # float64 angles


@dataclass(frozen=True)
class DivergenceTrace:
    steps: tuple[int, ...]
    deltas: tuple[float, ...]
    g_values: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.steps) != len(self.deltas):
            raise ValueError("steps and deltas must have equal length")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("step indices must be strictly increasing")
        if any(d < 0 for d in self.deltas):
            raise ValueError("divergence values cannot be negative")


# ---------------------------------------------------------------------------
# Centralized baseline
# ---------------------------------------------------------------------------


def train_centralized(
    spec: CircuitSpec,
    head: ClassifierHead,
    dataset,
    cfg: TrainConfig,
    init: ParamVector | None = None,
    snapshot_steps: bool = False,
):
    """Plain single-node training on the merged dataset (the comparison baseline)."""
    if init is None:
        from .model import init_params

        init = init_params(spec, cfg.seed)
    return train(spec, init, head, dataset, cfg, snapshot_steps=snapshot_steps)


# ---------------------------------------------------------------------------
# Federated averaging
# ---------------------------------------------------------------------------


@dataclass
class _ClientRunState:
    X: np.ndarray
    y: np.ndarray
    weight: float
    opt: AdamState
    rng: np.random.Generator
    perm: np.ndarray
    cursor: int = 0

    def next_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        if self.cursor >= self.perm.size:
            self.perm = self.rng.permutation(self.X.shape[0])
            self.cursor = 0
        idx = self.perm[self.cursor : self.cursor + batch_size]
        self.cursor += batch_size
        return self.X[idx], self.y[idx]


def _client_states(
    clients: list[ClientDataset], spec: CircuitSpec, cfg: FedAvgConfig
) -> list[_ClientRunState]:
    if not clients:
        raise ValueError("need at least one client")
    total_w = sum(c.weight_p for c in clients)
    if abs(total_w - 1.0) > 1e-9:
        raise ValueError(f"client weights must sum to 1, got {total_w!r}")
    states = []
    seed_seq = np.random.SeedSequence(cfg.train.seed)
    children = seed_seq.spawn(len(clients))
    for client, child in zip(clients, children):
        X, y = design_matrix(client)
        if X.shape[1] != spec.dim:
            raise ValueError(
                f"client {client.client_id} data dimension {X.shape[1]} does not "
                f"match the circuit ({spec.dim})"
            )
        rng = np.random.default_rng(child)
        states.append(
            _ClientRunState(
                X=X,
                y=y,
                weight=client.weight_p,
                opt=AdamState.zeros(spec.n_params),
                rng=rng,
                perm=rng.permutation(X.shape[0]),
            )
        )
    return states


def fedavg_round(
    spec: CircuitSpec,
    head: ClassifierHead,
    clients: list[ClientDataset],
    global_params: ParamVector,
    cfg: FedAvgConfig,
    states: list[_ClientRunState] | None = None,
) -> tuple[ParamVector, list[list[float]], list[_ClientRunState]]:
    """One averaging round: broadcast, T local steps per client, weighted average.

    ``states`` carries per-client optimizer moments and batch schedules across
    rounds; omit it for a single stateless round.
    """
    if states is None:
        states = _client_states(clients, spec, cfg)
    local_losses: list[list[float]] = []
    local_params: list[np.ndarray] = []
    for st in states:
        params = global_params
        losses = []
        for _ in range(cfg.sync_period_T):
            bx, by = st.next_batch(cfg.train.batch_size)
            grad, loss = _grad_mean_loss(spec, params, head, bx, by)
            params, st.opt = _opt_step(params, grad, st.opt, cfg.train)
            losses.append(loss)
        local_losses.append(losses)
        local_params.append(params.flat)
    avg = np.zeros(spec.n_params)
    for st, w in zip(states, local_params):
        avg = avg + st.weight * w
    return ParamVector(avg.reshape(spec.n_layers, spec.n_qubits)), local_losses, states


def rounds_for_epochs(clients: list[ClientDataset], cfg: FedAvgConfig) -> int:
    """Rounds so the largest client passes over its data ``train.epochs`` times."""
    steps_per_epoch = max(
        int(np.ceil(len(c) / cfg.train.batch_size)) for c in clients
    )
    return max(1, int(np.ceil(cfg.train.epochs * steps_per_epoch / cfg.sync_period_T)))


@dataclass
class FedAvgResult:
    params: ParamVector
    sync_params: list[np.ndarray]  # flat global parameters after each round
    round_losses: list[float]  # client-weighted mean local loss per round
    comm: CommMeter
    eval_trace: list[tuple[int, float]] = field(default_factory=list)


def run_fedavg(
    spec: CircuitSpec,
    head: ClassifierHead,
    clients: list[ClientDataset],
    cfg: FedAvgConfig,
    init: ParamVector | None = None,
    eval_fn=None,
    eval_every: int = 0,
) -> FedAvgResult:
    """Full qFedAvg run; ``eval_fn(params) -> float`` is sampled every
    ``eval_every`` rounds (and always after the last round)."""
    if init is None:
        from .model import init_params

        init = init_params(spec, cfg.train.seed)
    rounds = cfg.rounds if cfg.rounds > 0 else rounds_for_epochs(clients, cfg)
    states = _client_states(clients, spec, cfg)
    payload = param_payload_bytes(spec)
    meter = CommMeter()
    params = init
    result = FedAvgResult(params=params, sync_params=[], round_losses=[], comm=meter)
    for r in range(rounds):
        params, local_losses, states = fedavg_round(spec, head, clients, params, cfg, states)
        meter.rounds += 1
        meter.messages_down += len(clients)
        meter.bytes_down += len(clients) * payload
        meter.messages_up += len(clients)
        meter.bytes_up += len(clients) * payload
        mean_loss = float(
            sum(st.weight * np.mean(ls) for st, ls in zip(states, local_losses))
        )
        result.round_losses.append(mean_loss)
        result.sync_params.append(params.flat.copy())
        if eval_fn is not None and (
            (eval_every and (r + 1) % eval_every == 0) or r == rounds - 1
        ):
            result.eval_trace.append((r + 1, float(eval_fn(params))))
    result.params = params
    return result


# ---------------------------------------------------------------------------
# Weight divergence
# ---------------------------------------------------------------------------


def measure_divergence(
    fed_params_at_syncs: list[tuple[int, np.ndarray]],
    cent_params_at_same_steps: list[tuple[int, np.ndarray]],
    g_values=None,
) -> DivergenceTrace:
    """L2 distance between the two trajectories at aligned step indices."""
    if len(fed_params_at_syncs) != len(cent_params_at_same_steps):
        raise ValueError("trajectories must have equal length")
    steps, deltas = [], []
    for (sf, wf), (sc, wc) in zip(fed_params_at_syncs, cent_params_at_same_steps):
        if sf != sc:
            raise ValueError(f"misaligned step indices: {sf} vs {sc}")
        steps.append(int(sf))
        deltas.append(float(np.linalg.norm(np.asarray(wf) - np.asarray(wc))))
    g = None if g_values is None else tuple(float(v) for v in g_values)
    return DivergenceTrace(steps=tuple(steps), deltas=tuple(deltas), g_values=g)


@dataclass(frozen=True)
class BoundInputs:
    eta: float
    T: int
    client_weights: np.ndarray  # p_Ci
    client_label_dists: np.ndarray  # (n_clients, n_classes) rows p^(i)(y=k)
    lipschitz: np.ndarray  # lambda_k per class
    g_trace: np.ndarray  # g(w^c_t) for t = (m-1)T .. mT-2, increasing t (length T-1)
    delta_prev: float  # measured Delta_{(m-1)T}

    def __post_init__(self):
        p = np.asarray(self.client_weights, dtype=np.float64)
        dists = np.asarray(self.client_label_dists, dtype=np.float64)
        lam = np.asarray(self.lipschitz, dtype=np.float64)
        g = np.asarray(self.g_trace, dtype=np.float64)
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if abs(float(p.sum()) - 1.0) > 1e-9 or np.any(p < 0):
            raise ValueError("client weights must be non-negative and sum to 1")
        if dists.shape != (p.size, lam.size):
            raise ValueError("label distribution table shape mismatch")
        if np.any(lam < 0):
            raise ValueError("Lipschitz constants must be non-negative")
        if g.size != self.T - 1:
            raise ValueError(f"g_trace must have length T-1 = {self.T - 1}, got {g.size}")
        if np.any(g < 0):
            raise ValueError("gradient norms must be non-negative")
        if self.delta_prev < 0:
            raise ValueError("delta_prev must be non-negative")
        for a in (p, dists, lam, g):
            a.setflags(write=False)
        object.__setattr__(self, "client_weights", p)
        object.__setattr__(self, "client_label_dists", dists)
        object.__setattr__(self, "lipschitz", lam)
        object.__setattr__(self, "g_trace", g)


def prop1_bound(inputs: BoundInputs) -> float:
    """Evaluate the divergence bound for one sync period from measured Delta_prev."""
    p = inputs.client_weights
    dists = inputs.client_label_dists
    lam = inputs.lipschitz
    a = 1.0 + inputs.eta * dists @ lam  # a_i per client
    global_dist = LabelDistribution(p @ dists)
    total = float(np.sum(p * a**inputs.T) * inputs.delta_prev)
    if inputs.T > 1:
        # g_trace is ordered by increasing t; term j uses g(w^c_{mT-1-j})
        g_rev = inputs.g_trace[::-1]
        for i in range(p.size):
            emd_i = emd(LabelDistribution(dists[i]), global_dist)
            js = np.arange(1, inputs.T)
            total += float(inputs.eta * p[i] * emd_i * np.sum(a[i] ** js * g_rev[js - 1]))
    return total


# ---------------------------------------------------------------------------
# Synthetic quadratic family: the regime where the bound's hypotheses hold
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prop1Record:
    step: int
    measured: float
    bound: float


@dataclass
class Prop1Report:
    records: list[Prop1Record]
    violations: list[Prop1Record]
    config: dict

    @property
    def ok(self) -> bool:
        return not self.violations


def _quadratic_family(rng: np.random.Generator) -> dict:
    dim = int(rng.integers(2, 7))
    n_classes = int(rng.integers(2, 6))
    n_clients = int(rng.integers(2, 6))
    lam = rng.uniform(0.1, 2.0, size=n_classes)
    centers = rng.normal(scale=2.0, size=(n_classes, dim))
    dists = rng.dirichlet(alpha=np.full(n_classes, 0.4), size=n_clients)
    p = rng.dirichlet(alpha=np.full(n_clients, 2.0))
    eta = float(rng.uniform(0.01, 0.15))
    T = int(rng.integers(1, 6))
    return {
        "dim": dim,
        "n_classes": n_classes,
        "n_clients": n_clients,
        "lam": lam,
        "centers": centers,
        "dists": dists,
        "p": p,
        "eta": eta,
        "T": T,
    }


def _quad_grad(w: np.ndarray, dist: np.ndarray, lam: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Gradient of sum_k dist_k * lambda_k/2 ||w - c_k||^2."""
    coeff = dist * lam
    return float(coeff.sum()) * w - coeff @ centers


def prop1_synthetic_check(seed: int, n_sync_points: int = 8) -> Prop1Report:
    """Run federated vs. centralized gradient descent on a random quadratic
    family and compare measured divergence against the bound at every sync."""
    rng = np.random.default_rng(seed)
    fam = _quadratic_family(rng)
    lam, centers, dists, p = fam["lam"], fam["centers"], fam["dists"], fam["p"]
    eta, T = fam["eta"], fam["T"]
    global_dist = p @ dists

    w0 = rng.normal(scale=1.0, size=fam["dim"])
    w_cent = w0.copy()
    w_fed = w0.copy()
    g_trace = []  # g(w^c_t) = max_k lambda_k ||w^c_t - c_k|| for t = 0, 1, ...

    records = []
    delta_prev = 0.0
    for m in range(1, n_sync_points + 1):
        locals_w = [w_fed.copy() for _ in range(fam["n_clients"])]
        for _ in range(T):
            g_trace.append(float(np.max(lam * np.linalg.norm(w_cent - centers, axis=1))))
            w_cent = w_cent - eta * _quad_grad(w_cent, global_dist, lam, centers)
            for i in range(fam["n_clients"]):
                locals_w[i] = locals_w[i] - eta * _quad_grad(locals_w[i], dists[i], lam, centers)
        w_fed = np.zeros_like(w_fed)
        for i in range(fam["n_clients"]):
            w_fed = w_fed + p[i] * locals_w[i]
        measured = float(np.linalg.norm(w_fed - w_cent))
        window = np.asarray(g_trace[(m - 1) * T : m * T - 1])
        bound = prop1_bound(
            BoundInputs(
                eta=eta,
                T=T,
                client_weights=p,
                client_label_dists=dists,
                lipschitz=lam,
                g_trace=window,
                delta_prev=delta_prev,
            )
        )
        records.append(Prop1Record(step=m * T, measured=measured, bound=bound))
        delta_prev = measured
    tol = 1e-9
    violations = [r for r in records if r.measured > r.bound * (1 + tol) + tol]
    cfg = {k: v for k, v in fam.items() if k in ("dim", "n_classes", "n_clients", "eta", "T")}
    cfg["seed"] = seed
    return Prop1Report(records=records, violations=violations, config=cfg)
