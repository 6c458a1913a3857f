"""Deterministic statevector circuit engine plus small density-matrix utilities.

Conventions fixed here and asserted in the tests:
  * qubit 0 is the most significant bit of the basis index, so for n qubits
    the amplitude of |b_0 b_1 ... b_{n-1}> sits at index sum_q b_q * 2^(n-1-q);
  * the parameterized rotation is R_y(theta) = [[cos(t/2), -sin(t/2)],
    [sin(t/2), cos(t/2)]] with t = theta, which keeps real input amplitudes
    real and is compatible with the +-pi/2 parameter shift rule;
  * circuits are layered: within a layer all CNOTs fire in pattern order,
    then one rotation per qubit.

All public operations are pure: inputs are never mutated, every gate returns
a fresh StateVector.  The module-private ``_*_inplace`` kernels operate on
2-D (batch, 2^n) arrays and are the performance path used by the training
code; they accept float64 or complex128 transparently.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

NORM_TOL = 1e-10
HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = -1e-9  # eigenvalue floor, accommodates mixtures of many samples


class RotationAxis(enum.Enum):
    Y = "y"


def chain_pattern(n_qubits: int) -> tuple[tuple[int, int], ...]:
    """Open-chain CNOT pattern (0,1), (1,2), ..., applied in ascending order."""
    return tuple((q, q + 1) for q in range(n_qubits - 1))


@dataclass(frozen=True)
class CircuitSpec:
    """Layered circuit layout: per layer, CNOTs in ``cnot_pattern`` order, then
    one R_y rotation per qubit.  Parameter count is ``n_layers * n_qubits``."""

    n_qubits: int
    n_layers: int
    cnot_pattern: tuple[tuple[int, int], ...] = field(default=None)  # type: ignore[assignment]
    rotation_axis: RotationAxis = RotationAxis.Y

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError(f"n_qubits must be >= 1, got {self.n_qubits}")
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        pattern = self.cnot_pattern
        if pattern is None:
            pattern = chain_pattern(self.n_qubits)
        pattern = tuple((int(c), int(t)) for c, t in pattern)
        for c, t in pattern:
            if not (0 <= c < self.n_qubits) or not (0 <= t < self.n_qubits):
                raise ValueError(f"CNOT ({c},{t}) out of range for {self.n_qubits} qubits")
            if c == t:
                raise ValueError(f"CNOT control and target must differ, got ({c},{t})")
        object.__setattr__(self, "cnot_pattern", pattern)
        if not isinstance(self.rotation_axis, RotationAxis):
            raise ValueError(f"unsupported rotation axis: {self.rotation_axis!r}")

    @property
    def n_params(self) -> int:
        return self.n_layers * self.n_qubits

    @property
    def dim(self) -> int:
        return 2**self.n_qubits


class ParamVector:
    """Trainable rotation angles, indexed (layer, qubit).  Immutable."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"expected a (n_layers, n_qubits) array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    @classmethod
    def zeros(cls, spec: CircuitSpec) -> "ParamVector":
        return cls(np.zeros((spec.n_layers, spec.n_qubits)))

    @classmethod
    def from_flat(cls, flat, spec: CircuitSpec) -> "ParamVector":
        arr = np.asarray(flat, dtype=np.float64)
        if arr.size != spec.n_params:
            raise ValueError(f"expected {spec.n_params} parameters, got {arr.size}")
        return cls(arr.reshape(spec.n_layers, spec.n_qubits))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    @property
    def n_qubits(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"ParamVector(n_layers={self.n_layers}, n_qubits={self.n_qubits})"


class StateVector:
    """Normalized pure state on ``n_qubits`` qubits (complex128 amplitudes)."""

    __slots__ = ("n_qubits", "amps")

    def __init__(self, amps, *, _validate: bool = True):
        arr = np.array(amps, dtype=np.complex128, copy=True)
        if arr.ndim != 1 or arr.size == 0 or arr.size & (arr.size - 1):
            raise ValueError(f"amplitude count must be a power of two, got shape {arr.shape}")
        n = int(arr.size).bit_length() - 1
        if _validate:
            norm2 = float(np.sum(arr.real**2 + arr.imag**2))
            if abs(norm2 - 1.0) > NORM_TOL:
                raise ValueError(f"state not normalized: sum |amp|^2 = {norm2!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "amps", arr)
        object.__setattr__(self, "n_qubits", n)

    def __setattr__(self, name, value):
        raise AttributeError("StateVector is immutable")

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        return cls.basis(n_qubits, 0)

    @classmethod
    def basis(cls, n_qubits: int, index: int) -> "StateVector":
        dim = 2**n_qubits
        if not (0 <= index < dim):
            raise ValueError(f"basis index {index} out of range for {n_qubits} qubits")
        amps = np.zeros(dim, dtype=np.complex128)
        amps[index] = 1.0
        return cls(amps, _validate=False)

    @property
    def dim(self) -> int:
        return self.amps.size

    def __repr__(self) -> str:
        return f"StateVector(n_qubits={self.n_qubits})"


class DensityMatrix:
    """Hermitian, unit-trace, PSD matrix describing a statistical mixture."""

    __slots__ = ("dim", "entries")

    def __init__(self, entries, *, _validate: bool = True):
        mat = np.array(entries, dtype=np.complex128, copy=True)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {mat.shape}")
        if _validate:
            herm_dev = float(np.max(np.abs(mat - mat.conj().T)))
            if herm_dev > HERMITIAN_TOL:
                raise ValueError(f"matrix not Hermitian: max deviation {herm_dev!r}")
            tr = complex(np.trace(mat))
            if abs(tr - 1.0) > TRACE_TOL:
                raise ValueError(f"trace must be 1, got {tr!r}")
            eigs = np.linalg.eigvalsh((mat + mat.conj().T) / 2.0)
            if float(eigs.min()) < PSD_TOL:
                raise ValueError(f"matrix not PSD: min eigenvalue {float(eigs.min())!r}")
        mat.setflags(write=False)
        object.__setattr__(self, "entries", mat)
        object.__setattr__(self, "dim", mat.shape[0])

    def __setattr__(self, name, value):
        raise AttributeError("DensityMatrix is immutable")

    def __repr__(self) -> str:
        return f"DensityMatrix(dim={self.dim})"


# ---------------------------------------------------------------------------
# Batched kernels (performance path; arrays of shape (batch, 2^n))
# ---------------------------------------------------------------------------


def _check_qubit(n_qubits: int, qubit: int, what: str = "qubit") -> None:
    if not (0 <= qubit < n_qubits):
        raise ValueError(f"{what} index {qubit} out of range for {n_qubits} qubits")


def _apply_rotation_inplace(mat: np.ndarray, n_qubits: int, qubit: int, angle: float) -> None:
    c = np.cos(angle / 2.0)
    s = np.sin(angle / 2.0)
    view = mat.reshape(mat.shape[0], 2**qubit, 2, 2 ** (n_qubits - qubit - 1))
    a0 = view[:, :, 0, :]
    a1 = view[:, :, 1, :]
    new0 = c * a0 - s * a1
    view[:, :, 1, :] = s * a0 + c * a1
    view[:, :, 0, :] = new0


def _apply_cnot_inplace(mat: np.ndarray, n_qubits: int, control: int, target: int) -> None:
    b = mat.shape[0]
    if control < target:
        view = mat.reshape(
            b, 2**control, 2, 2 ** (target - control - 1), 2, 2 ** (n_qubits - target - 1)
        )
        sub = view[:, :, 1]  # control bit set; target bit is now axis 3
        tmp = sub[:, :, :, 0, :].copy()
        sub[:, :, :, 0, :] = sub[:, :, :, 1, :]
        sub[:, :, :, 1, :] = tmp
    else:
        view = mat.reshape(
            b, 2**target, 2, 2 ** (control - target - 1), 2, 2 ** (n_qubits - control - 1)
        )
        sub = view[:, :, :, :, 1, :]  # control bit set; target bit is axis 2
        tmp = sub[:, :, 0, :, :].copy()
        sub[:, :, 0, :, :] = sub[:, :, 1, :, :]
        sub[:, :, 1, :, :] = tmp


def _apply_layer_inplace(
    mat: np.ndarray,
    n_qubits: int,
    cnot_pattern: tuple[tuple[int, int], ...],
    angles: np.ndarray,
) -> None:
    for c, t in cnot_pattern:
        _apply_cnot_inplace(mat, n_qubits, c, t)
    for q in range(n_qubits):
        _apply_rotation_inplace(mat, n_qubits, q, float(angles[q]))


def _run_layers_inplace(mat: np.ndarray, spec: CircuitSpec, values: np.ndarray, first_layer: int = 0) -> None:
    for layer in range(first_layer, spec.n_layers):
        _apply_layer_inplace(mat, spec.n_qubits, spec.cnot_pattern, values[layer])


def _cnot_cascade_dest(n_qubits: int, cnot_pattern: tuple[tuple[int, int], ...]) -> np.ndarray:
    """dest[b] = basis index that receives amplitude b under the CNOT cascade."""
    idx = np.arange(2**n_qubits)
    for c, t in cnot_pattern:
        c_bit = (idx >> (n_qubits - 1 - c)) & 1
        idx = idx ^ (c_bit << (n_qubits - 1 - t))
    return idx


def _layer_matrix_t(
    n_qubits: int, cnot_pattern: tuple[tuple[int, int], ...], angles: np.ndarray
) -> np.ndarray:
    """Transposed operator of one layer, so row-states map as X @ M_T.

    The rotation block is the Kronecker product of per-qubit R_y matrices
    (qubit 0 outermost, matching the MSB-first index convention); the CNOT
    cascade is a basis permutation folded in as a row gather.
    """
    half = np.asarray(angles, dtype=np.float64) / 2.0
    c, s = np.cos(half), np.sin(half)
    w_t = np.array([[c[0], s[0]], [-s[0], c[0]]])
    for q in range(1, n_qubits):
        w_t = np.kron(w_t, np.array([[c[q], s[q]], [-s[q], c[q]]]))
    dest = _cnot_cascade_dest(n_qubits, cnot_pattern)
    return w_t[dest, :]


@lru_cache(maxsize=None)
def _z_sign_table(n_qubits: int) -> np.ndarray:
    """(2^n, n) table of +-1: sign of Z_q on each basis state (MSB-first bits)."""
    idx = np.arange(2**n_qubits)
    bits = (idx[:, None] >> (n_qubits - 1 - np.arange(n_qubits))[None, :]) & 1
    table = 1.0 - 2.0 * bits
    table.setflags(write=False)
    return table


def _expect_z_all(mat: np.ndarray, n_qubits: int) -> np.ndarray:
    """Per-row <Z_q> for every qubit; returns (batch, n_qubits)."""
    if np.iscomplexobj(mat):
        probs = mat.real**2 + mat.imag**2
    else:
        probs = mat**2
    return probs @ _z_sign_table(n_qubits)


# ---------------------------------------------------------------------------
# Public single-state operations
# ---------------------------------------------------------------------------


def apply_rotation(state: StateVector, qubit: int, angle: float) -> StateVector:
    """Apply R_y(angle) on one qubit."""
    _check_qubit(state.n_qubits, qubit)
    work = state.amps[None, :].copy()
    _apply_rotation_inplace(work, state.n_qubits, qubit, float(angle))
    return StateVector(work[0])


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    """Flip the target bit on every basis state whose control bit is 1."""
    _check_qubit(state.n_qubits, control, "control")
    _check_qubit(state.n_qubits, target, "target")
    if control == target:
        raise ValueError("control and target must differ")
    work = state.amps[None, :].copy()
    _apply_cnot_inplace(work, state.n_qubits, control, target)
    return StateVector(work[0])


def run_circuit(spec: CircuitSpec, params: ParamVector, input_state: StateVector) -> StateVector:
    """Run all layers of ``spec`` with ``params`` on ``input_state``."""
    if input_state.n_qubits != spec.n_qubits:
        raise ValueError(
            f"state has {input_state.n_qubits} qubits, circuit expects {spec.n_qubits}"
        )
    if params.values.shape != (spec.n_layers, spec.n_qubits):
        raise ValueError(
            f"parameter shape {params.values.shape} does not match "
            f"({spec.n_layers}, {spec.n_qubits})"
        )
    work = input_state.amps[None, :].copy()
    _run_layers_inplace(work, spec, params.values)
    return StateVector(work[0])


def expect_z(state: StateVector, qubit: int) -> float:
    """<Z_qubit> = sum_j (+-1) |amp_j|^2, sign by the qubit's bit; in [-1, 1]."""
    _check_qubit(state.n_qubits, qubit)
    z = _expect_z_all(state.amps[None, :], state.n_qubits)[0, qubit]
    return float(np.clip(z, -1.0, 1.0))


def density_from_mixture(states: list[StateVector], weights) -> DensityMatrix:
    """Weighted mixture sum_j w_j |psi_j><psi_j| of pure states."""
    w = np.asarray(weights, dtype=np.float64)
    if len(states) != w.size:
        raise ValueError(f"{len(states)} states but {w.size} weights")
    if len(states) == 0:
        raise ValueError("empty mixture")
    if np.any(w < 0):
        raise ValueError("mixture weights must be non-negative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError(f"mixture weights must sum to 1, got {float(w.sum())!r}")
    dim = states[0].dim
    for s in states:
        if s.dim != dim:
            raise ValueError("all states in a mixture must share the same dimension")
    rho = np.zeros((dim, dim), dtype=np.complex128)
    for wi, s in zip(w, states):
        rho += wi * np.outer(s.amps, s.amps.conj())
    return DensityMatrix(rho)


def born_probability(rho: DensityMatrix, state: StateVector) -> float:
    """<psi| rho |psi>, clamped to [0, 1]."""
    if rho.dim != state.dim:
        raise ValueError(f"dimension mismatch: rho dim {rho.dim}, state dim {state.dim}")
    val = complex(state.amps.conj() @ rho.entries @ state.amps)
    if abs(val.imag) > 1e-10 or val.real < -1e-9 or val.real > 1.0 + 1e-9:
        raise ValueError(f"Born probability out of tolerance: {val!r}")
    return float(np.clip(val.real, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Channels (density-matrix maps for the decomposition oracle)
# ---------------------------------------------------------------------------


class KrausChannel:
    """CPTP map rho -> sum_k A_k rho A_k^dagger given by its Kraus operators."""

    __slots__ = ("dim", "operators")

    def __init__(self, operators):
        ops = [np.array(op, dtype=np.complex128, copy=True) for op in operators]
        if not ops:
            raise ValueError("a channel needs at least one Kraus operator")
        dim = ops[0].shape[0]
        for op in ops:
            if op.shape != (dim, dim):
                raise ValueError("all Kraus operators must be square with equal dimension")
        total = sum(op.conj().T @ op for op in ops)
        if float(np.max(np.abs(total - np.eye(dim)))) > 1e-10:
            raise ValueError("Kraus operators do not satisfy sum A^dag A = I")
        for op in ops:
            op.setflags(write=False)
        object.__setattr__(self, "operators", tuple(ops))
        object.__setattr__(self, "dim", dim)

    def __setattr__(self, name, value):
        raise AttributeError("KrausChannel is immutable")

    def apply(self, rho: DensityMatrix) -> DensityMatrix:
        if rho.dim != self.dim:
            raise ValueError(f"dimension mismatch: channel dim {self.dim}, rho dim {rho.dim}")
        out = np.zeros((self.dim, self.dim), dtype=np.complex128)
        for op in self.operators:
            out += op @ rho.entries @ op.conj().T
        return DensityMatrix(out)

    def apply_matrix(self, mat: np.ndarray) -> np.ndarray:
        """Linear action on a raw matrix (no density-matrix validation)."""
        out = np.zeros((self.dim, self.dim), dtype=np.complex128)
        for op in self.operators:
            out += op @ mat @ op.conj().T
        return out


def random_kraus_channel(dim: int, n_kraus: int, rng: np.random.Generator) -> KrausChannel:
    """Random CPTP channel from the QR of a Gaussian (n_kraus*dim, dim) block matrix."""
    if n_kraus < 1:
        raise ValueError("n_kraus must be >= 1")
    g = rng.normal(size=(n_kraus * dim, dim)) + 1j * rng.normal(size=(n_kraus * dim, dim))
    q, _ = np.linalg.qr(g)  # columns orthonormal => sum of block^dag block = I
    return KrausChannel([q[k * dim : (k + 1) * dim, :] for k in range(n_kraus)])


def channel_from_circuit(spec: CircuitSpec, params: ParamVector) -> KrausChannel:
    """Unitary channel rho -> U rho U^dagger for a fixed circuit."""
    dim = spec.dim
    cols = []
    for j in range(dim):
        out = run_circuit(spec, params, StateVector.basis(spec.n_qubits, j))
        cols.append(out.amps)
    unitary = np.stack(cols, axis=1)
    return KrausChannel([unitary])
