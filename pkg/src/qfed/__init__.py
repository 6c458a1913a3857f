"""Quantum federated learning simulator.

Trains a variational quantum classifier on non-IID client partitions three
ways: centralized, by federated parameter averaging (qFedAvg), and by the
one-shot density-gated mixture protocol (qFedInf), with small-system oracles
that verify the exact channel decomposition and the weight-divergence bound.
"""

from .qsim import (
    CircuitSpec,
    DensityMatrix,
    KrausChannel,
    ParamVector,
    RotationAxis,
    StateVector,
    apply_cnot,
    apply_rotation,
    born_probability,
    chain_pattern,
    channel_from_circuit,
    density_from_mixture,
    expect_z,
    random_kraus_channel,
    run_circuit,
)
from .data import (
    ClientDataset,
    EncodedSample,
    LabelDistribution,
    RawImage,
    amplitude_encode,
    emd,
    encode_dataset,
    label_distribution,
    load_idx,
    partition_cycle,
    partition_star,
    resize_bilinear,
    save_idx,
    synthesize_images,
)
from .model import (
    AdamState,
    ClassifierHead,
    TrainConfig,
    adam_step,
    cross_entropy,
    evaluate,
    forward_probs,
    init_params,
    load_checkpoint,
    parameter_shift_grad,
    save_checkpoint,
    train,
)
from .federation import (
    BoundInputs,
    CommMeter,
    DivergenceTrace,
    FedAvgConfig,
    fedavg_round,
    measure_divergence,
    prop1_bound,
    prop1_synthetic_check,
    run_fedavg,
    train_centralized,
)
from .density import (
    DensityEstimate,
    GmmDensityModel,
    gmm_fit,
    gmm_log_density,
    load_density_model,
    mixture_weights,
    mixture_weights_from_log,
    quantum_density,
    save_density_model,
)
from .qfedinf import (
    FederatedEnsemble,
    InferenceMode,
    LocalChannel,
    evaluate_ensemble,
    generative_mixture_check,
    infer,
    load_ensemble,
    run_theorem1_suite,
    save_ensemble,
    train_clients,
    verify_theorem1,
)

__version__ = "0.1.0"
