"""Probing-based weight-space learning with shared deep linear probe generators."""

from .autodiff import Adam, AdamState, Graph, adam_step, check_gradients
from .datasets import ImageDataset, ingest_cifar_binary, ingest_idx, synthetic_digits
from .estimators import (
    ProbeResponses, ProbingClassifier, ProbingRegressor, StatNNFeatures, check_models,
)
from .exceptions import (
    ChecksumError, ConfigError, ContractError, DataFormatError, GraphStateError, NonFiniteError,
    ProbeGenError, ShapeError, VersionError,
)
from .experiment import ExperimentConfig, MetricReport, run_ablation_suite, train_pipeline
from .flops import flops_report
from .metrics import accuracy, generalization_gap, kendall_tau
from .models import (
    ArchitectureSpec, Layer, ProbedModel, cnn_spec, count_parameters, inr_spec, model_forward,
    permute_hidden_neurons,
)
from .predictors import (
    MLPHead, Representation, entropy_features, head_predict, probe_representation, statnn_features,
)
from .probes import (
    GeneratorConfig, ProbeGenerator, ProbeSet, build_linear_conv_generator, calibrate_output, dead_leaves_image,
    generate_probes, linearity_residual, synthetic_uniform_coords,
)
from .zoo import ModelZoo, generate_cnn_zoo, generate_inr_zoo, load_zoo, save_zoo, verify_zoo

__version__ = "0.1.0"
