"""Bi-level self-supervised training with self-motivated distillation
targets, hypergradient strategies, and a universality evaluator."""

from .hypergrad import (
    AidCg,
    AidFd,
    AidNeumann,
    BilevelProblem,
    ItdUnrolled,
    LookaheadKind,
    lookahead_update,
    quadratic_family,
    quadratic_oracle,
)
from .losses import AlignCosine, ContrastiveNtXent, RedundancyBarlow
from .models import (
    EncoderConfig,
    LinearPi,
    OptimState,
    ParameterSet,
    PrototypePi,
    Snapshot,
    encode,
    init_encoder,
    project,
    sgd_step,
)
from .sigma import OracleLabeler, ProbeConfig, SigmaReport, kl_divergence, knn_eval, linear_probe, sigma_measure
from .taskgen import AugmentationSpec, Dataset, StreamKey, SyntheticSpec, TaskBatch, generate_synthetic, make_episode, make_task
from .tensor import DiffRecord, Tensor, apply, backward, grad_check
from .trainer import GesslConfig, TaskAdaptResult, build_target, distill_loss, inner_adapt, outer_step, theorem_check, train

__version__ = "0.1.0"
