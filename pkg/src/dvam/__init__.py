"""Discrete variational attention language model (DVAM) and its Gaussian
baseline (GVAM), built on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .autodiff import ParamStore, Tensor, backward, grad_check, sgd_step
from .checkpoint import Checkpoint, load_checkpoint, param_digest, save_checkpoint
from .errors import (
    ContractViolation,
    DataFormatError,
    DvamError,
    GraphError,
    NumericError,
)
from .estimators import DiscreteVariationalAttentionLM, GaussianVariationalAttentionLM
from .model import ModelConfig, Seq2SeqModel, dvam_loss
from .prior import GaussianPriorNet, PriorConfig, PriorNet, prior_nll, sample_codes
from .quantizer import CodeBook, ema_update, init_codebook, quantize, straight_through
from .training import (
    MetricsRecord,
    TrainConfig,
    beta_schedule,
    evaluate,
    generate,
    train_dvam,
    train_gvam,
    train_prior,
)
from .variational import discrete_kl, gaussian_kl, gvam_loss, reparameterize

__all__ = [
    "__version__",
    "Tensor", "ParamStore", "backward", "grad_check", "sgd_step",
    "Checkpoint", "save_checkpoint", "load_checkpoint", "param_digest",
    "DvamError", "ContractViolation", "GraphError", "NumericError", "DataFormatError",
    "DiscreteVariationalAttentionLM", "GaussianVariationalAttentionLM",
    "ModelConfig", "Seq2SeqModel", "dvam_loss",
    "PriorConfig", "PriorNet", "GaussianPriorNet", "prior_nll", "sample_codes",
    "CodeBook", "init_codebook", "quantize", "straight_through", "ema_update",
    "TrainConfig", "MetricsRecord", "beta_schedule",
    "train_dvam", "train_prior", "train_gvam", "evaluate", "generate",
    "discrete_kl", "gaussian_kl", "gvam_loss", "reparameterize",
]
