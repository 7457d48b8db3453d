"""Data-free knowledge distillation with teacher-driven sample selection, at desk scale."""

from .autodiff import Graph, Tensor, finite_diff_check
from .data import Dataset, EvalView, make_blobs, make_grid_patterns, rng_stream, sample_latent
from .distill import TrainConfig, dfkd_iteration, run_distillation, train_teacher
from .losses import LossWeights
from .metrics import RunRecord, acc_last_k, acc_max, accuracy, diversity_score, robustness_report
from .nn import Network, load_network, make_classifier, make_generator, save_network
from .selection import GmmConfig, fit_gmm_1d, posterior_small, select

__version__ = "0.1.0"
