"""Test-time adaptation on synthetic distribution shifts.

The package couples a frozen source classifier with an online-adapted clone
through a pairwise residual-energy objective; baselines, ablations, shifted
streams, and calibration metrics live in the submodules.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, as_tensor, finite_difference
from .buffer import (AugmentationSpec, SourceBuffer, init_buffer,
                     next_source_batch, make_pairs, confidence_filter)
from .config import (AdaptConfig, BufferConfig, ConfigError, DatasetConfig,
                     ExperimentConfig, PretrainConfig, StreamConfig,
                     config_from_dict, config_to_dict, load_config,
                     dump_config)
from .engine import (AdaptationEngine, CostCounters, EpisodeAbort,
                     EpisodeResult, RunRecord, run_episode)
from .metrics import (CalibrationInput, CorruptionErrorTable, accuracy, ece,
                      ece_from_bin_stats, mce, energy_trajectory)
from .model import (Classifier, clone_as_target, as_source, energy,
                    energy_values, energy_logit_grad, forward,
                    pretrain_source, save_checkpoint, load_checkpoint)
from .objectives import (PairBatch, build_pair_batch, cretta_logit,
                         cretta_loss, gradient_weight,
                         assemble_cretta_gradient, weighted_energy_surrogate,
                         no_contrastive_loss, no_contrastive_sigma_loss,
                         pairwise_non_residual_loss, nce_loss, entropy_loss,
                         pseudo_label_loss)
from .optim import Adam, AdamState, adam_step
from .stream import (CorruptionSpec, Dataset, corrupt, dirichlet_stream,
                     gradual_stream, iid_stream, make_dataset)

__all__ = [name for name in dir() if not name.startswith("_")]
