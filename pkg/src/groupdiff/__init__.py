"""Joint denoising of groups of related images via cross-sample attention.

The package trains a small patchified diffusion transformer whose
attention can span a whole group of images, builds those groups by
encoder-similarity queries, samples with classifier-free guidance in
independent or group-wise modes, and measures how attention mass flows
between group members.
"""

from .attn_metrics import (AttentionBlockSums, CrossSampleStats, aggregate_s_cross,
                           block_sums, cross_condition_probe, cross_stats,
                           fid_correlation, step_profile)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Paths, RunConfig, Seeds, load_config, save_config
from .data import (DatasetSpec, ToyDataset, ToyImage, encode, generate_dataset,
                   load_dataset, save_dataset)
from .diffusion import (GroupNoisePolicy, NoiseSchedule, ScheduleConfig,
                        forward_noising, group_loss, group_loss_batch,
                        label_dropout, sample_group_timesteps)
from .errors import DimensionError, NumericError, ValidationError
from .evaluate import (FeatureGaussian, ProbeResult, cfg_sweep, fid_proxy,
                       fit_linear_probe, frechet_distance, generate_eval_set,
                       linear_probe)
from .grouping import (DatasetIndex, GroupSpec, assemble_group, build_index,
                       load_index, query, save_index)
from .manifest import ExperimentManifest, load_manifest, reproduce, save_manifest
from .model import (AttnCaptureSpec, DenoiserModel, GroupBatch, ModelConfig,
                    add_sample_embedding, group_attention, patchify, unpatchify)
from .optim import AdamW, OptimizerState, adamw_update
from .sampler import (SamplerPlan, SampleTrace, cfg_combine, generate, load_trace,
                      predict_scores, save_trace)
from .tensor import Tensor, grad_check, no_grad, scaled_dot_attention
from .train import TrainConfig, train_model

__version__ = "0.1.0"
