"""Dynamic channel execution with combinatorial UCB channel selection."""

from .arch import ArchDescriptor, desk_descriptor, get_descriptor, tiny_descriptor, vgg19_descriptor
from .bandit import (ArmEnvironment, BanditState, adjusted_saliency, final_selection, init_exploration,
                     select_superarm, simulate_cucb, update)
from .channels import ChannelId, ChannelMask, ChannelRegistry, mask_from_selection, random_mask
from .model import Model, build_model, forward, load_checkpoint, save_checkpoint
from .saliency import SaliencyReport, normalize_saliencies, oracle_saliency, taylor_saliency
from .surgeon import CompactPlan, CostReport, count_flops, count_params, extract_compact
from .tensor import Tensor, backward, finite_diff_grad, forward_op, no_grad
from .trainer import TrainConfig, run_random_baseline, run_single_stage, run_two_stage, train_step

__version__ = "0.1.0"
