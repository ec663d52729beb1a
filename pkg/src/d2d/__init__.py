"""Differentiable count critic driving a latent modifier network, on a synthetic generator/detector world."""

from .critic import CriticConfig, critic_loss, logit_threshold, multi_critic_loss, soft_count
from .lmn import init_params, lmn_forward, mix_latent, param_count
from .pipeline import PipelineConfig, Prompt, RunRecord, run_prompt
from .regularizer import RegConfig, reg_pow, reg_prime, shell_radius
from .world import make_world, oracle_count

__version__ = "0.1.0"
