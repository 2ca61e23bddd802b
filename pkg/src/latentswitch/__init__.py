"""Latent-then-explicit reasoning on a toy decoder-only transformer."""

from .errors import CapacityError, ConfigError, DataError, InputError, NumericError
from .latent import LatentProjector, ProbeResult, build_analytic_projector, build_learned_projector, latent_step, probe, project
from .model import LayerCache, ModelBundle, ModelConfig, StepOutput, decode_logits, embed, forward_prefix, forward_step
from .switching import SwitchConfig, SwitchDecision, should_switch
from .generation import GenerationTrace, SamplerConfig, generate_cot, generate_later, generate_trained_later, sample_token
from .corpus import SourceRecord, RenderedExample, assign_latent_budget, render_example, toy_tokenizer
from .training import TrainConfig, TrainingExample, example_losses, make_trainer, total_loss, train_step

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "DataError", "InputError", "NumericError",
    "LatentProjector", "ProbeResult", "build_analytic_projector", "build_learned_projector", "latent_step", "probe",
    "project",
    "LayerCache", "ModelBundle", "ModelConfig", "StepOutput", "decode_logits", "embed", "forward_prefix",
    "forward_step",
    "SwitchConfig", "SwitchDecision", "should_switch",
    "GenerationTrace", "SamplerConfig", "generate_cot", "generate_later", "generate_trained_later", "sample_token",
    "SourceRecord", "RenderedExample", "assign_latent_budget", "render_example", "toy_tokenizer",
    "TrainConfig", "TrainingExample", "example_losses", "make_trainer", "total_loss", "train_step",
]
