"""Hybrid sequential recommender: a self-attentive encoder whose collaborative
embeddings are mapped into a small causal LM's token space, fine-tuned with
LoRA adapters under staged freezing."""

from .data import LabeledExample, RatingRecord, SplitBundle
from .fusion import FilledPrompt, HybridSequence, MappingConfig, MappingLayer, build_prompt
from .gradcheck import gradcheck
from .llm import LlmConfig, LoRAAdapter, TinyDecoder, Vocab, predict_yes_prob, tokenize
from .metrics import MetricReport, ScoredExample, evaluate_examples
from .optim import AdamW, cosine_lr
from .rng import RngStream
from .sasrec import InteractionSequence, SasrecConfig, SasrecModel, standardize_sequence
from .synthetic import SyntheticConfig, generate_synthetic
from .tensor import Parameter, Tensor, no_grad
from .training import (
    FreezeMask,
    HybridSystem,
    Runner,
    TrainConfig,
    dual_stage_orchestrate,
    load_checkpoint,
    pnp_load,
    save_checkpoint,
    set_freeze,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "FilledPrompt", "FreezeMask", "HybridSequence", "HybridSystem",
    "InteractionSequence", "LabeledExample", "LlmConfig", "LoRAAdapter",
    "MappingConfig", "MappingLayer", "MetricReport", "Parameter", "RatingRecord",
    "RngStream", "Runner", "SasrecConfig", "SasrecModel", "ScoredExample",
    "SplitBundle", "SyntheticConfig", "Tensor", "TinyDecoder", "TrainConfig",
    "Vocab", "build_prompt", "cosine_lr", "dual_stage_orchestrate",
    "evaluate_examples", "generate_synthetic", "gradcheck", "load_checkpoint",
    "no_grad", "pnp_load", "predict_yes_prob", "save_checkpoint",
    "set_freeze", "standardize_sequence", "tokenize",
]
