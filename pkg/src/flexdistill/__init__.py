"""Flexible networks trained with in-place knowledge distillation.

A flexible network bundles several nested sub-models (early exits or width
switches) that share weights. Training can distill the largest sub-model into
the smaller ones directly or through chains of intermediate teacher
assistants. Everything is numpy with hand-written backward passes.
"""
from .errors import (ConfigError, DimensionError, DomainError, FlexDistillError, FormatError,
                     NumericError, ParameterError, UsageError, ValidationError)
from .losses import (DistillConfig, FlexLoss, Strategy, cross_entropy, flexible_loss, kd_loss,
                     one_hot, student_loss, teacher_weights)
from .models import EarlyExitNet, SlimmableNet, WidthSpec
from .params import ParamStore, load_checkpoint, save_checkpoint
from .trainer import SGD, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "DomainError", "FlexDistillError", "FormatError", "NumericError",
    "ParameterError", "UsageError", "ValidationError", "DistillConfig", "FlexLoss", "Strategy",
    "cross_entropy", "flexible_loss", "kd_loss", "one_hot", "student_loss", "teacher_weights",
    "EarlyExitNet", "SlimmableNet", "WidthSpec", "ParamStore", "load_checkpoint", "save_checkpoint",
    "SGD", "TrainConfig", "evaluate", "train",
]
