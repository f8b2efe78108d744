"""Scaled-down reference network with hand-written backward passes."""

from .checkpoint import load_checkpoint, save_checkpoint
from .ema import EmaState, ema_update, momentum_schedule
from .model import (
    Encoder,
    JointHead,
    KeypointHead,
    NetConfig,
    PoseNet,
    Predictor,
    encode,
    joint_head,
    patchify,
    predict_embeddings,
    sincos_2d,
)
from .optim import AdamW

__all__ = [
    "AdamW",
    "EmaState",
    "Encoder",
    "JointHead",
    "KeypointHead",
    "NetConfig",
    "PoseNet",
    "Predictor",
    "encode",
    "ema_update",
    "joint_head",
    "load_checkpoint",
    "momentum_schedule",
    "patchify",
    "predict_embeddings",
    "save_checkpoint",
    "sincos_2d",
]
