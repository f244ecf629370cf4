from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (BatchNorm, ConcatChannels, Conv1d, Dense, GlobalMaxPool, NetworkSpec, ParamStore, ReLU,
                     ShapeError, StaleCache, UpsampleNearest, backward, forward, init_params)
from .optim import AdamState, NonFiniteGradient, adam_step
from .topologies import build_decoder, build_direct, build_encoder

__all__ = [
    "AdamState", "BatchNorm", "Checkpoint", "ConcatChannels", "Conv1d", "Dense", "GlobalMaxPool",
    "NetworkSpec", "NonFiniteGradient", "ParamStore", "ReLU", "ShapeError", "StaleCache", "UpsampleNearest",
    "adam_step", "backward", "build_decoder", "build_direct", "build_encoder", "forward", "init_params",
    "load_checkpoint", "save_checkpoint",
]
