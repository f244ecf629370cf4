"""The three fixed topologies: siamese encoder, TCN decoder, direct regressor."""

from __future__ import annotations

from .layers import BatchNorm, ConcatChannels, Conv1d, Dense, GlobalMaxPool, NetworkSpec, ReLU, UpsampleNearest

# (out_channels, kernel, stride) per conv block
ENCODER_BLOCKS = ((8, 7, 2), (16, 7, 2), (32, 5, 2), (64, 5, 2),
                  (128, 3, 2), (128, 3, 2), (256, 3, 2), (256, 3, 2))
MIN_LENGTH = 256
MAX_LENGTH = 3000


def _conv_stack(in_channels: int, blocks=ENCODER_BLOCKS) -> list:
    layers = []
    c = in_channels
    for k, (out, kernel, stride) in enumerate(blocks):
        layers += [
            Conv1d(c, out, kernel, stride, (kernel // 2, kernel // 2), name=f"conv{k}"),
            BatchNorm(out, name=f"bn{k}"),
            ReLU(name=f"relu{k}"),
        ]
        c = out
    return layers


def build_encoder(H: int = 500, in_channels: int = 1, name: str = "encoder") -> NetworkSpec:
    """Fully convolutional stack, global max pool over time, then dense to ``H``."""
    if H < 1:
        raise ValueError("H must be positive")
    layers = _conv_stack(in_channels)
    layers += [GlobalMaxPool(name="pool"), Dense(ENCODER_BLOCKS[-1][0], H, name="proj")]
    return NetworkSpec(name, tuple(layers), MIN_LENGTH, MAX_LENGTH)


def build_decoder(H: int = 500, kernel: int = 20, dilations=(32, 16, 8, 4, 2, 1),
                  channels: int = 16, name: str = "decoder") -> NetworkSpec:
    """Nearest upsampling of the embedding to the signal length, then a dilated TCN.

    Non-causal "same" padding; the target length is given at forward time.
    """
    layers = [UpsampleNearest(None, name="up")]
    c = 1
    for k, d in enumerate(dilations):
        total = d * (kernel - 1)
        layers += [Conv1d(c, channels, kernel, 1, (total // 2, total - total // 2), d, name=f"tcn{k}"),
                   ReLU(name=f"relu{k}")]
        c = channels
    layers.append(Conv1d(c, 1, 1, name="out"))
    return NetworkSpec(name, tuple(layers))


def build_direct(H: int = 500, name: str = "direct") -> NetworkSpec:
    """Two-channel encoder stack with a dense/BN/ReLU head and a scalar output."""
    layers = [ConcatChannels(name="cat")] + _conv_stack(2)
    layers += [GlobalMaxPool(name="pool"), Dense(ENCODER_BLOCKS[-1][0], H, name="fc"),
               BatchNorm(H, name="fc_bn"), ReLU(name="fc_relu"), Dense(H, 1, name="head")]
    return NetworkSpec(name, tuple(layers), MIN_LENGTH, MAX_LENGTH)
