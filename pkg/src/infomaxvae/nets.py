"""Fully connected networks: encoder q(z|x), decoder p(x|z), critic t(x,z).

All three are plain MLPs with LeakyReLU(0.2) hidden activations.  The
encoder emits a mean block and a log-variance block side by side; the
decoder ends in a sigmoid (Bernoulli means, clamped away from {0,1} so
downstream logs stay finite); the critic maps a concatenated (x, z) pair
to one unconstrained scalar.

Checkpoint format (bit-exact):
    magic "IMVAE001"
    per array: rows u32 LE, cols u32 LE, rows*cols float64 LE
    trailing u32 LE = array count
Model checkpoints store the encoder's arrays then the decoder's, each as
weight, bias per layer in forward order; the two halves are equal length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

LEAKY_SLOPE = 0.2
HIDDEN_LAYERS = 4  # encoder/decoder hidden depth; width is the config knob
CRITIC_HIDDEN_LAYERS = 2
PIXEL_FLOOR = 1e-7

_MAGIC = b"IMVAE001"


class CheckpointError(ValueError):
    """Checkpoint bytes do not parse; message carries the failing offset."""


class GaussianPosterior(NamedTuple):
    """Per-example diagonal-Gaussian parameters, as graph nodes."""

    mean: ad.Node
    log_var: ad.Node


@dataclass
class Mlp:
    weights: list
    biases: list
    slope: float = LEAKY_SLOPE

    def forward(self, x: ad.Node) -> ad.Node:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, w, b)
            if i < last:
                h = ad.leaky_relu(h, self.slope)
        return h

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def arrays(self):
        return [p.value for p in self.parameters()]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, dims, slope: float = LEAKY_SLOPE) -> Mlp:
    """Glorot-uniform weights, zero biases, over consecutive dim pairs."""
    if any(d < 1 for d in dims):
        raise ValueError(f"layer widths must be positive, got {list(dims)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(ad.Parameter(glorot_uniform(rng, fan_in, fan_out)))
        biases.append(ad.Parameter(np.zeros((1, fan_out))))
    return Mlp(weights, biases, slope)


@dataclass
class Encoder:
    net: Mlp
    z_dim: int


@dataclass
class Decoder:
    net: Mlp
    input_dim: int


@dataclass
class Critic:
    net: Mlp


def build_encoder(rng, input_dim: int, z_dim: int, width: int) -> Encoder:
    dims = [input_dim, *[width] * HIDDEN_LAYERS, 2 * z_dim]
    return Encoder(init_mlp(rng, dims), z_dim)


def build_decoder(rng, input_dim: int, z_dim: int, width: int) -> Decoder:
    dims = [z_dim, *[width] * HIDDEN_LAYERS, input_dim]
    return Decoder(init_mlp(rng, dims), input_dim)


def build_critic(rng, input_dim: int, z_dim: int, width: int) -> Critic:
    dims = [input_dim + z_dim, *[width] * CRITIC_HIDDEN_LAYERS, 1]
    return Critic(init_mlp(rng, dims))


def init_params(rng, input_dim: int, z_dim: int, width: int, critic_width: int):
    """Build all three networks from one generator, in a fixed draw order."""
    enc = build_encoder(rng, input_dim, z_dim, width)
    dec = build_decoder(rng, input_dim, z_dim, width)
    crit = build_critic(rng, input_dim, z_dim, critic_width)
    return enc, dec, crit


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def encode(encoder: Encoder, x: ad.Node) -> GaussianPosterior:
    d = encoder.net.weights[0].value.shape[0]
    if x.value.shape[1] != d:
        raise ad.ShapeError(f"encode: input has {x.value.shape[1]} columns, expected {d}")
    out = encoder.net.forward(x)
    z = encoder.z_dim
    return GaussianPosterior(
        mean=ad.slice_cols(out, 0, z),
        log_var=ad.slice_cols(out, z, 2 * z),
    )


def reparameterize(post: GaussianPosterior, noise: np.ndarray) -> ad.Node:
    eps = ad.constant(noise)
    if eps.value.shape != post.mean.value.shape:
        raise ad.ShapeError(
            f"reparameterize: noise shape {eps.value.shape} != posterior shape {post.mean.value.shape}")
    sigma = ad.exp(ad.scale(post.log_var, 0.5))
    return ad.add(post.mean, ad.mul(sigma, eps))


def decode(decoder: Decoder, z: ad.Node) -> ad.Node:
    if z.value.shape[1] != decoder.net.weights[0].value.shape[0]:
        raise ad.ShapeError(
            f"decode: z has {z.value.shape[1]} columns, expected {decoder.net.weights[0].value.shape[0]}")
    return ad.clip(ad.sigmoid(decoder.net.forward(z)), PIXEL_FLOOR, 1.0 - PIXEL_FLOOR)


def critic_score(critic: Critic, x: ad.Node, z: ad.Node) -> ad.Node:
    if x.value.shape[0] != z.value.shape[0]:
        raise ad.ShapeError(
            f"critic_score: x has {x.value.shape[0]} rows, z has {z.value.shape[0]}")
    return critic.net.forward(ad.concat_cols(x, z))


# ---------------------------------------------------------------------------
# graph-free forward passes (frozen-model evaluation)
# ---------------------------------------------------------------------------

def forward_values(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.value + b.value
        if i < last:
            h = np.where(h > 0, h, mlp.slope * h)
    return h


def posterior_values(encoder: Encoder, x: np.ndarray):
    out = forward_values(encoder.net, x)
    return out[:, : encoder.z_dim], out[:, encoder.z_dim:]


def decode_values(decoder: Decoder, z: np.ndarray) -> np.ndarray:
    logits = forward_values(decoder.net, z)
    out = np.empty_like(logits)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ez = np.exp(logits[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, PIXEL_FLOOR, 1.0 - PIXEL_FLOOR)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def write_arrays(path, arrays) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            rows, cols = arr.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(arr.astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(arrays)))


def read_arrays(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(
            f"bad magic at offset 0: {blob[:len(_MAGIC)]!r} (expected {_MAGIC!r})")
    offset = len(_MAGIC)
    arrays = []
    # all but the trailing 4 count bytes are array records
    while offset < len(blob) - 4:
        if offset + 8 > len(blob) - 4:
            raise CheckpointError(f"truncated array header at offset {offset}")
        rows, cols = struct.unpack_from("<II", blob, offset)
        offset += 8
        nbytes = rows * cols * 8
        if offset + nbytes > len(blob) - 4:
            raise CheckpointError(
                f"truncated array data at offset {offset}: need {nbytes} bytes")
        arr = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset)
        arrays.append(arr.reshape(rows, cols).copy())
        offset += nbytes
    if offset != len(blob) - 4:
        raise CheckpointError(f"missing trailing count at offset {offset}")
    (count,) = struct.unpack_from("<I", blob, offset)
    if count != len(arrays):
        raise CheckpointError(
            f"count mismatch at offset {offset}: trailer says {count}, parsed {len(arrays)}")
    return arrays


def save_model(path, encoder: Encoder, decoder: Decoder) -> None:
    write_arrays(path, encoder.net.arrays() + decoder.net.arrays())


def _mlp_from_arrays(arrays) -> Mlp:
    weights = [ad.Parameter(a) for a in arrays[0::2]]
    biases = [ad.Parameter(a) for a in arrays[1::2]]
    for i, (w, b) in enumerate(zip(weights, biases)):
        if b.value.shape != (1, w.value.shape[1]):
            raise CheckpointError(
                f"layer {i}: bias shape {b.value.shape} does not match weight {w.value.shape}")
        if i > 0 and weights[i - 1].value.shape[1] != w.value.shape[0]:
            raise CheckpointError(
                f"layer {i}: width {w.value.shape[0]} does not chain from previous layer")
    return Mlp(weights, biases)


def load_model(path):
    arrays = read_arrays(path)
    per_layer = 2
    expected = 2 * per_layer * (HIDDEN_LAYERS + 1)
    if len(arrays) != expected:
        raise CheckpointError(
            f"expected {expected} arrays (encoder + decoder), found {len(arrays)}")
    half = len(arrays) // 2
    enc_net = _mlp_from_arrays(arrays[:half])
    dec_net = _mlp_from_arrays(arrays[half:])
    z_dim = enc_net.weights[-1].value.shape[1] // 2
    if dec_net.weights[0].value.shape[0] != z_dim:
        raise CheckpointError(
            f"latent width mismatch: encoder implies {z_dim}, "
            f"decoder starts at {dec_net.weights[0].value.shape[0]}")
    input_dim = dec_net.weights[-1].value.shape[1]
    if enc_net.weights[0].value.shape[0] != input_dim:
        raise CheckpointError(
            f"input width mismatch: encoder takes {enc_net.weights[0].value.shape[0]}, "
            f"decoder emits {input_dim}")
    return Encoder(enc_net, z_dim), Decoder(dec_net, input_dim)
