"""Differentiable classifiers over expression profiles, plus checkpoints.

Three architectures share one interface: a named parameter set, a forward
function mapping an [n, d] batch to per-sample probabilities, and a common
initializer. All heads end in a sigmoid clamped to [1e-7, 1 - 1e-7] so
downstream losses and attributions always see probabilities strictly inside
(0, 1).

Parameter draw order equals the canonical name order below, so a seed fully
determines every weight:

- mlp:          hidden.0.weight, hidden.0.bias, ..., output.weight
- cnn:          conv.0.weight, conv.1.weight, ..., output.weight
- transformer:  token.weight, query.weight, key.weight, value.weight,
                output.weight
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, DimensionError

Array = np.ndarray

ARCHITECTURES = ("mlp", "cnn", "transformer")

_HEAD_EPS = 1e-7

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ``input_dim`` is the selected gene count."""

    architecture: str
    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 64)
    channels: int = 32
    kernel_size: int = 3
    conv_stride: int = 1
    conv_padding: int = 1
    pool_size: int = 2
    pool_stride: int = 2
    conv_layers: int = 2
    embed_dim: int = 32
    tokens: int = 16
    attention_layers: int = 1
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(
                f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}"
            )
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        positive = {
            "input_dim": self.input_dim,
            "channels": self.channels,
            "kernel_size": self.kernel_size,
            "conv_stride": self.conv_stride,
            "pool_size": self.pool_size,
            "pool_stride": self.pool_stride,
            "conv_layers": self.conv_layers,
            "embed_dim": self.embed_dim,
            "tokens": self.tokens,
        }
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.conv_padding < 0:
            raise ValueError(f"conv_padding must be >= 0, got {self.conv_padding}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.attention_layers != 1:
            raise ValueError("only a single self-attention layer is supported")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.architecture == "cnn":
            # run the shape arithmetic now so bad configs fail before training
            conv_output_length(self)
        if self.architecture == "transformer":
            if self.tokens > self.input_dim:
                raise ValueError(
                    f"tokens={self.tokens} exceeds input_dim={self.input_dim}"
                )


class ModelParams:
    """Ordered, named float64 parameter arrays for one model instance."""

    __slots__ = ("_arrays",)

    def __init__(self, arrays: Mapping[str, Array]):
        self._arrays = {
            name: np.asarray(value, dtype=np.float64) for name, value in arrays.items()
        }

    def names(self) -> tuple[str, ...]:
        return tuple(self._arrays)

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def items(self) -> Iterator[tuple[str, Array]]:
        return iter(self._arrays.items())

    def copy(self) -> "ModelParams":
        return ModelParams({n: a.copy() for n, a in self._arrays.items()})

    def bind(self, tape: ad.Tape) -> dict[str, Tensor]:
        """Watch every array on ``tape``; returns name -> leaf tensor."""
        return {name: tape.watch(arr) for name, arr in self._arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        """Tape-free tensors for pure inference."""
        return {name: Tensor(arr) for name, arr in self._arrays.items()}

    def n_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def __repr__(self) -> str:
        return f"ModelParams({len(self._arrays)} arrays, {self.n_parameters()} scalars)"


# ---------------------------------------------------------------------------
# shape bookkeeping


def _pooled_length(length: int, size: int, stride: int) -> int:
    return (length - size) // stride + 1


def conv_output_length(config: ModelConfig) -> int:
    """Sequence length surviving all conv/pool stages (the flatten width is
    ``channels * conv_output_length``)."""
    length = config.input_dim
    for layer in range(config.conv_layers):
        conv_len = (length + 2 * config.conv_padding - config.kernel_size) // config.conv_stride + 1
        if conv_len < 1:
            raise ValueError(
                f"conv layer {layer} consumes the sequence: length {length} with "
                f"kernel {config.kernel_size}, stride {config.conv_stride}, "
                f"padding {config.conv_padding}"
            )
        length = _pooled_length(conv_len, config.pool_size, config.pool_stride)
        if length < 1:
            raise ValueError(
                f"pool after conv layer {layer} consumes the sequence "
                f"(length {conv_len}, pool {config.pool_size}/{config.pool_stride})"
            )
    return length


def token_chunk(config: ModelConfig) -> int:
    """Features per token; the last token is zero-padded when it divides unevenly."""
    return math.ceil(config.input_dim / config.tokens)


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero.

    Arrays are drawn in canonical name order, so equal (config, seed) pairs
    produce bitwise-equal parameters.
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, Array] = {}
    if config.architecture == "mlp":
        fan_in = config.input_dim
        for i, width in enumerate(config.hidden_dims):
            arrays[f"hidden.{i}.weight"] = _uniform(rng, (width, fan_in), fan_in)
            arrays[f"hidden.{i}.bias"] = np.zeros(width)
            fan_in = width
        arrays["output.weight"] = _uniform(rng, (1, fan_in), fan_in)
    elif config.architecture == "cnn":
        c = config.channels
        k = config.kernel_size
        in_ch = 1
        for i in range(config.conv_layers):
            fan_in = in_ch * k
            arrays[f"conv.{i}.weight"] = _uniform(rng, (c, in_ch, k), fan_in)
            in_ch = c
        flat = c * conv_output_length(config)
        arrays["output.weight"] = _uniform(rng, (1, flat), flat)
    else:
        chunk = token_chunk(config)
        d = config.embed_dim
        arrays["token.weight"] = _uniform(rng, (d, chunk), chunk)
        for name in ("query.weight", "key.weight", "value.weight"):
            arrays[name] = _uniform(rng, (d, d), d)
        arrays["output.weight"] = _uniform(rng, (1, d), d)
    return ModelParams(arrays)


# ---------------------------------------------------------------------------
# forward passes


def _check_batch(config: ModelConfig, batch: Tensor) -> None:
    if batch.data.ndim != 2:
        raise DimensionError(f"batch must be [n, features], got shape {batch.data.shape}")
    if batch.data.shape[1] != config.input_dim:
        raise DimensionError(
            f"batch has {batch.data.shape[1]} features, model expects {config.input_dim}"
        )


def _require(tensors: Mapping[str, Tensor], name: str) -> Tensor:
    if name not in tensors:
        raise ValueError(f"parameter set lacks {name!r}; wrong architecture?")
    return tensors[name]


def _head(config: ModelConfig, features: Tensor, weight: Tensor) -> Tensor:
    n = features.data.shape[0]
    logits = ad.reshape(ad.matmul(features, ad.transpose(weight)), (n,))
    return ad.clamp(ad.sigmoid(logits), _HEAD_EPS, 1.0 - _HEAD_EPS)


def forward_mlp(tensors: Mapping[str, Tensor], config: ModelConfig, batch: Tensor) -> Tensor:
    """Fully connected stack: affine + leaky-relu per hidden layer, sigmoid head."""
    _check_batch(config, batch)
    h = batch
    for i in range(len(config.hidden_dims)):
        w = _require(tensors, f"hidden.{i}.weight")
        b = _require(tensors, f"hidden.{i}.bias")
        h = ad.leaky_relu(ad.add(ad.matmul(h, ad.transpose(w)), b), config.leaky_slope)
    return _head(config, h, _require(tensors, "output.weight"))


def forward_cnn(tensors: Mapping[str, Tensor], config: ModelConfig, batch: Tensor) -> Tensor:
    """Single-channel 1-D conv stack: (conv, leaky-relu, max-pool) per layer,
    flatten, sigmoid head. Conv layers carry no bias."""
    _check_batch(config, batch)
    n = batch.data.shape[0]
    h = ad.reshape(batch, (n, 1, config.input_dim))
    for i in range(config.conv_layers):
        w = _require(tensors, f"conv.{i}.weight")
        h = ad.conv1d(h, w, stride=config.conv_stride, padding=config.conv_padding)
        h = ad.leaky_relu(h, config.leaky_slope)
        h = ad.max_pool1d(h, config.pool_size, config.pool_stride)
    flat = config.channels * conv_output_length(config)
    h = ad.reshape(h, (n, flat))
    return _head(config, h, _require(tensors, "output.weight"))


def forward_transformer(
    tensors: Mapping[str, Tensor], config: ModelConfig, batch: Tensor
) -> Tensor:
    """Chunk the profile into tokens, embed, one self-attention layer,
    mean-pool over tokens, sigmoid head."""
    _check_batch(config, batch)
    n = batch.data.shape[0]
    chunk = token_chunk(config)
    pad = config.tokens * chunk - config.input_dim
    h = ad.pad_last(batch, pad) if pad else batch
    tokens = ad.reshape(h, (n, config.tokens, chunk))
    emb = ad.matmul(tokens, ad.transpose(_require(tensors, "token.weight")))
    q = ad.matmul(emb, ad.transpose(_require(tensors, "query.weight")))
    k = ad.matmul(emb, ad.transpose(_require(tensors, "key.weight")))
    v = ad.matmul(emb, ad.transpose(_require(tensors, "value.weight")))
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(config.embed_dim))
    att = ad.matmul(ad.softmax(scores, axis=-1), v)
    pooled = ad.mean(att, axis=1)
    return _head(config, pooled, _require(tensors, "output.weight"))


_FORWARDS = {
    "mlp": forward_mlp,
    "cnn": forward_cnn,
    "transformer": forward_transformer,
}


def forward(tensors: Mapping[str, Tensor], config: ModelConfig, batch: Tensor) -> Tensor:
    """Dispatch to the configured architecture; output is an [n] probability tensor."""
    return _FORWARDS[config.architecture](tensors, config, batch)


def predict(params: ModelParams, config: ModelConfig, batch: Array) -> Array:
    """Tape-free inference: probabilities for an [n, d] matrix."""
    out = forward(params.constants(), config, Tensor(np.asarray(batch, dtype=np.float64)))
    return out.data


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path | str, params: ModelParams, config: ModelConfig) -> None:
    """Serialize config + parameters to JSON with base64 float64 payloads.

    The encoding is fully value-preserving and byte-deterministic: arrays are
    dumped as little-endian float64 buffers and keys are sorted.
    """
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "params": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
            }
            for name, arr in params.items()
        },
        "param_order": list(params.names()),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: Path | str) -> tuple[ModelParams, ModelConfig]:
    """Inverse of save_checkpoint; rejects unknown versions and malformed files."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has unsupported format version {doc.get('format_version')!r}"
        )
    try:
        raw = doc["config"]
        raw["hidden_dims"] = tuple(raw["hidden_dims"])
        config = ModelConfig(**raw)
        arrays = {}
        for name in doc["param_order"]:
            entry = doc["params"][name]
            buf = base64.b64decode(entry["data"].encode("ascii"))
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(
                entry["shape"]
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is malformed: {exc}") from None
    return ModelParams(arrays), config
