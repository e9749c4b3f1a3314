"""Named parameter registry and deterministic initializers."""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np

from .errors import WeightsError
from .tensor import Tensor

BUFFER_SUFFIXES = (".running_mean", ".running_var")
NORM_SUFFIXES = (".bn.scale", ".bn.shift")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def is_norm_param(name: str) -> bool:
    return name.endswith(NORM_SUFFIXES)


class ModelWeights(OrderedDict):
    """Ordered ``name -> float32 ndarray`` mapping.

    Names ending in ``.running_mean``/``.running_var`` are batch-norm
    buffers: serialized with everything else but never trained or counted
    as parameters.
    """

    def __setitem__(self, key, value):
        super().__setitem__(key, np.asarray(value, dtype=np.float32))

    def require(self, name: str) -> np.ndarray:
        try:
            return self[name]
        except KeyError:
            raise WeightsError(f"missing weight tensor {name!r}") from None

    def trainable_names(self) -> list[str]:
        return [k for k in self if not is_buffer(k)]

    def with_prefix(self, prefix: str) -> "ModelWeights":
        return ModelWeights((k, v) for k, v in self.items() if k.startswith(prefix))

    def num_parameters(self, prefixes: Iterable[str] | None = None) -> int:
        names = self.trainable_names()
        if prefixes is not None:
            prefixes = tuple(prefixes)
            names = [k for k in names if k.startswith(prefixes)]
        return int(sum(self[k].size for k in names))

    def copy(self) -> "ModelWeights":
        return ModelWeights((k, v.copy()) for k, v in self.items())

    def as_tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.items()}


def param_rng(seed: int, name: str) -> np.random.Generator:
    """PCG64 stream keyed by (seed, tensor name): independent of creation order."""
    return np.random.Generator(np.random.PCG64([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]))


def kaiming_uniform(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return param_rng(seed, name).uniform(-bound, bound, size=shape).astype(np.float32)


def add_conv_bn(weights: ModelWeights, seed: int, prefix: str, c_in: int, c_out: int, k: int) -> None:
    """Bias-free conv kernel followed by batch norm (scale 1, shift 0)."""
    weights[f"{prefix}.conv.weight"] = kaiming_uniform(seed, f"{prefix}.conv.weight", (c_out, c_in, k, k))
    weights[f"{prefix}.bn.scale"] = np.ones(c_out)
    weights[f"{prefix}.bn.shift"] = np.zeros(c_out)
    weights[f"{prefix}.bn.running_mean"] = np.zeros(c_out)
    weights[f"{prefix}.bn.running_var"] = np.ones(c_out)


def add_conv(weights: ModelWeights, seed: int, prefix: str, c_in: int, c_out: int, k: int,
             bias: float | None = 0.0) -> None:
    weights[f"{prefix}.weight"] = kaiming_uniform(seed, f"{prefix}.weight", (c_out, c_in, k, k))
    if bias is not None:
        weights[f"{prefix}.bias"] = np.full(c_out, bias)


def add_linear(weights: ModelWeights, seed: int, prefix: str, n_in: int, n_out: int) -> None:
    weights[f"{prefix}.weight"] = kaiming_uniform(seed, f"{prefix}.weight", (n_out, n_in))
    weights[f"{prefix}.bias"] = np.zeros(n_out)


def merge(*parts: Mapping[str, np.ndarray]) -> ModelWeights:
    out = ModelWeights()
    for part in parts:
        for k, v in part.items():
            if k in out:
                raise WeightsError(f"duplicate weight name {k!r}")
            out[k] = v
    return out
