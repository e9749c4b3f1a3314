"""Shared conv building blocks and the forward-pass context."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import WeightsError
from .nn import batch_norm, conv2d
from .tensor import Tensor, silu


@dataclass
class ForwardContext:
    """Batch-norm mode plus the batch statistics collected in train mode."""

    mode: str = "infer"
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


INFER = ForwardContext()


def param(params: Mapping, name: str) -> Tensor:
    try:
        value = params[name]
    except KeyError:
        raise WeightsError(f"missing weight tensor {name!r}") from None
    return value if isinstance(value, Tensor) else Tensor(value, name=name)


def raw(params: Mapping, name: str) -> np.ndarray:
    try:
        value = params[name]
    except KeyError:
        raise WeightsError(f"missing weight tensor {name!r}") from None
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def conv_bn(ctx: ForwardContext, params: Mapping, prefix: str, x: Tensor,
            stride: int = 1, activate: bool = True) -> Tensor:
    """conv (same padding) -> batch norm -> optional SiLU."""
    kernel = param(params, f"{prefix}.conv.weight")
    y = conv2d(x, kernel, stride=stride, padding=kernel.shape[-1] // 2)
    y, mu, var = batch_norm(
        y,
        param(params, f"{prefix}.bn.scale"),
        param(params, f"{prefix}.bn.shift"),
        raw(params, f"{prefix}.bn.running_mean"),
        raw(params, f"{prefix}.bn.running_var"),
        mode=ctx.mode,
        return_stats=True,
    )
    if mu is not None:
        ctx.bn_stats[f"{prefix}.bn"] = (mu, var)
    return silu(y) if activate else y


def conv(params: Mapping, prefix: str, x: Tensor, stride: int = 1) -> Tensor:
    kernel = param(params, f"{prefix}.weight")
    bias = param(params, f"{prefix}.bias") if f"{prefix}.bias" in params else None
    return conv2d(x, kernel, stride=stride, padding=kernel.shape[-1] // 2, bias=bias)
