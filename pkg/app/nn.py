"""
Parameters, layers, optimiser, learning-rate schedule and checkpoint codec
built on top of app.tensor.
"""

import io
import json
import logging
import math
import struct
from collections.abc import Iterator
from pathlib import Path

import numpy as np

from app import tensor as T
from app.tensor import Tensor
from app.util import ConfigError, DimensionError, UsageError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"V2XLAB\0"
CHECKPOINT_VERSION = 1


def parameter(array: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(array, requires_grad=True, name=name)


#
# Module
#


class Module:
    """Base class for layers.

    Parameters are Tensor attributes with requires_grad set; sub-modules are
    Module attributes or lists of modules. Buffers are plain arrays registered
    through register_buffer. Iteration follows attribute assignment order, so
    names are deterministic across runs.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, array: np.ndarray):
        self._buffers[name] = array

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, list | tuple):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{key}", value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield f"{prefix}{key}", value
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        unexpected = set(state) - set(own) - set(buffers)
        if missing or unexpected:
            raise ConfigError(
                f"checkpoint does not match model: missing={sorted(missing)[:5]} "
                f"unexpected={sorted(unexpected)[:5]}"
            )
        for name, array in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != array.shape:
                raise DimensionError(
                    f"{name}: checkpoint shape {array.shape} != model shape {target.shape}"
                )
            if name in own:
                own[name].data = np.array(array, dtype=np.float64)
            else:
                target[...] = array


def parameter_registry(model: Module) -> dict[str, Tensor]:
    """Name -> parameter map; every parameter must appear exactly once."""
    registry: dict[str, Tensor] = {}
    seen: dict[int, str] = {}
    for name, param in model.named_parameters():
        if name in registry:
            raise UsageError(f"duplicate parameter name {name}")
        if id(param) in seen:
            raise UsageError(f"parameter {name} is also registered as {seen[id(param)]}")
        registry[name] = param
        seen[id(param)] = name
    return registry


def count_parameters(model: Module) -> int:
    return sum(p.size for p in parameter_registry(model).values())


#
# Layers
#


class Linear(Module):
    """Per-position fully connected layer on the last axis; weight is [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return T.fully_connected(x, self.weight, self.bias)

    def zero_(self):
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        bias: bool = True,
    ):
        super().__init__()
        if kernel % 2 == 0 or kernel < 1:
            raise ConfigError(f"convolution kernel must be odd, got {kernel}")
        std = math.sqrt(2.0 / (kernel * kernel * in_channels))
        self.kernel = kernel
        self.weight = parameter(rng.normal(0.0, std, (kernel, kernel, in_channels, out_channels)))
        self.bias = parameter(np.zeros(out_channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding="same")


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBlock(Module):
    """conv3x3 -> batchnorm -> ReLU, optionally with a residual connection."""

    def __init__(self, in_channels, out_channels, rng, residual: bool, kernel: int = 3):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, rng)
        self.bn = BatchNorm2d(out_channels)
        self.residual = residual
        self.shortcut = (
            Conv2d(in_channels, out_channels, 1, rng, bias=False)
            if residual and in_channels != out_channels
            else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn(self.conv(x)))
        if not self.residual:
            return out
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.add(out, skip)


#
# Optimiser
#


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    exp_avg: list[np.ndarray],
    exp_avg_sq: list[np.ndarray],
    step: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One AdamW update with decoupled weight decay; moment buffers are updated in
    place and the new parameter arrays are returned."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if step < 1:
        raise UsageError(f"AdamW step counter starts at 1, got {step}")
    beta1, beta2 = betas
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    updated = []
    for p, g, m, v in zip(params, grads, exp_avg, exp_avg_sq, strict=True):
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"moment buffers {m.shape} do not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        decayed = p * (1.0 - lr * weight_decay)
        updated.append(decayed - lr * (m / correction1) / (np.sqrt(v / correction2) + eps))
    return updated


class AdamW:
    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.exp_avg = [np.zeros_like(p.data) for p in params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None):
        self.step_count += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        updated = adamw_step(
            [p.data for p in self.params],
            grads,
            self.exp_avg,
            self.exp_avg_sq,
            self.step_count,
            lr if lr is not None else self.lr,
            self.weight_decay,
            self.betas,
            self.eps,
        )
        for p, data in zip(self.params, updated):
            p.data = data

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def warmup_cosine_lr(
    epoch: float,
    lr: float,
    warmup_lr: float,
    warmup_epochs: float,
    epochs: float,
    restart_epochs: float = 0,
) -> float:
    """Linear warm-up from warmup_lr to lr, then cosine annealing towards zero,
    restarting every restart_epochs when that is positive."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return warmup_lr + (lr - warmup_lr) * epoch / warmup_epochs
    elapsed = epoch - warmup_epochs
    period = restart_epochs if restart_epochs > 0 else epochs - warmup_epochs
    if period <= 0:
        return lr
    phase = elapsed % period if restart_epochs > 0 else min(elapsed, period)
    return 0.5 * lr * (1.0 + math.cos(math.pi * phase / period))


#
# Checkpoint codec
#


def encode_state(state: dict[str, np.ndarray], metadata: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(state)))
    for name, array in state.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_state(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ConfigError("checkpoint truncated")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise ConfigError("not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        state[name] = data.reshape(shape)
    if offset != len(view):
        raise ConfigError("trailing bytes after checkpoint records")
    return state, metadata


def save_checkpoint(path: Path, model: Module, metadata: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_state(model.state_dict(), metadata))
    logger.info(f"Saved checkpoint {path} ({count_parameters(model)} parameters)")


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    logger.debug(f"Loading checkpoint {path}")
    return decode_state(path.read_bytes())
