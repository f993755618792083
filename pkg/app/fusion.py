"""
Parallel multi-agent fusion.

Each depth compresses the stacked agent features channel-wise (CCL) and hands the
same compressed map to three sub-modules: attention across agents at every cell
(A-Att), dilated neighborhood attention within each agent's map (S-Att) and a
small convolution stack (S-Conv). Their outputs and the compressed map itself are
concatenated back to C channels and mixed by an MLP with a residual connection.
The sequential variant wires the same sub-modules in series instead.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from app import tensor as T
from app.nn import ConvBlock, Linear, Module
from app.tensor import Tensor
from app.util import ConfigError

logger = logging.getLogger(__name__)

CCL_RATES = (1, 2, 4, 8)
ARCHITECTURES = ("parallel", "sequential")
SATT_KINDS = ("dinat", "global")


@dataclass(frozen=True)
class FusionConfig:
    channels: int = 64
    depth: int = 3
    ccl_rate: int = 4
    heads: int = 0
    dinat_kernel: int = 5
    dinat_dilations: tuple[int, ...] = (2, 1)
    hrpe: bool = True
    tau: float = 100.0
    theta_bin: float = 10.0
    d_bin: float = 5.0
    arch: str = "parallel"
    satt_kind: str = "dinat"
    use_aatt: bool = True
    use_satt: bool = True
    use_sconv: bool = True
    use_original: bool = True
    concurrent: bool = False

    @property
    def width(self) -> int:
        """Channel count of the compressed map M'."""
        return self.channels // self.ccl_rate

    @property
    def attention_heads(self) -> int:
        return self.heads or max(1, self.channels // 32)

    def validate(self):
        if self.channels % 16:
            raise ConfigError(f"channels must be divisible by 16, got {self.channels}")
        if self.ccl_rate not in CCL_RATES:
            raise ConfigError(f"ccl_rate must be one of {CCL_RATES}, got {self.ccl_rate}")
        if self.width % 4:
            raise ConfigError(f"compressed width {self.width} must be divisible by 4")
        if self.width % self.attention_heads:
            raise ConfigError(
                f"{self.attention_heads} heads do not divide compressed width {self.width}"
            )
        if self.dinat_kernel < 1 or self.dinat_kernel % 2 == 0:
            raise ConfigError(f"dinat_kernel must be odd, got {self.dinat_kernel}")
        if not self.dinat_dilations or min(self.dinat_dilations) < 1:
            raise ConfigError(f"dinat dilations must be positive, got {self.dinat_dilations}")
        if self.depth < 0:
            raise ConfigError(f"depth must be nonnegative, got {self.depth}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch}")
        if self.satt_kind not in SATT_KINDS:
            raise ConfigError(f"satt_kind must be one of {SATT_KINDS}, got {self.satt_kind}")
        if not (self.use_aatt or self.use_satt or self.use_sconv):
            raise ConfigError("at least one of A-Att, S-Att and S-Conv must stay enabled")
        if self.tau <= 1 or self.theta_bin <= 0 or self.d_bin <= 0:
            raise ConfigError("tau must exceed 1 and HRPE bins must be positive")


#
# HRPE
#


def hrpe_frequencies(width: int, tau: float, agent_type: str) -> np.ndarray:
    """omega_j for j in [0, width/4): 1/tau^(2j+1) for infrastructure, 1/tau^(2j) for vehicles."""
    j = np.arange(width // 4, dtype=np.float64)
    exponent = 2.0 * j + (1.0 if agent_type == "I" else 0.0)
    return 1.0 / np.power(tau, exponent)


def quantize(value: float, bin_size: float) -> tuple[int, float]:
    """Bin index and the bin's centre; bins are centred on multiples of bin_size.

    Values exactly halfway between two centres round up, towards +inf, so
    quantize(2.5, 5.0) is bin 1 and quantize(-2.5, 5.0) is bin 0.
    """
    index = math.floor(value / bin_size + 0.5)
    return index, index * bin_size


def hrpe_encode(
    d: float, theta: float, agent_type: str, width: int, tau: float, theta_bin: float, d_bin: float
) -> np.ndarray:
    """Sinusoidal relative-pose code of length width, laid out as
    [sin(d w_j), cos(d w_j), sin(theta w_j), cos(theta w_j)] per j."""
    _, d_q = quantize(d, d_bin)
    _, theta_deg = quantize(math.degrees(theta), theta_bin)
    theta_q = math.radians(theta_deg)
    omega = hrpe_frequencies(width, tau, agent_type)
    code = np.empty((len(omega), 4))
    code[:, 0] = np.sin(d_q * omega)
    code[:, 1] = np.cos(d_q * omega)
    code[:, 2] = np.sin(theta_q * omega)
    code[:, 3] = np.cos(theta_q * omega)
    return code.reshape(-1)


class HrpeTable:
    """Memoised HRPE codes keyed by (agent type, distance bin, angle bin)."""

    def __init__(self, width: int, tau: float, theta_bin: float, d_bin: float):
        self.width = width
        self.tau = tau
        self.theta_bin = theta_bin
        self.d_bin = d_bin
        self.entries: dict[tuple[str, int, int], np.ndarray] = {}

    def lookup(self, d: float, theta: float, agent_type: str) -> np.ndarray:
        key = (
            agent_type,
            quantize(d, self.d_bin)[0],
            quantize(math.degrees(theta), self.theta_bin)[0],
        )
        if key not in self.entries:
            self.entries[key] = hrpe_encode(
                d, theta, agent_type, self.width, self.tau, self.theta_bin, self.d_bin
            )
        return self.entries[key]


#
# Sub-modules
#


def _split_heads(x: Tensor, heads: int) -> Tensor:
    return T.reshape(x, x.shape[:-1] + (heads, x.shape[-1] // heads))


def _merge_heads(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


class AgentAttention(Module):
    """Multi-head self-attention across the L agents at every cell."""

    def __init__(self, width: int, heads: int, rng):
        super().__init__()
        self.heads = heads
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)
        self.record = False
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, validity: np.ndarray, pos: np.ndarray | None = None) -> Tensor:
        source = T.add(x, pos[:, None, None, :]) if pos is not None else x
        q = _split_heads(self.query(source), self.heads)
        k = _split_heads(self.key(source), self.heads)
        v = _split_heads(self.value(source), self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        logits = T.mul(T.einsum("lyxnd,myxnd->yxnlm", q, k), scale)
        key_valid = np.transpose(validity > 0, (1, 2, 0))[:, :, None, None, :]
        weights = T.masked_softmax(logits, key_valid, axis=-1)
        if self.record:
            self.last_weights = weights.data.mean(axis=(0, 1, 2))
        out = _merge_heads(T.einsum("yxnlm,myxnd->lyxnd", weights, v))
        return T.add(out, x)


def neighborhood_indices(size: int, kernel: int, dilation: int) -> np.ndarray:
    """[size, kernel] neighbour positions along one axis.

    Positions sharing a residue modulo the dilation form a group; each query's
    window slides inside its group and is clamped at the borders, so every query
    sees exactly `kernel` neighbours.
    """
    if size // dilation < kernel:
        raise ConfigError(
            f"a map of size {size} is too small for kernel {kernel} at dilation {dilation}"
        )
    out = np.empty((size, kernel), dtype=np.int64)
    for i in range(size):
        residue, index = i % dilation, i // dilation
        group = len(range(residue, size, dilation))
        start = min(max(index - kernel // 2, 0), group - kernel)
        out[i] = residue + dilation * (start + np.arange(kernel))
    return out


class NeighborhoodAttention(Module):
    def __init__(self, width: int, heads: int, kernel: int, dilation: int, rng):
        super().__init__()
        self.heads = heads
        self.kernel = kernel
        self.dilation = dilation
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        agents, height, width, _ = x.shape
        rows = neighborhood_indices(height, self.kernel, self.dilation)
        cols = neighborhood_indices(width, self.kernel, self.dilation)
        index = (slice(None), rows[:, None, :, None], cols[None, :, None, :], slice(None))
        window = self.kernel * self.kernel

        q = _split_heads(self.query(x), self.heads)
        k = T.getitem(self.key(x), index)
        v = T.getitem(self.value(x), index)
        k = _split_heads(T.reshape(k, (agents, height, width, window, -1)), self.heads)
        v = _split_heads(T.reshape(v, (agents, height, width, window, -1)), self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        logits = T.mul(T.einsum("lyxnd,lyxjnd->lyxnj", q, k), scale)
        weights = T.softmax(logits, axis=-1)
        return _merge_heads(T.einsum("lyxnj,lyxjnd->lyxnd", weights, v))


class GlobalAttention(Module):
    """Full spatial self-attention within each agent's map."""

    def __init__(self, width: int, heads: int, rng):
        super().__init__()
        self.heads = heads
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        agents, height, width, channels = x.shape
        flat = T.reshape(x, (agents, height * width, channels))
        q = _split_heads(self.query(flat), self.heads)
        k = _split_heads(self.key(flat), self.heads)
        v = _split_heads(self.value(flat), self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        logits = T.mul(T.einsum("lpnd,lqnd->lnpq", q, k), scale)
        weights = T.softmax(logits, axis=-1)
        out = _merge_heads(T.einsum("lnpq,lqnd->lpnd", weights, v))
        return T.reshape(out, x.shape)


class SpatialAttention(Module):
    """Stacked neighborhood attention at the configured dilations plus an outer residual."""

    def __init__(self, cfg: FusionConfig, rng):
        super().__init__()
        heads = cfg.attention_heads
        if cfg.satt_kind == "global":
            self.layers = [GlobalAttention(cfg.width, heads, rng)]
        else:
            self.layers = [
                NeighborhoodAttention(cfg.width, heads, cfg.dinat_kernel, dilation, rng)
                for dilation in cfg.dinat_dilations
            ]

    def __call__(self, x: Tensor) -> Tensor:
        out = x
        for layer in self.layers:
            out = layer(out)
        return T.add(out, x)


class SpatialConv(Module):
    def __init__(self, width: int, rng):
        super().__init__()
        self.blocks = [
            ConvBlock(width, width, rng, residual=True),
            ConvBlock(width, width, rng, residual=True),
            ConvBlock(width, width, rng, residual=False),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


#
# Depths
#


class ParallelDepth(Module):
    def __init__(self, cfg: FusionConfig, rng):
        super().__init__()
        self.cfg = cfg
        c, wide = cfg.width, 4 * cfg.width
        self.ccl = Linear(cfg.channels, c, rng)
        self.aatt = AgentAttention(c, cfg.attention_heads, rng) if cfg.use_aatt else None
        self.satt = SpatialAttention(cfg, rng) if cfg.use_satt else None
        self.sconv = SpatialConv(c, rng) if cfg.use_sconv else None
        self.mlp_in = Linear(wide, cfg.channels, rng)
        self.mlp_out = Linear(cfg.channels, cfg.channels, rng)
        self.skip = Linear(wide, cfg.channels, rng) if wide != cfg.channels else None

    def intents(self, m_prime: Tensor, validity: np.ndarray, pos: np.ndarray | None) -> list[Tensor]:
        zeros = Tensor(np.zeros(m_prime.shape))
        branches = [
            (self.aatt, lambda: self.aatt(m_prime, validity, pos)),
            (self.satt, lambda: self.satt(m_prime)),
            (self.sconv, lambda: self.sconv(m_prime)),
        ]
        if self.cfg.concurrent and T.current_tape() is None:
            with ThreadPoolExecutor(max_workers=3) as pool:
                futures = [pool.submit(run) if module else None for module, run in branches]
                outs = [f.result() if f else zeros for f in futures]
        else:
            outs = [run() if module else zeros for module, run in branches]
        outs.append(m_prime if self.cfg.use_original else zeros)
        return outs

    def __call__(self, m: Tensor, validity: np.ndarray, pos: np.ndarray | None = None) -> Tensor:
        m_prime = ccl_forward(self.ccl, m)
        m_o = T.concat(self.intents(m_prime, validity, pos), axis=-1)
        mixed = self.mlp_out(T.relu(self.mlp_in(m_o)))
        return T.add(mixed, self.skip(m_o) if self.skip is not None else m_o)


class SequentialDepth(Module):
    def __init__(self, cfg: FusionConfig, rng):
        super().__init__()
        c = cfg.width
        self.ccl = Linear(cfg.channels, c, rng)
        self.aatt = AgentAttention(c, cfg.attention_heads, rng) if cfg.use_aatt else None
        self.satt = SpatialAttention(cfg, rng) if cfg.use_satt else None
        self.sconv = SpatialConv(c, rng) if cfg.use_sconv else None
        self.restore = Linear(c, cfg.channels, rng)

    def __call__(self, m: Tensor, validity: np.ndarray, pos: np.ndarray | None = None) -> Tensor:
        x = ccl_forward(self.ccl, m)
        if self.aatt is not None:
            x = self.aatt(x, validity, pos)
        if self.satt is not None:
            x = self.satt(x)
        if self.sconv is not None:
            x = self.sconv(x)
        return T.add(self.restore(x), m)


class Fusion(Module):
    def __init__(self, cfg: FusionConfig, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        depth_cls = ParallelDepth if cfg.arch == "parallel" else SequentialDepth
        self.depths = [depth_cls(cfg, rng) for _ in range(cfg.depth)]

    def __call__(self, m0: Tensor, validity: np.ndarray, pos: np.ndarray | None = None) -> Tensor:
        """M^0 [L, H, W, C] -> M^D; pos [L, C/ccl_rate] is injected at the first depth only."""
        if m0.shape[-1] != self.cfg.channels:
            raise ConfigError(f"fusion expects {self.cfg.channels} channels, got {m0.shape[-1]}")
        m = T.mul(m0, (validity > 0)[..., None].astype(np.float64))
        for index, depth in enumerate(self.depths):
            use_pos = pos if index == 0 and self.cfg.hrpe else None
            m = depth(m, validity, use_pos)
            logger.debug(f"Fusion depth {index + 1}: {m.shape}")
        return m

    def record_attention(self, enabled: bool = True):
        for depth in self.depths:
            if depth.aatt is not None:
                depth.aatt.record = enabled
                depth.aatt.last_weights = None

    def attention_maps(self) -> list[np.ndarray | None]:
        """Per-depth L x L agent attention averaged over cells and heads."""
        return [d.aatt.last_weights if d.aatt is not None else None for d in self.depths]


def ccl_forward(ccl: Linear, m: Tensor) -> Tensor:
    """Channel compression: one shared FC per (agent, row, col), C -> C / ccl_rate."""
    if m.shape[-1] != ccl.weight.shape[0]:
        raise ConfigError(f"CCL expects {ccl.weight.shape[0]} channels, got {m.shape[-1]}")
    return ccl(m)


def ccl_section_sums(fusion: Fusion) -> np.ndarray:
    """[D, 4] sums of |w| over four contiguous input-row sections of each CCL weight."""
    rows = []
    for depth in fusion.depths:
        weight = depth.ccl.weight.data
        sections = np.split(np.abs(weight), 4, axis=0)
        rows.append([float(s.sum()) for s in sections])
    return np.array(rows).reshape(len(fusion.depths), 4)
