"""
Feature sharing: shared backbone, channel codec and the transform/crop/STCM
pipeline that lands every agent's decompressed feature on the ego grid.
"""

import logging
from dataclasses import dataclass

import numpy as np

from app import tensor as T
from app.geometry import GridSpec, Pose2D, warp_feature
from app.nn import Conv2d, ConvBlock, Module
from app.scenario import EGO_ID, PseudoImage
from app.tensor import Tensor
from app.util import ConfigError, UsageError

logger = logging.getLogger(__name__)

BYTES_PER_VALUE = 8


@dataclass
class SharedFeature:
    agent_id: int
    feature: Tensor
    capture_pose: Pose2D
    capture_time: float
    agent_type: str
    velocity: tuple[float, float] = (0.0, 0.0)


@dataclass
class MultiAgentFeature:
    tensor: Tensor
    validity: np.ndarray
    agent_ids: list[int]

    @property
    def agents(self) -> int:
        return self.tensor.shape[0]


class BackboneLite(Module):
    """Three conv-BN-ReLU blocks; the first two carry residual connections."""

    def __init__(self, grid: GridSpec, raster_channels: int, channels: int, rng):
        super().__init__()
        self.grid = grid
        self.raster_channels = raster_channels
        self.blocks = [
            ConvBlock(raster_channels, channels, rng, residual=True),
            ConvBlock(channels, channels, rng, residual=True),
            ConvBlock(channels, channels, rng, residual=False),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (self.grid.height, self.grid.width, self.raster_channels):
            raise ConfigError(
                f"pseudo-image {x.shape} does not match grid "
                f"{self.grid.height}x{self.grid.width}x{self.raster_channels}"
            )
        for block in self.blocks:
            x = block(x)
        return x


def extract_backbone_lite(backbone: BackboneLite, image: PseudoImage) -> Tensor:
    if image.grid != backbone.grid:
        raise ConfigError(f"pseudo-image grid {image.grid} differs from model grid {backbone.grid}")
    out = backbone(T.reshape(image.tensor, (1,) + image.tensor.shape))
    return T.reshape(out, out.shape[1:])


class Codec(Module):
    """3x3 convolution encoder C -> C/N and decoder C/N -> C shared by all agents."""

    def __init__(self, channels: int, ratio: int, rng):
        super().__init__()
        if ratio < 1 or channels % ratio:
            raise ConfigError(f"channels {channels} are not divisible by compression {ratio}")
        self.channels = channels
        self.ratio = ratio
        self.encoder = Conv2d(channels, channels // ratio, 3, rng)
        self.decoder = Conv2d(channels // ratio, channels, 3, rng)

    @property
    def compressed_channels(self) -> int:
        return self.channels // self.ratio

    def compress(self, f: Tensor) -> Tensor:
        return self.encoder(f)

    def decompress(self, f: Tensor) -> Tensor:
        return self.decoder(f)

    def identity_(self):
        """Channel-identity kernels; only meaningful when ratio == 1."""
        for conv in (self.encoder, self.decoder):
            conv.weight.data[...] = 0.0
            conv.weight.data[1, 1] = np.eye(conv.weight.shape[2], conv.weight.shape[3])
            conv.bias.data[...] = 0.0


def payload_bytes(grid: GridSpec, channels: int, ratio: int) -> int:
    return BYTES_PER_VALUE * grid.height * grid.width * (channels // ratio)


def link_budget_rows(
    agent_ids: list[int], capture_times: list[float], ego_time: float, bytes_per_frame: int
) -> list[list]:
    """(agent_id, bytes_per_frame, latency_ms) for every aux link."""
    return [
        [agent_id, bytes_per_frame, float(ego_time - captured)]
        for agent_id, captured in sorted(zip(agent_ids, capture_times))
        if agent_id != EGO_ID
    ]


def crop_mask(grid: GridSpec, detection_range: tuple[float, float, float, float] | None) -> np.ndarray:
    """1 where the cell centre lies inside the detection range (ego frame)."""
    if detection_range is None:
        return np.ones((grid.height, grid.width))
    x_min, x_max, y_min, y_max = detection_range
    xs, ys = grid.cell_centers()
    return ((xs >= x_min) & (xs <= x_max) & (ys >= y_min) & (ys <= y_max)).astype(np.float64)


def gamma(
    shared: SharedFeature,
    ego_pose: Pose2D,
    ego_time: float,
    grid: GridSpec,
    detection_range: tuple[float, float, float, float] | None = None,
    stcm: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """Transform, crop, then compensate the sender's motion during the delay."""
    warped, validity = warp_feature(shared.feature, shared.capture_pose, ego_pose, grid)
    inside = crop_mask(grid, detection_range)
    validity = validity * inside
    warped = T.mul(warped, inside[..., None])

    delay = (ego_time - shared.capture_time) / 1000.0
    vx, vy = shared.velocity
    if stcm and delay != 0 and (vx or vy):
        # sender dead-reckoned forward over the delay
        moved = Pose2D(ego_pose.x + vx * delay, ego_pose.y + vy * delay, ego_pose.yaw)
        stacked = T.concat([warped, Tensor(validity[..., None])], axis=-1)
        shifted, _ = warp_feature(stacked, moved, ego_pose, grid)
        channels = warped.shape[-1]
        warped = T.getitem(shifted, (Ellipsis, slice(0, channels)))
        validity = shifted.data[..., channels]

    keep = (validity > 0).astype(np.float64)
    return T.mul(warped, keep[..., None]), validity * keep


def assemble(
    features: list[tuple[int, Tensor, np.ndarray]], max_agents: int | None = None
) -> MultiAgentFeature:
    """Stack per-agent ego-grid features with the ego in slot 0 and aux by id."""
    if not features:
        raise UsageError("assemble needs at least one agent")
    ordered = sorted(features, key=lambda item: (item[0] != EGO_ID, item[0]))
    if ordered[0][0] != EGO_ID:
        raise UsageError("assemble needs the ego feature")
    tensors = [f for _, f, _ in ordered]
    validity = [v for _, _, v in ordered]
    ids = [agent_id for agent_id, _, _ in ordered]
    if max_agents is not None:
        if len(ordered) > max_agents:
            raise UsageError(f"{len(ordered)} agents exceed max_agents={max_agents}")
        for _ in range(max_agents - len(ordered)):
            tensors.append(Tensor(np.zeros(tensors[0].shape)))
            validity.append(np.zeros(validity[0].shape))
            ids.append(0)
    return MultiAgentFeature(T.stack(tensors, axis=0), np.stack(validity, axis=0), ids)
