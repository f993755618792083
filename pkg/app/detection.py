"""
Detection head, anchor targets, losses, NMS, average precision and analytic
parameter / FLOP counters.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from app import tensor as T
from app.fusion import FusionConfig
from app.geometry import GridSpec, Pose2D, RotatedBox, box_to_frame, rotated_iou
from app.nn import Conv2d, Module
from app.tensor import Tensor
from app.util import ConfigError

logger = logging.getLogger(__name__)

ANCHOR_YAWS = (0.0, math.pi / 2)
BOX_DIM = 7
PRIOR_PROBABILITY = 0.01


@dataclass(frozen=True)
class AnchorSpec:
    w: float = 1.8
    l: float = 4.2  # noqa: E741
    h: float = 1.5
    z: float = -1.0
    yaws: tuple[float, ...] = ANCHOR_YAWS

    @property
    def per_cell(self) -> int:
        return len(self.yaws)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 1.0 / 9.0
    pos_iou: float = 0.6
    neg_iou: float = 0.45

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"focal alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be nonnegative, got {self.gamma}")
        if self.beta <= 0:
            raise ConfigError(f"smooth-L1 beta must be positive, got {self.beta}")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ConfigError("IoU thresholds must satisfy 0 <= neg <= pos <= 1")


@dataclass
class HeadOutput:
    cls: Tensor
    reg: Tensor


def make_anchors(grid: GridSpec, spec: AnchorSpec = AnchorSpec()) -> np.ndarray:
    """[H, W, A, 7] anchors (x, y, z, w, l, h, yaw) at every cell centre."""
    xs, ys = grid.cell_centers()
    anchors = np.zeros((grid.height, grid.width, spec.per_cell, BOX_DIM))
    anchors[..., 0] = xs[..., None]
    anchors[..., 1] = ys[..., None]
    anchors[..., 2] = spec.z
    anchors[..., 3] = spec.w
    anchors[..., 4] = spec.l
    anchors[..., 5] = spec.h
    anchors[..., 6] = np.array(spec.yaws)
    return anchors


def box_from_row(row: np.ndarray, score: float | None = None) -> RotatedBox:
    return RotatedBox(*(float(v) for v in row[:BOX_DIM]), score=score)


class Head(Module):
    """Two 1x1 convolutions: per-anchor objectness and per-anchor box residuals."""

    def __init__(self, channels: int, rng, anchors_per_cell: int = 2):
        super().__init__()
        self.cls = Conv2d(channels, anchors_per_cell, 1, rng)
        self.reg = Conv2d(channels, anchors_per_cell * BOX_DIM, 1, rng)
        self.cls.bias.data[...] = -math.log((1 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)

    def __call__(self, x: Tensor) -> HeadOutput:
        return head_forward(self, x)


def head_forward(head: Head, m_ego: Tensor) -> HeadOutput:
    x = T.reshape(m_ego, (1,) + m_ego.shape)
    cls = head.cls(x)
    reg = head.reg(x)
    return HeadOutput(T.reshape(cls, cls.shape[1:]), T.reshape(reg, reg.shape[1:]))


#
# Box encoding
#


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residuals of boxes [..., 7] against anchors [..., 7]."""
    diag = np.hypot(anchors[..., 3], anchors[..., 4])
    out = np.empty(np.broadcast_shapes(gt.shape, anchors.shape))
    out[..., 0] = (gt[..., 0] - anchors[..., 0]) / diag
    out[..., 1] = (gt[..., 1] - anchors[..., 1]) / diag
    out[..., 2] = (gt[..., 2] - anchors[..., 2]) / anchors[..., 5]
    out[..., 3] = np.log(gt[..., 3] / anchors[..., 3])
    out[..., 4] = np.log(gt[..., 4] / anchors[..., 4])
    out[..., 5] = np.log(gt[..., 5] / anchors[..., 5])
    out[..., 6] = gt[..., 6] - anchors[..., 6]
    return out


def decode_boxes(residuals: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    diag = np.hypot(anchors[..., 3], anchors[..., 4])
    out = np.empty(np.broadcast_shapes(residuals.shape, anchors.shape))
    out[..., 0] = residuals[..., 0] * diag + anchors[..., 0]
    out[..., 1] = residuals[..., 1] * diag + anchors[..., 1]
    out[..., 2] = residuals[..., 2] * anchors[..., 5] + anchors[..., 2]
    out[..., 3] = np.exp(residuals[..., 3]) * anchors[..., 3]
    out[..., 4] = np.exp(residuals[..., 4]) * anchors[..., 4]
    out[..., 5] = np.exp(residuals[..., 5]) * anchors[..., 5]
    out[..., 6] = residuals[..., 6] + anchors[..., 6]
    return out


@dataclass
class Targets:
    labels: np.ndarray  # [H, W, A]: 1 positive, 0 negative, -1 ignore
    residuals: np.ndarray  # [H, W, A, 7]

    @property
    def positives(self) -> int:
        return int((self.labels == 1).sum())


def assign_targets(gt: list[RotatedBox], anchors: np.ndarray, cfg: LossConfig) -> Targets:
    """Label anchors by their best rotated IoU with any ground-truth box.

    Each box's best anchor is positive whenever that IoU is above zero.
    """
    shape = anchors.shape[:-1]
    flat = anchors.reshape(-1, BOX_DIM)
    best_iou = np.zeros(len(flat))
    best_gt = np.full(len(flat), -1)
    forced: dict[int, int] = {}
    anchor_reach = 0.5 * math.hypot(flat[0, 3], flat[0, 4]) if len(flat) else 0.0
    for g, box in enumerate(gt):
        reach = anchor_reach + 0.5 * math.hypot(box.w, box.l)
        near = np.nonzero(np.hypot(flat[:, 0] - box.cx, flat[:, 1] - box.cy) <= reach)[0]
        top_iou, top_anchor = 0.0, -1
        for a in near:
            iou = rotated_iou(box_from_row(flat[a]), box)
            if iou > best_iou[a]:
                best_iou[a], best_gt[a] = iou, g
            if iou > top_iou:
                top_iou, top_anchor = iou, a
        if top_anchor >= 0:
            forced[top_anchor] = g

    labels = np.full(len(flat), -1, dtype=np.int64)
    labels[best_iou <= cfg.neg_iou] = 0
    labels[best_iou >= cfg.pos_iou] = 1
    matched = best_gt.copy()
    for a, g in forced.items():
        labels[a] = 1
        matched[a] = g

    residuals = np.zeros((len(flat), BOX_DIM))
    positive = np.nonzero(labels == 1)[0]
    if len(positive):
        gt_rows = np.array([gt[g].as_array() for g in matched[positive]])
        residuals[positive] = encode_boxes(gt_rows, flat[positive])
    return Targets(labels.reshape(shape), residuals.reshape(shape + (BOX_DIM,)))


#
# Losses
#


def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Sigmoid focal loss averaged over anchors whose label is not -1."""
    valid = (labels >= 0).astype(np.float64)
    sign = np.where(labels == 1, 1.0, -1.0)
    alpha_t = np.where(labels == 1, alpha, 1.0 - alpha)
    z = T.mul(logits, sign)
    # (1 - p_t)^gamma in log space so confident anchors keep a finite slope
    modulator = T.exp(T.mul(T.log_sigmoid(T.mul(z, -1.0)), gamma)) if gamma else Tensor(np.ones(labels.shape))
    per_anchor = T.mul(T.mul(modulator, T.log_sigmoid(z)), -alpha_t * valid)
    return T.mul(T.sum_(per_anchor), 1.0 / max(1.0, valid.sum()))


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float) -> Tensor:
    """Mean smooth-L1 over all components of pred."""
    return T.mean(T.smooth_l1(pred, target, beta))


def regression_loss(reg: Tensor, targets: Targets, beta: float) -> Tensor:
    """Smooth-L1 over the 7 residuals of positive anchors only."""
    shaped = T.reshape(reg, targets.residuals.shape)
    positive = (targets.labels == 1).astype(np.float64)[..., None]
    per_value = T.mul(T.smooth_l1(shaped, targets.residuals, beta), positive)
    return T.mul(T.sum_(per_value), 1.0 / max(1, targets.positives * BOX_DIM))


def total_loss(head: HeadOutput, targets: Targets, cfg: LossConfig) -> tuple[Tensor, float, float]:
    cls = focal_loss(head.cls, targets.labels, cfg.alpha, cfg.gamma)
    reg = regression_loss(head.reg, targets, cfg.beta)
    return T.add(cls, reg), cls.item(), reg.item()


#
# Decoding
#


def nms(boxes: list[RotatedBox], iou_threshold: float) -> list[RotatedBox]:
    """Greedy rotated NMS; input order breaks score ties."""
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept: list[RotatedBox] = []
    for i in order:
        if all(rotated_iou(boxes[i], other) <= iou_threshold for other in kept):
            kept.append(boxes[i])
    return kept


def decode_nms(
    head: HeadOutput,
    anchors: np.ndarray,
    score_thresh: float,
    nms_iou: float,
    max_candidates: int = 500,
) -> list[RotatedBox]:
    scores = 0.5 * (1.0 + np.tanh(0.5 * head.cls.data))
    flat_scores = scores.reshape(-1)
    candidates = np.nonzero(flat_scores > score_thresh)[0]
    if len(candidates) == 0:
        return []
    candidates = candidates[np.argsort(-flat_scores[candidates], kind="stable")][:max_candidates]
    residuals = head.reg.data.reshape(-1, BOX_DIM)[candidates]
    decoded = decode_boxes(residuals, anchors.reshape(-1, BOX_DIM)[candidates])
    boxes = []
    for row, score in zip(decoded, flat_scores[candidates]):
        if np.all(np.isfinite(row)) and min(row[3], row[4], row[5]) > 0:
            boxes.append(box_from_row(row, float(score)))
    return nms(boxes, nms_iou)


def late_fusion(
    detections: list[tuple[list[RotatedBox], Pose2D]], ego_pose: Pose2D, nms_iou: float
) -> list[RotatedBox]:
    """Merge per-agent detections (each in its sender's frame) in the ego frame."""
    merged = [box_to_frame(box, pose, ego_pose) for boxes, pose in detections for box in boxes]
    return nms(merged, nms_iou)


def in_range(boxes: list[RotatedBox], grid: GridSpec) -> list[RotatedBox]:
    return [b for b in boxes if grid.contains(b.cx, b.cy)]


#
# Average precision
#


def average_precision(
    predictions: list[list[RotatedBox]], ground_truth: list[list[RotatedBox]], iou_thresh: float
) -> float:
    """All-point interpolated AP over a set of frames.

    Predictions from every frame are ranked globally by score; each one claims the
    unmatched ground-truth box of its frame with the highest IoU >= iou_thresh.
    """
    total_gt = sum(len(g) for g in ground_truth)
    ranked = [
        (-box.score, frame, index, box)
        for frame, boxes in enumerate(predictions)
        for index, box in enumerate(boxes)
    ]
    if total_gt == 0 or not ranked:
        return 0.0
    ranked.sort(key=lambda item: item[:3])
    matched = [np.zeros(len(g), dtype=bool) for g in ground_truth]
    hits = np.zeros(len(ranked))
    for rank, (_, frame, _, box) in enumerate(ranked):
        best, best_iou = -1, iou_thresh
        for j, gt_box in enumerate(ground_truth[frame]):
            if matched[frame][j]:
                continue
            iou = rotated_iou(box, gt_box)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched[frame][best] = True
            hits[rank] = 1.0
    tp = np.cumsum(hits)
    recall = tp / total_gt
    precision = tp / np.arange(1, len(ranked) + 1)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


#
# Analytic cost
#


@dataclass(frozen=True)
class ModelConfig:
    grid: GridSpec
    raster_channels: int = 3
    channels: int = 64
    compression: int = 8
    fusion: FusionConfig = field(default_factory=FusionConfig)
    anchors: AnchorSpec = field(default_factory=AnchorSpec)


def conv_cost(kernel: int, c_in: int, c_out: int, height: int, width: int, bias: bool = True):
    """(params, FLOPs) of a stride-1 'same' convolution; one multiply-add is 2 FLOPs."""
    params = kernel * kernel * c_in * c_out + (c_out if bias else 0)
    return params, 2 * kernel * kernel * c_in * c_out * height * width


def linear_cost(c_in: int, c_out: int, positions: int):
    return c_in * c_out + c_out, 2 * c_in * c_out * positions


def batchnorm_cost(channels: int):
    return 2 * channels, 0


def conv_block_cost(c_in: int, c_out: int, height: int, width: int, residual: bool):
    costs = [conv_cost(3, c_in, c_out, height, width), batchnorm_cost(c_out)]
    if residual and c_in != c_out:
        costs.append(conv_cost(1, c_in, c_out, height, width, bias=False))
    return _total(costs)


def _total(costs) -> tuple[int, int]:
    return sum(p for p, _ in costs), sum(f for _, f in costs)


def fusion_cost(cfg: FusionConfig, agents: int, height: int, width: int) -> tuple[int, int]:
    """Counts exclude normalisation, activations, softmax and residual additions."""
    c = cfg.width
    cells = height * width
    positions = agents * cells
    qkv = [linear_cost(c, c, positions)] * 3
    depth_costs = [linear_cost(cfg.channels, c, positions)]
    if cfg.use_aatt:
        # QK^T and AV across agents at every cell
        depth_costs += qkv + [(0, 2 * 2 * agents * agents * c * cells)]
    if cfg.use_satt:
        if cfg.satt_kind == "global":
            depth_costs += qkv + [(0, 2 * 2 * agents * cells * cells * c)]
        else:
            window = cfg.dinat_kernel * cfg.dinat_kernel
            for _ in cfg.dinat_dilations:
                depth_costs += qkv + [(0, 2 * 2 * positions * window * c)]
    if cfg.use_sconv:
        for _ in range(3):
            params, flops = conv_block_cost(c, c, height, width, residual=False)
            depth_costs.append((params, flops * agents))
    if cfg.arch == "parallel":
        wide = 4 * c
        depth_costs += [linear_cost(wide, cfg.channels, positions), linear_cost(cfg.channels, cfg.channels, positions)]
        if wide != cfg.channels:
            depth_costs.append(linear_cost(wide, cfg.channels, positions))
    else:
        depth_costs.append(linear_cost(c, cfg.channels, positions))
    params, flops = _total(depth_costs)
    return params * cfg.depth, flops * cfg.depth


def cost_breakdown(cfg: ModelConfig, agents: int = 2) -> dict[str, tuple[int, int]]:
    """(params, FLOPs) per model part for one forward pass with `agents` agents."""
    h, w, c = cfg.grid.height, cfg.grid.width, cfg.channels
    compressed = c // cfg.compression
    backbone = _total(
        [
            conv_block_cost(cfg.raster_channels, c, h, w, residual=True),
            conv_block_cost(c, c, h, w, residual=True),
            conv_block_cost(c, c, h, w, residual=False),
        ]
    )
    codec = _total([conv_cost(3, c, compressed, h, w), conv_cost(3, compressed, c, h, w)])
    a = cfg.anchors.per_cell
    head = _total([conv_cost(1, c, a, h, w), conv_cost(1, c, a * BOX_DIM, h, w)])
    return {
        "backbone": (backbone[0], backbone[1] * agents),
        "codec": (codec[0], codec[1] * agents),
        "fusion": fusion_cost(cfg.fusion, agents, h, w),
        "head": head,
    }


def count_params_flops(cfg: ModelConfig, agents: int = 2) -> tuple[int, int]:
    return _total(cost_breakdown(cfg, agents).values())
