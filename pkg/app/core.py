import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from app import nn
from app import tensor as T
from app.config import ExperimentConfig
from app.detection import (
    Head,
    HeadOutput,
    ModelConfig,
    assign_targets,
    average_precision,
    count_params_flops,
    decode_nms,
    in_range,
    late_fusion,
    make_anchors,
    total_loss,
)
from app.fusion import Fusion, HrpeTable, ccl_section_sums
from app.geometry import Pose2D, RotatedBox, relative_pose
from app.scenario import (
    EGO_ID,
    NoiseSetting,
    Scene,
    apply_pose_noise,
    generate_scene,
    load_scene,
    rasterize,
    sample_latency,
    save_scene,
    serve_frame,
    world_to_local_boxes,
)
from app.sharing import (
    BackboneLite,
    Codec,
    MultiAgentFeature,
    SharedFeature,
    assemble,
    gamma,
)
from app.tensor import Tensor
from app.util import ConfigError, NumericError, UsageError, make_rng

logger = logging.getLogger(__name__)

EVAL_MODES = ("intermediate", "no_fusion", "late_fusion")
TRAIN_FRACTION = 0.8


@dataclass
class Sample:
    """Everything the ego holds at the sample frame: its own scan plus what each
    aux agent shared (scan captured at the served frame, reported pose and time)."""

    scene_seed: int
    images: np.ndarray
    agent_ids: list[int]
    agent_types: list[str]
    capture_poses: list[Pose2D]
    capture_times: list[float]
    velocities: list[tuple[float, float]]
    ego_time: float
    gt: list[RotatedBox]

    @property
    def ego_pose(self) -> Pose2D:
        return self.capture_poses[0]

    def ego_only(self) -> "Sample":
        return Sample(
            self.scene_seed,
            self.images[:1],
            self.agent_ids[:1],
            self.agent_types[:1],
            self.capture_poses[:1],
            self.capture_times[:1],
            self.velocities[:1],
            self.ego_time,
            self.gt,
        )


def build_sample(scene: Scene, cfg: ExperimentConfig, setting: NoiseSetting, stream: int) -> Sample:
    frame = scene.sample_frame
    ego = frame.agent(EGO_ID)
    order = sorted(frame.agents, key=lambda meta: (meta.id != EGO_ID, meta.id))
    images, poses, times, velocities = [], [], [], []
    for meta in order:
        if meta.id == EGO_ID:
            served, pose = frame, ego.pose
        else:
            rng = make_rng(stream, scene.seed, frame.index, meta.id)
            latency = sample_latency(rng, setting)
            served = serve_frame(scene, frame.timestamp, latency)
            pose = apply_pose_noise(rng, served.agent(meta.id).pose, setting)
        image = rasterize(scene, served, meta.id, cfg.grid, cfg.scene.sensor)
        images.append(image.tensor.data)
        poses.append(pose)
        times.append(float(served.timestamp))
        velocities.append(served.agent(meta.id).velocity)
    gt = in_range(world_to_local_boxes(frame.objects, ego.pose), cfg.grid)
    return Sample(
        scene.seed,
        np.stack(images),
        [meta.id for meta in order],
        [meta.agent_type for meta in order],
        poses,
        times,
        velocities,
        float(frame.timestamp),
        gt,
    )


class Model(nn.Module):
    """Backbone, codec, fusion and head wired for one ego sample."""

    def __init__(self, cfg: ModelConfig, seed: int, stcm: bool = True, max_agents: int | None = None):
        super().__init__()
        rng = make_rng(seed, 2)
        self.cfg = cfg
        self.stcm = stcm
        self.max_agents = max_agents
        self.backbone = BackboneLite(cfg.grid, cfg.raster_channels, cfg.channels, rng)
        self.codec = Codec(cfg.channels, cfg.compression, rng)
        self.fusion = Fusion(cfg.fusion, rng)
        self.head = Head(cfg.channels, rng, cfg.anchors.per_cell)
        self.anchors = make_anchors(cfg.grid, cfg.anchors)
        f = cfg.fusion
        self.hrpe = HrpeTable(f.width, f.tau, f.theta_bin, f.d_bin)

    def share(self, images: np.ndarray) -> Tensor:
        """Per-agent features after the compress/decompress round trip. [L, H, W, C]"""
        features = self.backbone(Tensor(images))
        return self.codec.decompress(self.codec.compress(features))

    def positions(self, sample: Sample, fused: MultiAgentFeature) -> np.ndarray:
        pos = np.zeros((fused.agents, self.cfg.fusion.width))
        index = {agent_id: i for i, agent_id in enumerate(sample.agent_ids)}
        for slot, agent_id in enumerate(fused.agent_ids):
            if agent_id in index:
                i = index[agent_id]
                d, theta = relative_pose(sample.ego_pose, sample.capture_poses[i])
                pos[slot] = self.hrpe.lookup(d, theta, sample.agent_types[i])
        return pos

    def fuse(self, sample: Sample) -> MultiAgentFeature:
        decoded = self.share(sample.images)
        landed = []
        for i, agent_id in enumerate(sample.agent_ids):
            shared = SharedFeature(
                agent_id,
                T.getitem(decoded, i),
                sample.capture_poses[i],
                sample.capture_times[i],
                sample.agent_types[i],
                sample.velocities[i],
            )
            feature, validity = gamma(shared, sample.ego_pose, sample.ego_time, self.cfg.grid, stcm=self.stcm)
            landed.append((agent_id, feature, validity))
        return assemble(landed, self.max_agents)

    def __call__(self, sample: Sample) -> HeadOutput:
        fused = self.fuse(sample)
        m = self.fusion(fused.tensor, fused.validity, self.positions(sample, fused))
        return self.head(T.getitem(m, 0))

    def detect(self, sample: Sample, score_thresh: float, nms_iou: float) -> list[RotatedBox]:
        return decode_nms(self(sample), self.anchors, score_thresh, nms_iou)


def build_model(cfg: ExperimentConfig, seed: int | None = None) -> Model:
    return Model(cfg.model, cfg.seed if seed is None else seed, stcm=cfg["stcm"])


def checkpoint_metadata(cfg: ExperimentConfig) -> dict:
    return {"model_hash": cfg.model_hash, "grid": cfg.grid.describe(), "config": cfg.to_text()}


def load_model(cfg: ExperimentConfig, path: Path) -> Model:
    state, metadata = nn.load_checkpoint(path)
    if metadata.get("grid") != cfg.grid.describe():
        raise ConfigError(f"checkpoint grid {metadata.get('grid')} differs from config grid {cfg.grid.describe()}")
    if metadata.get("model_hash") != cfg.model_hash:
        raise ConfigError("checkpoint was trained with a different model configuration")
    model = build_model(cfg)
    model.load_state_dict(state)
    return model


#
# Corpus
#


def scene_seeds(seed: int, count: int) -> list[int]:
    return [seed * 100_000 + i for i in range(count)]


def generate_corpus(cfg: ExperimentConfig, seed: int, count: int, out: Path) -> dict:
    if count < 1:
        raise UsageError("the corpus needs at least one scene")
    split = max(1, int(round(TRAIN_FRACTION * count))) if count > 1 else 1
    entries = []
    for i, scene_seed in enumerate(scene_seeds(seed, count)):
        scene = generate_scene(scene_seed, cfg.scene)
        name = f"scene_{i:04d}.json"
        save_scene(out / name, scene)
        entries.append({"file": name, "seed": scene_seed, "split": "train" if i < split else "val"})
        logger.debug(f"Generated {name} (seed {scene_seed})")
    manifest = {"schema_version": 1, "seed": seed, "config_hash": cfg.config_hash, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Generated {count} scenes in {out} ({split} train / {count - split} val)")
    return manifest


def load_corpus(data_dir: Path, split: str | None = None) -> list[Scene]:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"no scene corpus at {data_dir}; run generate first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return [
        load_scene(data_dir / entry["file"])
        for entry in manifest["scenes"]
        if split is None or entry["split"] == split
    ]


#
# Training
#


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def save(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Trainer:
    def __init__(self, cfg: ExperimentConfig, model: Model, out_dir: Path | None = None):
        self.cfg = cfg
        self.model = model
        self.out_dir = out_dir
        self.params = list(nn.parameter_registry(model).values())
        self.optimizer = nn.AdamW(self.params, cfg.optimizer.lr, cfg.optimizer.weight_decay)
        self._targets: dict[int, object] = {}

    def targets(self, sample: Sample):
        if sample.scene_seed not in self._targets:
            self._targets[sample.scene_seed] = assign_targets(sample.gt, self.model.anchors, self.cfg.loss)
        return self._targets[sample.scene_seed]

    def step(self, sample: Sample, lr: float) -> float:
        self.optimizer.zero_grad()
        with T.Tape() as tape:
            loss, cls, reg = total_loss(self.model(sample), self.targets(sample), self.cfg.loss)
        T.backward(loss, self.params, tape)
        self.optimizer.step(lr)
        logger.debug(f"scene {sample.scene_seed}: loss={loss.item():.5f} cls={cls:.5f} reg={reg:.5f} lr={lr:.2e}")
        return loss.item()

    def fit(self, scenes: list[Scene], epochs: int, setting: NoiseSetting) -> RunRecord:
        if not scenes:
            raise UsageError("no training scenes")
        opt = self.cfg.optimizer
        record = RunRecord(self.cfg.config_hash, self.cfg.seed)
        started = time.perf_counter()
        self.model.train()
        for epoch in range(epochs):
            order = make_rng(self.cfg.seed, 3, epoch).permutation(len(scenes))
            losses = []
            for step, index in enumerate(order):
                scene = scenes[int(index)]
                progress = epoch + step / len(scenes)
                lr = nn.warmup_cosine_lr(
                    progress, opt.lr, opt.warmup_lr, opt.warmup_epochs, epochs, opt.restart_epochs
                )
                stream = self.cfg.seed * 1000 + epoch
                try:
                    sample = build_sample(scene, self.cfg, setting, stream)
                    losses.append(self.step(sample, max(lr, 1e-12)))
                except NumericError as e:
                    self.dump_failure(epoch, scene.seed, stream, e)
                    raise
            record.epoch_losses.append(float(np.mean(losses)))
            logger.info(f"Epoch {epoch + 1}/{epochs}: loss={record.epoch_losses[-1]:.5f}")
        record.wall_time = time.perf_counter() - started
        return record

    def dump_failure(self, epoch: int, scene_seed: int, stream: int, error: Exception):
        logger.error(f"Non-finite value at epoch {epoch}, scene {scene_seed}, batch seed {stream}: {error}")
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump = {"epoch": epoch, "scene_seed": scene_seed, "batch_seed": stream, "error": str(error)}
        (self.out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")


#
# Evaluation
#


def detect_alone(model: Model, sample: Sample, index: int, score_thresh: float, nms_iou: float):
    """Detections of one agent from its own scan, in its own frame."""
    solo = Sample(
        sample.scene_seed,
        sample.images[index : index + 1],
        [EGO_ID],
        sample.agent_types[index : index + 1],
        [sample.capture_poses[index]],
        [sample.ego_time],
        [(0.0, 0.0)],
        sample.ego_time,
        [],
    )
    return model.detect(solo, score_thresh, nms_iou)


def predict(model: Model, sample: Sample, mode: str, cfg: ExperimentConfig) -> list[RotatedBox]:
    thresh, iou = cfg["score_thresh"], cfg["nms_iou"]
    match mode:
        case "intermediate":
            return model.detect(sample, thresh, iou)
        case "no_fusion":
            return model.detect(sample.ego_only(), thresh, iou)
        case "late_fusion":
            per_agent = [
                (detect_alone(model, sample, i, thresh, iou), sample.capture_poses[i])
                for i in range(len(sample.agent_ids))
            ]
            return late_fusion(per_agent, sample.ego_pose, iou)
    raise UsageError(f"unknown evaluation mode {mode}")


def evaluate(
    model: Model,
    scenes: list[Scene],
    cfg: ExperimentConfig,
    setting: NoiseSetting,
    modes: tuple[str, ...] = EVAL_MODES,
    stream: int | None = None,
) -> dict[str, dict]:
    """AP@0.5 / AP@0.7 per mode over the sample frame of every scene."""
    if not scenes:
        raise UsageError("no evaluation scenes")
    model.eval()
    stream = cfg.seed * 1000 + 999 if stream is None else stream
    predictions = {mode: [] for mode in modes}
    ground_truth = []
    for scene in scenes:
        sample = build_sample(scene, cfg, setting, stream)
        ground_truth.append(sample.gt)
        for mode in modes:
            predictions[mode].append(predict(model, sample, mode, cfg))
    params, flops = count_params_flops(cfg.model, agents=len(scenes[0].agent_ids))
    results = {}
    for mode in modes:
        results[mode] = {
            "ap50": average_precision(predictions[mode], ground_truth, 0.5),
            "ap70": average_precision(predictions[mode], ground_truth, 0.7),
            "params": params,
            "flops": flops,
            "predictions": predictions[mode],
        }
        logger.info(f"{setting.mode} {mode}: AP@0.5={results[mode]['ap50']:.4f} AP@0.7={results[mode]['ap70']:.4f}")
    return results


def attention_export(model: Model, sample: Sample) -> list[np.ndarray | None]:
    model.eval()
    model.fusion.record_attention(True)
    try:
        model(sample)
        return model.fusion.attention_maps()
    finally:
        model.fusion.record_attention(False)


def ccl_export(model: Model) -> np.ndarray:
    return ccl_section_sums(model.fusion)


def sweep_setting(axis: str, value: float) -> NoiseSetting:
    match axis:
        case "latency":
            return NoiseSetting.preset("harsh", t_lag=value)
        case "heading":
            return NoiseSetting.preset("harsh", sigma_hdg=value)
        case "localization":
            return NoiseSetting.preset("harsh", sigma_loc=value)
    raise UsageError(f"unknown sweep axis {axis}")


SWEEP_SUBSETS = {
    "latency": {"normal": (100.0, 200.0), "severe": (300.0, 500.0)},
    "localization": {"normal": (0.1, 0.2), "severe": (0.3, 0.5)},
    "heading": {"normal": (0.2, 0.4), "severe": (0.6, 1.0)},
}


def subset_means(axis: str, points: list[tuple[float, float, float]]) -> list[tuple[str, float, float]]:
    """(subset, mean AP@0.5, mean AP@0.7) over sweep points inside each subset range."""
    rows = []
    for name, (low, high) in SWEEP_SUBSETS[axis].items():
        inside = [(a, b) for v, a, b in points if low - 1e-9 <= v <= high + 1e-9]
        if inside:
            rows.append((name, float(np.mean([a for a, _ in inside])), float(np.mean([b for _, b in inside]))))
    return rows
