import argparse
import inspect
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from app import core, nn, util
from app.config import DATA_DIR, LOGLEVEL, OUT_DIR, WORKERS, ExperimentConfig, load_config
from app.scenario import NoiseSetting, generate_scene, load_scene
from app.sharing import link_budget_rows, payload_bytes
from app.util import LabError, UsageError

logger = logging.getLogger(__name__)

SWEEP_DEFAULTS = {
    "latency": [0.0, 100.0, 200.0, 300.0, 400.0, 500.0],
    "heading": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "localization": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
}

ABLATIONS = [
    ("ParCon", {}),
    ("ccl x1", {"ccl_rate": 1}),
    ("ccl x2", {"ccl_rate": 2}),
    ("ccl x8", {"ccl_rate": 8}),
    ("w/o HRPE", {"hrpe": False}),
    ("w/o A-Att", {"use_aatt": False}),
    ("w/o S-Att", {"use_satt": False}),
    ("w/o S-Conv", {"use_sconv": False}),
    ("w/o original", {"use_original": False}),
    ("S-Att global", {"satt_kind": "global"}),
    ("ParCon-S", {"arch": "sequential"}),
]

METRIC_HEADER = ["setting", "mode", "ap50", "ap70", "params", "flops"]
PREDICTION_HEADER = ["scene", "frame", "x", "y", "z", "w", "l", "h", "yaw", "score"]


class Lab:
    """Experiment verbs reachable through handler(), one per CLI sub-command."""

    def __init__(self, data_dir: Path = DATA_DIR, out_dir: Path = OUT_DIR, workers: int = WORKERS):
        self.data_dir = data_dir
        self.out_dir = out_dir
        self.workers = workers

    def handler(self, request: dict) -> dict:
        try:
            jsonschema.validate(request, util.request_schema)
        except jsonschema.ValidationError as e:
            return util.format_exception_reply(UsageError(f"invalid request: {e.message}"))

        name = request["action"]
        params = request.get("params", {})
        logger.debug(f"Request: {request}")
        try:
            method = None
            for method_name, method_inst in inspect.getmembers(self, predicate=inspect.ismethod):
                if getattr(method_inst, "command", False) and name in (method_name, *method_inst.aliases):
                    method = method_inst
                    break
            if method is None:
                raise UsageError(f"unsupported action {name}")
            reply = util.format_success_reply(method(**params))
        except LabError as e:
            logger.error(f"{name} failed: {e}")
            reply = util.format_exception_reply(e)
        except TypeError as e:
            logger.error(f"{name} failed: {e}")
            reply = util.format_exception_reply(UsageError(str(e)))
        logger.debug(f"Reply: {reply}")
        return reply

    #
    # helpers
    #

    def _config(self, config: str | None, seed: int | None) -> ExperimentConfig:
        overrides = {"seed": seed} if seed is not None else {}
        return load_config(Path(config) if config else None, **overrides)

    def _out(self, out: str | None, verb: str) -> Path:
        path = Path(out) if out else self.out_dir / verb
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _scenes(self, scene: str | None, split: str | None) -> list:
        if scene:
            path = Path(scene)
            if path.is_dir():
                return core.load_corpus(path, split)
            return [load_scene(path)]
        return core.load_corpus(self.data_dir, split)

    def _noise(self, cfg: ExperimentConfig, noise: str | None) -> NoiseSetting:
        if noise is None:
            return cfg.noise
        return NoiseSetting.preset(noise, cfg["t_lag"], cfg["sigma_hdg"], cfg["sigma_loc"])

    def _model(self, cfg: ExperimentConfig, checkpoint: str | None) -> core.Model:
        if checkpoint:
            return core.load_model(cfg, Path(checkpoint))
        logger.warning("No checkpoint given, using freshly initialised weights")
        return core.build_model(cfg)

    #
    # commands
    #

    @util.command()
    def generate(self, config=None, seed=None, scenes=None, out=None, force=False):
        cfg = self._config(config, seed)
        count = cfg["scenes"] if scenes is None else int(scenes)
        if count < 1:
            raise UsageError("--scenes must be at least 1")
        target = Path(out) if out else self.data_dir
        if target.exists() and any(target.iterdir()) and not force:
            raise UsageError(f"{target} is not empty; pass --force to overwrite")
        target.mkdir(parents=True, exist_ok=True)
        manifest = core.generate_corpus(cfg, cfg.seed, count, target)
        return {"out": str(target), "scenes": len(manifest["scenes"])}

    @util.command()
    def train(self, config=None, seed=None, out=None, scene=None, checkpoint=None, force=False):
        cfg = self._config(config, seed)
        out_dir = self._out(out, "train")
        target = out_dir / "checkpoint.bin"
        if target.exists() and not force:
            raise UsageError(f"{target} exists; pass --force to overwrite")
        base = cfg.require_base_checkpoint(Path(checkpoint) if checkpoint else None)
        model = core.load_model(cfg, base) if base else core.build_model(cfg)
        scenes = self._scenes(scene, "train")
        setting = cfg.training_noise()
        epochs = cfg.training_epochs()
        logger.info(
            f"Training {cfg.training_type} model on {len(scenes)} scenes for {epochs} epochs "
            f"({setting.mode} noise, config {cfg.config_hash})"
        )
        trainer = core.Trainer(cfg, model, out_dir)
        record = trainer.fit(scenes, epochs, setting)
        nn.save_checkpoint(target, model, core.checkpoint_metadata(cfg))
        record.save(out_dir / "run_record.json")
        util.write_csv(
            out_dir / "losses.csv",
            ["epoch", "loss"],
            [[i + 1, loss] for i, loss in enumerate(record.epoch_losses)],
            cfg.config_hash,
        )
        return {"checkpoint": str(target), "epoch_losses": record.epoch_losses}

    @util.command()
    def eval(self, config=None, seed=None, out=None, scene=None, checkpoint=None, noise=None):
        cfg = self._config(config, seed)
        out_dir = self._out(out, "eval")
        model = self._model(cfg, checkpoint)
        scenes = self._scenes(scene, "val")
        setting = self._noise(cfg, noise)
        results = core.evaluate(model, scenes, cfg, setting)

        rows = [
            [setting.mode, mode, r["ap50"], r["ap70"], r["params"], r["flops"]]
            for mode, r in results.items()
        ]
        util.write_csv(out_dir / "metrics.csv", METRIC_HEADER, rows, cfg.config_hash)
        predictions = [
            [s.seed, s.sample_frame.index, b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw, b.score]
            for s, boxes in zip(scenes, results["intermediate"]["predictions"])
            for b in boxes
        ]
        util.write_csv(out_dir / "predictions.csv", PREDICTION_HEADER, predictions, cfg.config_hash)

        size = payload_bytes(cfg.grid, cfg.model.channels, cfg.model.compression)
        links = []
        for s in scenes:
            sample = core.build_sample(s, cfg, setting, cfg.seed * 1000 + 999)
            links += [[s.seed, *row] for row in link_budget_rows(sample.agent_ids, sample.capture_times, sample.ego_time, size)]
        util.write_csv(out_dir / "link_budget.csv", ["scene", "agent_id", "bytes_per_frame", "latency_ms"], links, cfg.config_hash)
        return {mode: {"ap50": r["ap50"], "ap70": r["ap70"]} for mode, r in results.items()}

    @util.command()
    def sweep(self, axis, values=None, config=None, seed=None, out=None, scene=None, checkpoint=None):
        if axis not in SWEEP_DEFAULTS:
            raise UsageError(f"sweep axis must be one of {sorted(SWEEP_DEFAULTS)}, got {axis}")
        values = SWEEP_DEFAULTS[axis] if values is None else [float(v) for v in values]
        if not values:
            raise UsageError("sweep needs at least one value")
        cfg = self._config(config, seed)
        out_dir = self._out(out, "sweep")
        model = self._model(cfg, checkpoint)
        scenes = self._scenes(scene, "val")
        settings = [core.sweep_setting(axis, v) for v in values]

        def run(setting):
            return core.evaluate(model, scenes, cfg, setting, modes=("intermediate",))["intermediate"]

        model.eval()
        with ThreadPoolExecutor(max_workers=max(1, self.workers)) as pool:
            results = list(pool.map(run, settings))

        points = [(v, r["ap50"], r["ap70"]) for v, r in zip(values, results)]
        rows = [[axis, str(v), a50, a70] for v, a50, a70 in points]
        rows += [[axis, name, a50, a70] for name, a50, a70 in core.subset_means(axis, points)]
        util.write_csv(out_dir / f"sweep_{axis}.csv", ["axis", "value", "ap50", "ap70"], rows, cfg.config_hash)
        return {"points": [[v, a50, a70] for v, a50, a70 in points]}

    @util.command()
    def ablate(self, config=None, seed=None, out=None, scene=None):
        cfg = self._config(config, seed)
        out_dir = self._out(out, "ablate")
        train_scenes = self._scenes(scene, "train")
        val_scenes = self._scenes(scene, "val")
        rows, skipped = [], []
        for label, overrides in ABLATIONS:
            variant = cfg.with_overrides(**overrides)
            cells = cfg.grid.height * cfg.grid.width
            if variant["satt_kind"] == "global" and cells > variant["global_attention_max_cells"]:
                logger.warning(f"Skipping {label}: {cells} cells exceed global_attention_max_cells")
                params, flops = core.count_params_flops(variant.model, agents=len(val_scenes[0].agent_ids))
                rows.append([label, "skipped", "skipped", params, flops])
                skipped.append(label)
                continue
            logger.info(f"Ablation {label}: {overrides or 'base'}")
            model = core.build_model(variant)
            core.Trainer(variant, model).fit(train_scenes, variant.training_epochs(), variant.training_noise())
            r = core.evaluate(model, val_scenes, variant, variant.noise, modes=("intermediate",))["intermediate"]
            rows.append([label, r["ap50"], r["ap70"], r["params"], r["flops"]])
        util.write_csv(out_dir / "ablation.csv", ["variant", "ap50", "ap70", "params", "flops"], rows, cfg.config_hash)
        return {"variants": [row[0] for row in rows], "skipped": skipped}

    @util.command()
    def export(self, what, config=None, seed=None, out=None, scene=None, checkpoint=None):
        cfg = self._config(config, seed)
        model = self._model(cfg, checkpoint)
        match what:
            case "ccl-sections":
                sums = core.ccl_export(model)
                rows = [[d + 1, *map(float, row)] for d, row in enumerate(sums)]
                header = ["depth", "section1", "section2", "section3", "section4"]
            case "attention":
                try:
                    scenes = self._scenes(scene, "val")
                except UsageError:
                    scenes = [generate_scene(cfg.seed, cfg.scene)]
                sample = core.build_sample(scenes[0], cfg, cfg.noise, cfg.seed)
                maps = core.attention_export(model, sample)
                rows = [
                    [d + 1, q, k, float(weights[q, k])]
                    for d, weights in enumerate(maps)
                    if weights is not None
                    for q in range(weights.shape[0])
                    for k in range(weights.shape[1])
                ]
                header = ["depth", "query_slot", "key_slot", "weight"]
            case _:
                raise UsageError(f"unknown export target {what}; use ccl-sections or attention")
        path = self._out(out, "export") / f"{what}.csv"
        util.write_csv(path, header, rows, cfg.config_hash)
        return {"out": str(path), "rows": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Parallel collaborative-perception lab")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value experiment config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="action", required=True)

    generate = sub.add_parser("generate", parents=[common], help="generate a scene corpus")
    generate.add_argument("--scenes", type=int, help="number of scenes")
    generate.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--scene", help="scene file or corpus directory")
    train.add_argument("--checkpoint", help="base checkpoint for fine-tuning")
    train.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--scene", help="scene file or corpus directory")
    evaluate.add_argument("--checkpoint", help="checkpoint to evaluate")
    evaluate.add_argument("--noise", choices=["perfect", "simple", "mild", "harsh"])

    sweep = sub.add_parser("sweep", parents=[common], help="one-axis noise robustness sweep")
    sweep.add_argument("axis", choices=sorted(SWEEP_DEFAULTS))
    sweep.add_argument("--values", type=float, nargs="*", help="sweep points")
    sweep.add_argument("--scene", help="scene file or corpus directory")
    sweep.add_argument("--checkpoint", help="checkpoint to evaluate")

    ablate = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    ablate.add_argument("--scene", help="scene file or corpus directory")

    export = sub.add_parser("export", parents=[common], help="export CCL sections or attention")
    export.add_argument("what", help="ccl-sections or attention")
    export.add_argument("--scene", help="scene file or corpus directory")
    export.add_argument("--checkpoint", help="checkpoint to export from")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    params = {k: v for k, v in vars(args).items() if k != "action" and v is not None}
    params = {k: v for k, v in params.items() if not (k == "force" and v is False)}
    try:
        reply = Lab().handler({"action": args.action, "params": params})
    except Exception as e:
        logger.error(f"{args.action} crashed: {e}", exc_info=True)
        return util.exit_code_for(e)
    if reply["error"] is None:
        print(json.dumps(reply["result"], indent=2, default=_jsonable))
    else:
        print(f"error: {reply['error']}", file=sys.stderr)
    return reply["exit_code"]


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value)} is not JSON serialisable")


def run():
    logging.basicConfig(
        level=LOGLEVEL, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    sys.exit(main())


if __name__ == "__main__":
    run()
