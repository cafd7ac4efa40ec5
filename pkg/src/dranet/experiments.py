"""Config-driven experiment plumbing: training runs, ablations, sweeps.

An experiment config is a single JSON document with nested sections for
the generator, split, model, loss weights, and fusion weights. Unknown
keys anywhere are faults so typos never pass silently. Every run is a
pure function of the config plus its seed: rerunning produces
byte-identical checkpoints, reports, and curves (training logs differ
only in one timestamp header line).
"""

from __future__ import annotations

import dataclasses
import datetime
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation, losses, model as model_mod, synth
from .autograd import Tensor
from .core import CompositionLabel
from .evaluation import FusionWeights, MetricsReport
from .faults import ConfigError, DataError
from .losses import AdamState, LossWeights, train_step
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .synth import ExternalDataset, GeneratorConfig, SplitSpec, generate_dataset, load_external_split

SWEEPABLE = ("lambda1", "lambda2", "eta1", "eta2")


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionWeights = field(default_factory=FusionWeights)
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = losses.DEFAULT_LEARNING_RATE
    eval_every: int = 5
    num_biases: int = evaluation.DEFAULT_NUM_BIASES
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0 (0 disables periodic eval)")
        if self.num_biases < 1:
            raise ConfigError("num_biases must be >= 1")


def _section_from_dict(cls, data, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {context!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {context!r}: {unknown}")
    kwargs = dict(data)
    if cls is ModelConfig and "encoder" in kwargs:
        kwargs["encoder"] = tuple(tuple(s) for s in kwargs["encoder"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {context!r} section: {exc}") from None


_SECTIONS = {
    "generator": GeneratorConfig,
    "split": SplitSpec,
    "model": ModelConfig,
    "weights": LossWeights,
    "fusion": FusionWeights,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _section_from_dict(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad experiment config: {exc}") from None


def config_to_dict(config: ExperimentConfig) -> dict:
    def clean(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: clean(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [clean(v) for v in value]
        return value

    return clean(config)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply dotted-key overrides like {"model.use_reverse": False}."""
    sections: dict[str, dict] = {}
    top: dict = {}
    for key, value in overrides.items():
        if "." in key:
            section, inner = key.split(".", 1)
            sections.setdefault(section, {})[inner] = value
        else:
            top[key] = value
    for section, inner in sections.items():
        current = getattr(config, section)
        config = replace(config, **{section: replace(current, **inner)})
    if top:
        config = replace(config, **top)
    return config


# -- dataset handling -----------------------------------------------------------


def dataset_dir(out_dir: str | Path) -> Path:
    return Path(out_dir) / "dataset"


def ensure_dataset(config: ExperimentConfig, out_dir: str | Path) -> ExternalDataset:
    manifest = dataset_dir(out_dir) / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"dataset manifest not found at {manifest}; run 'generate' first")
    return load_external_split(manifest)


@dataclass
class DatasetArrays:
    train_images: np.ndarray
    train_labels: list[CompositionLabel]
    test_images: np.ndarray
    test_labels: list[CompositionLabel]
    seen_pairs: frozenset[int]
    num_attributes: int
    num_objects: int


def load_arrays(dataset: ExternalDataset) -> DatasetArrays:
    def stack(entries):
        images = np.stack([dataset.load_image(ref) for ref, _ in entries])
        labels = [label for _, label in entries]
        return images, labels

    train_images, train_labels = stack(dataset.split.train)
    test_images, test_labels = stack(dataset.split.test)
    return DatasetArrays(
        train_images=train_images,
        train_labels=train_labels,
        test_images=test_images,
        test_labels=test_labels,
        seen_pairs=dataset.split.seen_pairs,
        num_attributes=dataset.vocab.num_attributes,
        num_objects=dataset.vocab.num_objects,
    )


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    breakdowns: list[losses.LossBreakdown]


def _evaluate_arrays(params, model_config, data: DatasetArrays, fusion, num_biases,
                     batch_size=128):
    return evaluation.evaluate_model(
        params, model_config, data.test_images, data.test_labels, data.seen_pairs,
        fusion, num_biases=num_biases, batch_size=batch_size)


def run_training(config: ExperimentConfig, data: DatasetArrays,
                 run_dir: str | Path) -> TrainResult:
    """Train a model on preloaded arrays, logging and checkpointing to run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model_config = config.model.resolved(data.num_attributes, data.num_objects)
    model_config = replace(model_config, seed=config.seed)
    params = init_params(model_config)
    state = AdamState()
    rng = np.random.default_rng(config.seed)

    log_path = run_dir / "train.log"
    final_path = run_dir / "final.ckpt"
    best_path = run_dir / "best.ckpt"
    breakdowns: list[losses.LossBreakdown] = []
    best_hm = -1.0
    n = data.train_images.shape[0]
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("# dranet training log\n")
        log.write(f"# started: {datetime.datetime.now().isoformat()}\n")
        log.write(f"# learning_rate: {config.learning_rate}\n")
        log.write("# desk-scale defaults; epoch and batch budgets are local choices\n")
        log.write(f"# config: {json.dumps(config_to_dict(config), sort_keys=True)}\n")
        log.write("# columns: step\tL_a\tL_o\tL_r\tL_d\tL_total\n")
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = (Tensor(data.train_images[idx]),
                         [data.train_labels[i] for i in idx])
                params, state, breakdown = train_step(
                    params, batch, config.weights, state, model_config,
                    learning_rate=config.learning_rate)
                breakdowns.append(breakdown)
                log.write(f"{step}\t{breakdown.attr:.6f}\t{breakdown.obj:.6f}\t"
                          f"{breakdown.reverse:.6f}\t{breakdown.distill:.6f}\t"
                          f"{breakdown.total:.6f}\n")
                step += 1
            if config.eval_every and (epoch + 1) % config.eval_every == 0:
                report, _ = _evaluate_arrays(params, model_config, data,
                                             config.fusion, config.num_biases)
                log.write(f"# eval epoch={epoch + 1} S={report.S:.4f} U={report.U:.4f} "
                          f"HM={report.HM:.4f} AUC={report.AUC:.4f}\n")
                if report.HM > best_hm:
                    best_hm = report.HM
                    save_checkpoint(best_path, params, model_config)
    save_checkpoint(final_path, params, model_config)
    if best_hm < 0:
        save_checkpoint(best_path, params, model_config)
    return TrainResult(params=params, model_config=model_config,
                       final_checkpoint=final_path, best_checkpoint=best_path,
                       log_path=log_path, breakdowns=breakdowns)


def write_report(report: MetricsReport, fusion: FusionWeights, mode: str,
                 num_biases: int, path: Path) -> None:
    doc = report.to_dict()
    doc["num_biases"] = num_biases
    doc["fusion"] = {"eta1": fusion.eta1, "eta2": fusion.eta2, "mode": mode}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_curve(curve: evaluation.EvaluationCurve, path: Path) -> None:
    lines = ["bias,seen_acc,unseen_acc"]
    for p in curve.points:
        lines.append(f"{p.bias},{p.seen_acc},{p.unseen_acc}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- ablation ladder --------------------------------------------------------------

_ANET_FLAGS = {
    "model.use_reverse": False,
    "model.distill_mode": "off",
    "fusion.eta1": 0.0,
    "fusion.eta2": 0.0,
}

# Overrides are relative to the full default configuration; "dranet" is the
# identity row.
ABLATION_LADDER: dict[str, dict] = {
    "base": {"model.attr_branch": "none", "model.obj_branch": "none", **_ANET_FLAGS},
    "anet": dict(_ANET_FLAGS),
    "ranet": {"model.distill_mode": "off"},
    "dranet": {},
    "both_local": {"model.attr_branch": "local", **_ANET_FLAGS},
    "both_nonlocal": {"model.obj_branch": "nonlocal", **_ANET_FLAGS},
    "swap_a": {"model.attr_branch": "local", "model.obj_branch": "nonlocal", **_ANET_FLAGS},
    "anet_with_lr": {"model.distill_mode": "off", "fusion.eta1": 0.0, "fusion.eta2": 0.0},
    "fusion_product_sum": {"model.distill_mode": "off", "model.fusion_mode": "product_sum"},
    "distill_n_oriented": {"model.distill_mode": "n_oriented"},
    "distill_l_oriented": {"model.distill_mode": "l_oriented"},
}


def run_variant(config: ExperimentConfig, variant: str, data: DatasetArrays,
                run_dir: str | Path) -> MetricsReport:
    """Train and evaluate one ladder variant under the shared budget."""
    if variant not in ABLATION_LADDER:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    variant_config = apply_overrides(config, ABLATION_LADDER[variant])
    result = run_training(variant_config, data, run_dir)
    report, curve = _evaluate_arrays(result.params, result.model_config, data,
                                     variant_config.fusion, variant_config.num_biases)
    run_dir = Path(run_dir)
    write_report(report, variant_config.fusion, result.model_config.fusion_mode,
                 variant_config.num_biases, run_dir / "report.json")
    write_curve(curve, run_dir / "curve.csv")
    return report


def _variant_worker(args) -> tuple[str, dict]:
    config_dict, variant, manifest_path, run_dir = args
    config = config_from_dict(config_dict)
    data = load_arrays(load_external_split(manifest_path))
    report = run_variant(config, variant, data, run_dir)
    return variant, report.to_dict()


def run_ablation(config: ExperimentConfig, out_dir: str | Path,
                 jobs: int = 1) -> list[tuple[str, MetricsReport]]:
    """Train every ladder variant with identical seed and budget."""
    out_dir = Path(out_dir)
    manifest = dataset_dir(out_dir) / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"dataset manifest not found at {manifest}; run 'generate' first")
    variants = list(ABLATION_LADDER)
    if jobs > 1:
        tasks = [(config_to_dict(config), v, str(manifest), str(out_dir / v))
                 for v in variants]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_variant_worker, tasks))
        rows = [(v, MetricsReport(**results[v])) for v in variants]
    else:
        data = load_arrays(load_external_split(manifest))
        rows = [(v, run_variant(config, v, data, out_dir / v)) for v in variants]
    _write_ablation_csv(rows, out_dir / "ablation.csv")
    return rows


def _write_ablation_csv(rows, path: Path) -> None:
    lines = ["variant,S,U,HM,AUC,attr_top1,obj_top1"]
    for name, r in rows:
        lines.append(f"{name},{r.S},{r.U},{r.HM},{r.AUC},{r.attr_top1},{r.obj_top1}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- hyperparameter sweeps ----------------------------------------------------------


def run_sweep(config: ExperimentConfig, parameter: str, values: list[float],
              out_dir: str | Path, checkpoint: str | Path | None = None
              ) -> list[tuple[float, MetricsReport]]:
    """Sweep one hyperparameter and evaluate each value.

    Loss weights (lambda1/lambda2) require retraining per value. Fusion
    weights (eta1/eta2) are inference-only: the model is trained (or a
    checkpoint loaded) once, logits are collected once, and each value
    only re-fuses them.
    """
    if parameter not in SWEEPABLE:
        raise ConfigError(f"sweep parameter must be one of {SWEEPABLE}, got {parameter!r}")
    out_dir = Path(out_dir)
    data = load_arrays(ensure_dataset(config, out_dir))
    rows: list[tuple[float, MetricsReport]] = []

    if parameter in ("lambda1", "lambda2"):
        for value in values:
            swept = apply_overrides(config, {f"weights.{parameter}": value})
            run_dir = out_dir / f"sweep_{parameter}_{value:g}"
            result = run_training(swept, data, run_dir)
            report, _ = _evaluate_arrays(result.params, result.model_config, data,
                                         swept.fusion, swept.num_biases)
            rows.append((value, report))
    else:
        if checkpoint is not None:
            params, model_config = load_checkpoint(checkpoint)
        else:
            result = run_training(config, data, out_dir / "sweep_base_model")
            params, model_config = result.params, result.model_config
        arrays = evaluation.collect_outputs(params, model_config, data.test_images)
        num_pairs = model_config.num_attributes * model_config.num_objects
        seen_mask = np.zeros(num_pairs, dtype=bool)
        seen_mask[sorted(data.seen_pairs)] = True
        for value in values:
            fusion = replace(config.fusion, **{parameter: value})
            report, _ = evaluation.evaluate_outputs(
                arrays, data.test_labels, seen_mask, fusion, model_config.fusion_mode,
                model_config.num_attributes, model_config.num_objects, config.num_biases)
            rows.append((value, report))

    lines = ["value,S,U,HM,AUC"]
    for value, r in rows:
        lines.append(f"{value},{r.S},{r.U},{r.HM},{r.AUC}")
    (out_dir / f"sweep_{parameter}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


# -- attention visualization ---------------------------------------------------------


def _to_gray_png(array: np.ndarray, path: Path, target_size: int,
                 normalize: bool) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if normalize:
        lo, hi = arr.min(), arr.max()
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    gray = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if target_size % gray.shape[0] == 0 and target_size % gray.shape[1] == 0:
        gray = np.repeat(np.repeat(gray, target_size // gray.shape[0], axis=0),
                         target_size // gray.shape[1], axis=1)
    else:
        gray = np.asarray(Image.fromarray(gray, mode="L")
                          .resize((target_size, target_size), Image.NEAREST))
    Image.fromarray(gray, mode="L").save(path, format="PNG")


def _export(array: np.ndarray, out_dir: Path, stem: str, name: str,
            target_size: int, normalize: bool) -> None:
    np.save(out_dir / f"{stem}_{name}.npy", np.asarray(array, dtype=np.float32))
    _to_gray_png(array, out_dir / f"{stem}_{name}.png", target_size, normalize)


def run_visualize(config: ExperimentConfig, checkpoint: str | Path,
                  image_path: str | Path, out_dir: str | Path, top_k: int = 3) -> list[Path]:
    """Export attention artifacts for one image as grayscale PNG + raw .npy.

    Mask images are written on the raw (0,1) scale so a mask and its
    reverse stay pixelwise complementary; attention rows and feature maps
    are min-max normalized for visibility (raw values live in the .npy).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_path = Path(image_path)
    if not image_path.exists():
        raise DataError(f"image not found: {image_path}")
    params, model_config = load_checkpoint(checkpoint)
    image = synth._png_to_image(image_path)
    size = image.shape[1]
    outputs = model_mod.forward(Tensor(image[None]), params, model_config)

    local_blocks = None
    nonlocal_blocks = None
    for branch, blocks_pair in (("obj", outputs.obj_blocks), ("attr", outputs.attr_blocks)):
        if blocks_pair is None:
            continue
        kind = getattr(params, f"{branch}_branch").kind
        if kind == "local" and local_blocks is None:
            local_blocks = blocks_pair
        if kind == "nonlocal" and nonlocal_blocks is None:
            nonlocal_blocks = blocks_pair

    stem = image_path.stem
    written: list[Path] = []

    def export(array, name, normalize):
        _export(array, out_dir, stem, name, size, normalize)
        written.extend([out_dir / f"{stem}_{name}.npy", out_dir / f"{stem}_{name}.png"])

    feat = outputs.feature_map.data[0]
    height, width = feat.shape[1], feat.shape[2]
    peak_flat = 0
    if local_blocks is not None:
        spatial, channel = local_blocks
        mask = spatial.attention.data[0, 0]
        peak_flat = int(np.argmax(mask))
        export(mask, "local_mask", normalize=False)
        export(1.0 - mask, "local_mask_rev", normalize=False)
        gate = channel.attention.data[0]
        for rank, ch in enumerate(np.argsort(gate)[::-1][:top_k], start=1):
            export(feat[ch], f"channel_local_top{rank}", normalize=True)
    if nonlocal_blocks is not None:
        spatial, channel = nonlocal_blocks
        row = spatial.attention.data[0, peak_flat].reshape(height, width)
        row_rev = spatial.reversed_attention.data[0, peak_flat].reshape(height, width)
        export(row, "nonlocal_row", normalize=True)
        export(row_rev, "nonlocal_row_rev", normalize=True)
        overlay = spatial.output_map.data[0].mean(axis=0).reshape(height, width)
        export(overlay, "nonlocal_overlay", normalize=True)
        received = channel.attention.data[0].mean(axis=0)
        for rank, ch in enumerate(np.argsort(received)[::-1][:top_k], start=1):
            export(feat[ch], f"channel_nonlocal_top{rank}", normalize=True)
    if local_blocks is None and nonlocal_blocks is None:
        raise ConfigError("model has no attention branches to visualize")
    return written
