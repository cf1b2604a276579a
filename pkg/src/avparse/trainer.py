"""Training and evaluation loops wiring data, augmentation, model and metrics."""

from __future__ import annotations

import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentConfig, count_label_distribution, generate_cmrc_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LoadedSplit, VideoRecord, load_split
from .errors import CheckpointError, ConfigError, EvaluationError, TrainingError
from .metrics import MetricReport, SegmentPrediction, aggregate_report, binarize
from .model import (AMF_MODES, AVMambaNet, ModelConfig, compute_loss,
                    embed_pseudo_matrix)
from .tensor import AdamW

META_PREFIX = "meta."
ABLATABLE = ("cmrc", "tsa", "amf", "mfe", "plsim")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    cmrc_multiplier: float = 0.0  # 0 disables augmentation
    min_count: int = 50
    theta_seg: float = 0.5
    theta_vid: float = 0.5
    engine: str = "parallel"
    eval_every: int = 1
    stop_at_type_av: float | None = None  # early exit once validation reaches this

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch size and learning rate must be positive")
        if self.cmrc_multiplier < 0:
            raise ConfigError("cmrc_multiplier must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    report: MetricReport | None
    wall_clock_s: float


@dataclass
class TrainLog:
    parameter_count: int
    entries: list[EpochStats] = field(default_factory=list)

    def write_csv(self, path) -> None:
        import csv

        from .metrics import REPORT_COLUMNS

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", *REPORT_COLUMNS, "wall_clock_s", "n_params"])
            for e in self.entries:
                scores = ([f"{v:.6f}" for v in e.report.as_row()] if e.report
                          else [""] * len(REPORT_COLUMNS))
                writer.writerow([e.epoch, f"{e.loss:.6f}", *scores,
                                 f"{e.wall_clock_s:.3f}", self.parameter_count])


# -- model (de)serialization ------------------------------------------------------


def _config_meta(config: ModelConfig) -> "OrderedDict[str, np.ndarray]":
    meta = OrderedDict()
    fields = [
        ("n_segments", config.n_segments), ("dim", config.dim),
        ("n_classes", config.n_classes), ("d_state", config.d_state),
        ("expand", config.expand), ("d_conv", config.d_conv),
        ("d_audio_in", config.d_audio_in), ("d_visual_in", config.d_visual_in),
        ("text_dim", config.text_dim), ("lambda_audio", config.lambda_audio),
        ("lambda_visual", config.lambda_visual), ("use_tsa", int(config.use_tsa)),
        ("amf_mode", AMF_MODES.index(config.amf_mode)),
        ("use_mfe", int(config.use_mfe)), ("use_plsim", int(config.use_plsim)),
    ]
    for name, value in fields:
        meta[META_PREFIX + name] = np.array([float(value)])
    return meta


def _config_from_meta(meta: dict) -> ModelConfig:
    def num(name, cast=int):
        key = META_PREFIX + name
        if key not in meta:
            raise CheckpointError(f"checkpoint lacks model metadata entry {key!r}")
        return cast(meta[key].reshape(-1)[0])

    return ModelConfig(
        n_segments=num("n_segments"), dim=num("dim"), n_classes=num("n_classes"),
        d_state=num("d_state"), expand=num("expand"), d_conv=num("d_conv"),
        d_audio_in=num("d_audio_in"), d_visual_in=num("d_visual_in"),
        text_dim=num("text_dim"), lambda_audio=num("lambda_audio", float),
        lambda_visual=num("lambda_visual", float), use_tsa=bool(num("use_tsa")),
        amf_mode=AMF_MODES[num("amf_mode")], use_mfe=bool(num("use_mfe")),
        use_plsim=bool(num("use_plsim")),
    )


def save_model(path, net: AVMambaNet) -> None:
    entries = _config_meta(net.config)
    entries.update(net.parameters())
    save_checkpoint(path, entries)


def load_model(path) -> AVMambaNet:
    stored = load_checkpoint(path)
    config = _config_from_meta(stored)
    net = AVMambaNet(config, seed=0)
    params = net.parameters()
    for name in params:
        if name not in stored:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if stored[name].shape != params[name].data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {stored[name].shape}, "
                f"model {params[name].data.shape}")
        params[name].data[...] = stored[name]
    return net


# -- record-level forward ----------------------------------------------------------


class TextCache:
    """Per-record caption embeddings, computed once per training run."""

    def __init__(self, classes, text_dim: int):
        self.classes = list(classes)
        self.text_dim = text_dim
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, record: VideoRecord) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(record.video_id)
        if hit is None:
            hit = (
                embed_pseudo_matrix(record.pseudo_a, "a", self.classes, self.text_dim),
                embed_pseudo_matrix(record.pseudo_v, "v", self.classes, self.text_dim),
            )
            self._cache[record.video_id] = hit
        return hit


def forward_record(net: AVMambaNet, record: VideoRecord, texts: TextCache | None,
                   engine: str = "parallel", return_stages: bool = False):
    text_a = text_v = None
    if net.config.use_plsim and texts is not None:
        text_a, text_v = texts.get(record)
    return net.forward(record.audio, record.visual, text_a, text_v,
                       engine=engine, return_stages=return_stages)


def _first_nonfinite(net, record, texts, engine) -> str:
    outputs, stages = forward_record(net, record, texts, engine, return_stages=True)
    ordered = [
        ("tsa_out_a", stages.tsa_out_a), ("tsa_out_v", stages.tsa_out_v),
        ("amf_out_a", stages.amf_out_a), ("amf_out_v", stages.amf_out_v),
        ("amf_mix", stages.amf_mix),
        ("mfe_out_a", stages.mfe_out_a), ("mfe_out_v", stages.mfe_out_v),
        ("plsim_out_a", stages.plsim_out_a), ("plsim_out_v", stages.plsim_out_v),
        ("seg_prob_a", outputs.seg_prob_a), ("seg_prob_v", outputs.seg_prob_v),
        ("video_prob", outputs.video_prob),
    ]
    for name, t in ordered:
        if t is not None and not np.all(np.isfinite(t.data)):
            return name
    return "loss"


# -- evaluation ----------------------------------------------------------------------


def predict_records(net: AVMambaNet, records, texts: TextCache | None,
                    theta_seg: float = 0.5, theta_vid: float = 0.5,
                    engine: str = "parallel") -> dict[str, SegmentPrediction]:
    preds = {}
    for record in records:
        outputs = forward_record(net, record, texts, engine)
        preds[record.video_id] = binarize(outputs, theta_seg, theta_vid, record.video_id)
    return preds


def evaluate_records(net: AVMambaNet, records, gt: dict, classes,
                     theta_seg: float = 0.5, theta_vid: float = 0.5,
                     engine: str = "parallel") -> MetricReport:
    if gt is None:
        raise EvaluationError("split has no ground truth to evaluate against")
    texts = TextCache(classes, net.config.text_dim) if net.config.use_plsim else None
    preds = predict_records(net, records, texts, theta_seg, theta_vid, engine)
    return aggregate_report(preds, gt)


def evaluate_oracle(gt: dict) -> MetricReport:
    """Debug path: inject the ground truth as the prediction (must score 1.0)."""
    preds = {vid: SegmentPrediction(vid, ga.copy(), gv.copy())
             for vid, (ga, gv) in gt.items()}
    return aggregate_report(preds, gt)


# -- training --------------------------------------------------------------------------


def augmented_records(records, config: TrainConfig) -> list[VideoRecord]:
    if config.cmrc_multiplier == 0:
        return list(records)
    dist = count_label_distribution(records, config.min_count)
    batch = generate_cmrc_batch(records, dist, AugmentConfig(
        multiplier=config.cmrc_multiplier, min_count=config.min_count, seed=config.seed))
    return list(records) + batch


def train(model_config: ModelConfig, train_records, classes,
          val_records=None, val_gt=None, config: TrainConfig = TrainConfig(),
          checkpoint_path=None, log_path=None) -> tuple[AVMambaNet, TrainLog]:
    """Seeded training run; keeps the checkpoint with the best validation
    segment-level Type@AV (falls back to the final epoch without validation)."""
    records = augmented_records(train_records, config)
    if not records:
        raise ConfigError("no training records")
    net = AVMambaNet(model_config, seed=config.seed)
    params = net.parameters()
    optimizer = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    texts = TextCache(classes, model_config.text_dim) if model_config.use_plsim else None
    rng = np.random.default_rng(config.seed)
    log = TrainLog(parameter_count=net.parameter_count())
    best_score = -np.inf
    best_state: OrderedDict | None = None
    has_val = val_records is not None and val_gt is not None

    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(records))
        running = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            batch_loss = None
            for idx in batch:
                record = records[int(idx)]
                outputs = forward_record(net, record, texts, config.engine)
                loss = compute_loss(
                    outputs, record.video_label, record.pseudo_a, record.pseudo_v,
                    record.null_a, record.null_v,
                    model_config.lambda_audio, model_config.lambda_visual)
                if not np.isfinite(loss.data):
                    culprit = _first_nonfinite(net, record, texts, config.engine)
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, video {record.video_id}; "
                        f"first non-finite tensor: {culprit}")
                batch_loss = loss if batch_loss is None else batch_loss + loss
            batch_loss = batch_loss * (1.0 / len(batch))
            batch_loss.backward(params=params.values())
            optimizer.step()
            optimizer.zero_grad()
            running += batch_loss.item() * len(batch)
        epoch_loss = running / len(records)

        report = None
        if has_val and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
            report = evaluate_records(net, val_records, val_gt, classes,
                                      config.theta_seg, config.theta_vid, config.engine)
            if report.seg_type_at_av > best_score:
                best_score = report.seg_type_at_av
                best_state = OrderedDict(
                    (name, p.data.copy()) for name, p in params.items())
        log.entries.append(EpochStats(epoch, epoch_loss, report,
                                      time.perf_counter() - started))
        if (config.stop_at_type_av is not None and report is not None
                and report.seg_type_at_av >= config.stop_at_type_av):
            break

    if best_state is not None:
        for name, values in best_state.items():
            params[name].data[...] = values
    if checkpoint_path is not None:
        save_model(checkpoint_path, net)
    if log_path is not None:
        log.write_csv(log_path)
    return net, log


# -- directory-level entry points ---------------------------------------------------------


def train_on_dir(data_dir, out_dir, model_config: ModelConfig | None = None,
                 config: TrainConfig = TrainConfig()) -> tuple[AVMambaNet, TrainLog, str]:
    train_split = load_split(data_dir, "train")
    model_config = _config_for_split(train_split, model_config)
    val_records = val_gt = None
    try:
        val_split = load_split(data_dir, "val")
        val_records, val_gt = val_split.records, val_split.gt
    except Exception:
        pass  # validation split is optional
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, "checkpoint.mugc")
    net, log = train(model_config, train_split.records, train_split.classes,
                     val_records, val_gt, config,
                     checkpoint_path=checkpoint_path,
                     log_path=os.path.join(out_dir, "train_log.csv"))
    return net, log, checkpoint_path


def _config_for_split(split: LoadedSplit, model_config: ModelConfig | None) -> ModelConfig:
    derived = dict(
        n_segments=split.n_segments,
        n_classes=len(split.classes),
        d_audio_in=split.records[0].audio.shape[1],
        d_visual_in=split.records[0].visual.shape[1],
    )
    if model_config is None:
        return ModelConfig(**derived)
    return replace(model_config, **derived)


def evaluate_checkpoint(checkpoint_path, data_dir, split: str = "val",
                        theta_seg: float = 0.5, theta_vid: float = 0.5,
                        engine: str = "parallel"):
    """Load a checkpoint, score one split, and return (report, predictions)."""
    net = load_model(checkpoint_path)
    loaded = load_split(data_dir, split)
    if loaded.gt is None:
        raise EvaluationError(f"split {split!r} has no ground-truth file")
    texts = TextCache(loaded.classes, net.config.text_dim) if net.config.use_plsim else None
    preds = predict_records(net, loaded.records, texts, theta_seg, theta_vid, engine)
    report = aggregate_report(preds, loaded.gt)
    return report, preds, loaded


def ablate(component: str, model_config: ModelConfig, train_records, classes,
           val_records, val_gt, config: TrainConfig) -> tuple[AVMambaNet, MetricReport]:
    """Train and evaluate a variant with one component disabled.

    cmrc -> multiplier 0; tsa/mfe/plsim -> structurally removed; amf ->
    private per-modality scans with no sharing and no mixed feature.
    """
    key = component.lower()
    if key not in ABLATABLE:
        raise ConfigError(f"unknown component {component!r}; choose from {ABLATABLE}")
    if key == "cmrc":
        train_cfg = replace(config, cmrc_multiplier=0.0)
        net_cfg = model_config
    else:
        train_cfg = config
        net_cfg = model_config.ablated(key)
    net, _ = train(net_cfg, train_records, classes, val_records, val_gt, train_cfg)
    report = evaluate_records(net, val_records, val_gt, classes,
                              config.theta_seg, config.theta_vid, config.engine)
    return net, report
