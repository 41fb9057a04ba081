"""Training loop, evaluation, KAN-vs-MLP ablation, and checkpointing."""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSpec, load_feature_map, load_sample_arrays
from .decoder import PROMPT_KINDS, SegmentationOutput, predict_semantic
from .encoders import BACKBONE_NAMES
from .losses import LossWeights, MetricReport, batch_hybrid_loss, dsc_metric, iou_metric
from .model import ModelConfig, SegmentationModel, freeze_encoders

CHECKPOINT_FORMAT = "kanprompt-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_HEADER = "epoch,train_loss,val_mean_iou,val_mean_dsc"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss leaves the finite range."""


class CheckpointError(Exception):
    """Raised for unreadable, corrupt, or incompatible checkpoints."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-2
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    prompt_kind: str = "kan"
    loss: LossWeights = field(default_factory=LossWeights)
    freeze: tuple = ()
    use_file_features: tuple = ()

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.prompt_kind not in PROMPT_KINDS:
            raise ValueError(f"prompt kind must be one of {PROMPT_KINDS}, got {self.prompt_kind!r}")
        for name in (*self.freeze, *self.use_file_features):
            if name not in BACKBONE_NAMES:
                raise ValueError(f"unknown encoder {name!r}; expected one of {BACKBONE_NAMES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        d["freeze"] = list(self.freeze)
        d["use_file_features"] = list(self.use_file_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossWeights(**d.get("loss", {}))
        d["freeze"] = tuple(d.get("freeze", ()))
        d["use_file_features"] = tuple(d.get("use_file_features", ()))
        return cls(**d)


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_loss: float
    val_mean_iou: float
    val_mean_dsc: float


@dataclass
class Checkpoint:
    state: dict
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    history: list

    def build_model(self) -> SegmentationModel:
        model = SegmentationModel(self.model_config, seed=self.train_config.seed)
        expected = model.state_dict()
        for name, tensor in self.state.items():
            if name not in expected:
                raise CheckpointError(f"checkpoint tensor {name!r} has no place in the model")
            if tuple(expected[name].shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"tensor {name!r}: checkpoint shape {tuple(tensor.shape)} does not match "
                    f"model shape {tuple(expected[name].shape)}"
                )
        missing = sorted(set(expected) - set(self.state))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensor {missing[0]!r}")
        model.load_state_dict(self.state)
        return model


def _stack_features(spec: DatasetSpec, names, encoder: str) -> torch.Tensor:
    return torch.stack([load_feature_map(spec, encoder, n) for n in names])


def _report_from_predictions(pred_labels, gt_labels, k: int, pooled: bool = False) -> MetricReport:
    """Aggregate per-class DSC/IOU; default is the mean of per-sample metrics."""
    if pooled:
        inter = np.zeros(k)
        a_sum = np.zeros(k)
        b_sum = np.zeros(k)
        union = np.zeros(k)
        for pred, gt in zip(pred_labels, gt_labels):
            for c in range(k):
                pb = pred == c
                gb = gt == c
                inter[c] += np.logical_and(pb, gb).sum()
                a_sum[c] += pb.sum()
                b_sum[c] += gb.sum()
                union[c] += np.logical_or(pb, gb).sum()
        dsc = np.where(a_sum + b_sum > 0, 2 * inter / np.maximum(a_sum + b_sum, 1), 1.0)
        iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
        return MetricReport(list(dsc), list(iou), sample_count=len(pred_labels))
    dscs = np.zeros((len(pred_labels), k))
    ious = np.zeros((len(pred_labels), k))
    for i, (pred, gt) in enumerate(zip(pred_labels, gt_labels)):
        for c in range(k):
            dscs[i, c] = dsc_metric(pred == c, gt == c)
            ious[i, c] = iou_metric(pred == c, gt == c)
    return MetricReport(list(dscs.mean(axis=0)), list(ious.mean(axis=0)), sample_count=len(pred_labels))


def _model_predictions(model, images, batch_size, precomputed=None):
    preds = []
    model.eval()
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start : start + batch_size]
            pre = None
            if precomputed:
                pre = {name: maps[start : start + batch_size] for name, maps in precomputed.items()}
            logits, ious = model(batch, pre)
            for j in range(logits.shape[0]):
                out = SegmentationOutput(mask_logits=logits[j], ious=ious[j])
                preds.append(predict_semantic(out))
    return preds


def train(
    model: SegmentationModel,
    train_spec: DatasetSpec,
    val_spec: DatasetSpec,
    cfg: TrainConfig = TrainConfig(),
) -> Checkpoint:
    """Run the epoch loop and return the checkpoint with the best validation IOU.

    Fully deterministic given (model seed, cfg.seed, data): fixed shuffles,
    fixed batch boundaries, order-fixed reductions.
    """
    images, labels = load_sample_arrays(train_spec)
    val_images, val_labels = load_sample_arrays(val_spec)
    train_features = {
        name: _stack_features(train_spec, [s.name for s in train_spec.samples], name)
        for name in cfg.use_file_features
    }
    val_features = {
        name: _stack_features(val_spec, [s.name for s in val_spec.samples], name)
        for name in cfg.use_file_features
    }
    if cfg.freeze:
        freeze_encoders(model, cfg.freeze)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = images.shape[0]
    history = []
    best_state = None
    best_iou = -1.0
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            pre = {name: maps[idx] for name, maps in train_features.items()} or None
            logits, ious = model(images[idx], pre)
            loss = batch_hybrid_loss(logits, ious, labels[idx], cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite ({float(loss)}) at epoch {epoch}, "
                    f"batch starting at {start}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        preds = _model_predictions(model, val_images, cfg.batch_size, val_features or None)
        report = _report_from_predictions(preds, [l.numpy() for l in val_labels], train_spec.k)
        row = HistoryRow(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            val_mean_iou=report.mean_iou,
            val_mean_dsc=report.mean_dsc,
        )
        history.append(row)
        if row.val_mean_iou > best_iou:
            best_iou = row.val_mean_iou
            best_epoch = epoch
            best_state = {name: t.detach().clone() for name, t in model.state_dict().items()}
    return Checkpoint(
        state=best_state,
        model_config=model.cfg,
        train_config=cfg,
        epoch=best_epoch,
        history=history,
    )


def evaluate(model_or_checkpoint, spec: DatasetSpec, pooled: bool = False, batch_size: int = 4) -> MetricReport:
    """Per-class and mean DSC/IOU of argmax predictions over a dataset.

    Accepts a SegmentationModel, a Checkpoint, or any callable mapping a
    [3, H, W] image tensor to a SegmentationOutput.
    """
    source = model_or_checkpoint
    if isinstance(source, Checkpoint):
        if source.model_config.k != spec.k:
            raise ValueError(f"checkpoint has k={source.model_config.k} but dataset has k={spec.k}")
        source = source.build_model()
    images, labels = load_sample_arrays(spec)
    gt = [l.numpy() for l in labels]
    if isinstance(source, SegmentationModel):
        if source.cfg.k != spec.k:
            raise ValueError(f"model has k={source.cfg.k} but dataset has k={spec.k}")
        preds = _model_predictions(source, images, batch_size)
    else:
        preds = [predict_semantic(source(images[i])) for i in range(images.shape[0])]
    return _report_from_predictions(preds, gt, spec.k, pooled=pooled)


@dataclass(frozen=True)
class AblationRow:
    prompt_kind: str
    dataset: str
    mean_dsc: float
    mean_iou: float


def ablate(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_spec: DatasetSpec,
    val_spec: DatasetSpec,
    eval_spec: DatasetSpec | None = None,
):
    """Train twin models differing only in the prompt module kind and compare.

    Component-scoped seeding means both runs start from identical encoders,
    alignment, and decoder parameters.
    """
    eval_spec = eval_spec if eval_spec is not None else val_spec
    rows = []
    for kind in ("mlp", "kan"):
        mcfg = replace(model_cfg, prompt_kind=kind)
        tcfg = replace(train_cfg, prompt_kind=kind)
        model = SegmentationModel(mcfg, seed=tcfg.seed)
        ckpt = train(model, train_spec, val_spec, tcfg)
        report = evaluate(ckpt, eval_spec)
        rows.append(
            AblationRow(
                prompt_kind=kind,
                dataset=eval_spec.root.name,
                mean_dsc=report.mean_dsc,
                mean_iou=report.mean_iou,
            )
        )
    return rows


def write_ablation_csv(rows, path) -> None:
    lines = ["prompt_kind,dataset,mean_dsc,mean_iou"]
    for row in rows:
        lines.append(f"{row.prompt_kind},{row.dataset},{row.mean_dsc!r},{row.mean_iou!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_history_csv(history, path) -> None:
    lines = [HISTORY_HEADER]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss!r},{row.val_mean_iou!r},{row.val_mean_dsc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_history_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise ValueError(f"unexpected history header in {path}")
    rows = []
    for line in lines[1:]:
        epoch, loss, iou, dsc = line.split(",")
        rows.append(HistoryRow(int(epoch), float(loss), float(iou), float(dsc)))
    return rows


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint directory: manifest.json plus one raw blob per tensor."""
    path = Path(path)
    tensor_dir = path / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, tensor in ckpt.state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (tensor_dir / f"{name}.bin").write_bytes(arr.tobytes(order="C"))
        tensors[name] = {"shape": list(arr.shape), "dtype": "float32"}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "k": ckpt.model_config.k,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "history": [asdict(row) for row in ckpt.history],
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} directory")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('version')!r}; "
            f"expected {CHECKPOINT_VERSION}"
        )
    state = {}
    for name, info in manifest["tensors"].items():
        blob_path = path / "tensors" / f"{name}.bin"
        if not blob_path.is_file():
            raise CheckpointError(f"checkpoint blob missing for tensor {name!r}")
        raw = blob_path.read_bytes()
        expected = int(np.prod(info["shape"])) * 4 if info["shape"] else 4
        if len(raw) != expected:
            raise CheckpointError(
                f"corrupt checkpoint: tensor {name!r} holds {len(raw)} bytes, expected {expected}"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).copy()
        state[name] = torch.from_numpy(arr)
    history = [HistoryRow(**row) for row in manifest.get("history", [])]
    return Checkpoint(
        state=state,
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        train_config=TrainConfig.from_dict(manifest["train_config"]),
        epoch=manifest["epoch"],
        history=history,
    )
