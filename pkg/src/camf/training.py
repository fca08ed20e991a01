"""Initialization, fold construction, the training loop and 5-fold cross-validation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from camf import metrics
from camf.data import zscore_fc
from camf.errors import ConfigError, DataError, NumericError
from camf.fusion import ATTENTION_MODES, FUSION_MODES, CAMFModel, ModelConfig, ce_loss, predict, stack_inputs

log = logging.getLogger(__name__)

N_FOLDS = 5
VAL_FRACTION = 1 / 8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 32
    early_stop_patience: int = 10
    seed: int = 0
    fusion_mode: str = "camf"
    eval_batch_size: int | None = None  # None: whole split is one attention batch
    fc_zscore: bool = False

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; choose from {FUSION_MODES}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be nonnegative")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs and early_stop_patience must be >= 1")
        min_batch = 2 if self.fusion_mode in ATTENTION_MODES else 1
        if self.batch_size < min_batch:
            raise ConfigError(f"batch_size must be >= {min_batch} for mode {self.fusion_mode!r}")
        if self.eval_batch_size is not None and self.eval_batch_size < min_batch:
            raise ConfigError(f"eval_batch_size must be >= {min_batch}")


def config_hash(*parts) -> str:
    blob = json.dumps([p if isinstance(p, dict) else asdict(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# initialization


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Kaiming-normal (fan-in, ReLU gain) weights, zero biases, zero fusion logits."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("W_q", "W_k", "W_v"):
                # features multiply from the left (f @ W), so fan-in is rows
                p.normal_(0.0, math.sqrt(2.0 / p.shape[0]), generator=gen)
            elif leaf == "weight" and p.dim() >= 2:
                nn.init.kaiming_normal_(p, mode="fan_in", nonlinearity="relu", generator=gen)
            elif leaf == "weight":
                p.fill_(1.0)  # normalization scale
            else:
                p.zero_()
    return model


def build_model(model_config: ModelConfig, seed: int, dtype=torch.float32) -> CAMFModel:
    model = CAMFModel(model_config).to(dtype)
    return init_params(model, seed)


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


def make_folds(subject_ids, seed: int, n_folds: int = N_FOLDS) -> list[FoldSplit]:
    """Seeded, unstratified k-fold split; 1/8 of each non-test pool becomes validation."""
    ids = [str(s) for s in subject_ids]
    if len(set(ids)) != len(ids):
        raise DataError("subject ids must be unique")
    if len(ids) < 2 * n_folds:
        raise DataError(f"need at least {2 * n_folds} subjects for {n_folds}-fold CV, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    chunks = np.array_split(np.arange(len(ids)), n_folds)
    folds = []
    for k, chunk in enumerate(chunks):
        test = [shuffled[i] for i in chunk]
        rest = [shuffled[i] for j, c in enumerate(chunks) if j != k for i in c]
        n_val = max(1, int(round(len(rest) * VAL_FRACTION)))
        folds.append(FoldSplit(k, rest[n_val:], rest[:n_val], test))
    return folds


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    alphas: list[float] | None


@dataclass
class TrainResult:
    state_dict: dict
    best_epoch: int
    log: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False


def _fc_transform(config: TrainConfig):
    return zscore_fc if config.fc_zscore else None


def _optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    return torch.optim.Adam(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.learning_rate,
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int):
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a trailing batch too small for subject attention joins its predecessor
    if len(batches) > 1 and len(batches[-1]) < min_size:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


@torch.no_grad()
def evaluate(model: CAMFModel, samples, batch_size: int | None = None, fc_transform=None) -> dict:
    """Loss, predictions and fusion summary with the whole split (or fixed chunks) as attention batches."""
    model.eval()
    dtype = next(model.parameters()).dtype
    size = len(samples) if batch_size is None else batch_size
    logits, labels, state = [], [], None
    for i in range(0, len(samples), size):
        fc, vol, y = stack_inputs(samples[i : i + size], dtype, fc_transform)
        out, state = model(fc if model.uses_fmri else None, vol if model.uses_smri else None)
        logits.append(out)
        labels.append(y)
    logits, labels = torch.cat(logits), torch.cat(labels)
    preds = predict(logits)
    return {
        "loss": float(ce_loss(logits, labels)),
        "predictions": preds.tolist(),
        "labels": labels.tolist(),
        "logits": logits.tolist(),
        "acc": float((preds == labels).double().mean()),
        "state": state.summary() if state is not None else {},
    }


def train_one(
    config: TrainConfig,
    fold: FoldSplit,
    dataset,
    model_config: ModelConfig,
    dtype=torch.float32,
) -> tuple[TrainResult, CAMFModel]:
    """Train on ``fold.train_ids``; keep the parameters with the lowest validation loss.

    With an empty validation list the training loss drives checkpoint selection
    and early stopping is off.
    """
    config.validate()
    model_config = copy.deepcopy(model_config)
    model_config.fusion_mode = config.fusion_mode
    by_id = {s.subject_id: s for s in dataset}
    try:
        train = [by_id[i] for i in fold.train_ids]
        val = [by_id[i] for i in fold.val_ids]
    except KeyError as exc:
        raise DataError(f"fold references unknown subject {exc}") from exc
    if not train:
        raise DataError("empty training split")

    torch.manual_seed(config.seed)
    model = build_model(model_config, config.seed + 1000 * fold.fold_index, dtype)
    opt = _optimizer(model, config)
    rng = np.random.default_rng([config.seed, fold.fold_index])
    tf = _fc_transform(config)
    fc_all, vol_all, y_all = stack_inputs(train, dtype, tf)
    min_size = 2 if config.fusion_mode in ATTENTION_MODES else 1

    best_loss, best_epoch, best_state = math.inf, 0, copy.deepcopy(model.state_dict())
    since_best = 0
    result = TrainResult(best_state, 0)
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        total, correct = 0.0, 0
        for idx in _batches(len(train), config.batch_size, rng, min_size):
            idx_t = torch.as_tensor(idx)
            logits, _ = model(
                fc_all[idx_t] if model.uses_fmri else None,
                vol_all[idx_t] if model.uses_smri else None,
            )
            loss = ce_loss(logits, y_all[idx_t])
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch} (fold {fold.fold_index}); "
                    f"try a smaller learning rate"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((predict(logits.detach()) == y_all[idx_t]).sum())

        train_loss = total / len(train)
        rec = EpochRecord(epoch, train_loss, correct / len(train), None, None, None)
        if model.fusion_logits is not None:
            rec.alphas = [float(a) for a in torch.softmax(model.fusion_logits.detach(), 0)]
        if val:
            ev = evaluate(model, val, config.eval_batch_size, tf)
            rec.val_loss, rec.val_acc = ev["loss"], ev["acc"]
            if not math.isfinite(ev["loss"]):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
        result.log.append(rec)
        log.debug("fold %d epoch %d: %s", fold.fold_index, epoch, rec)

        monitor = rec.val_loss if val else train_loss
        if monitor < best_loss:
            best_loss, best_epoch, since_best = monitor, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if val and since_best >= config.early_stop_patience:
                result.stopped_early = True
                break

    model.load_state_dict(best_state)
    result.state_dict, result.best_epoch = best_state, best_epoch
    return result, model


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: CAMFModel, meta: dict) -> Path:
    """Parameters to ``<path>`` (torch tensor archive) plus ``<path>.json`` metadata."""
    path = Path(path)
    torch.save({k: v.detach().cpu() for k, v in model.state_dict().items()}, path)
    doc = dict(meta, model_config=model.config.to_dict())
    path.with_name(path.name + ".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[CAMFModel, dict]:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    if not path.is_file() or not side.is_file():
        raise DataError(f"checkpoint {path} or its metadata is missing")
    meta = json.loads(side.read_text())
    model = CAMFModel(ModelConfig.from_dict(meta["model_config"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"checkpoint parameter {name} is not finite")
    model.eval()
    return model, meta


# --------------------------------------------------------------------------
# cross-validation


def format_mean_std(values) -> str:
    arr = np.asarray(values, dtype=np.float64)
    return f"{arr.mean():.4f}±{arr.std():.4f}"


def aggregate(fold_metrics: list[dict]) -> dict:
    out = {}
    for key in ("f1", "acc", "mcc"):
        vals = [m[key] for m in fold_metrics]
        out[key] = {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals)),
            "formatted": format_mean_std(vals),
        }
    return out


def cross_validate(
    config: TrainConfig,
    dataset,
    model_config: ModelConfig,
    checkpoint_dir=None,
    folds: list[FoldSplit] | None = None,
) -> dict:
    """Run the 5-fold protocol and return the report (JSON-serializable)."""
    config.validate()
    folds = folds if folds is not None else make_folds([s.subject_id for s in dataset], config.seed)
    by_id = {s.subject_id: s for s in dataset}
    tf = _fc_transform(config)
    chash = config_hash(config, model_config.to_dict())
    entries = []
    for fold in folds:
        result, model = train_one(config, fold, dataset, model_config)
        test = [by_id[i] for i in fold.test_ids]
        ev = evaluate(model, test, config.eval_batch_size, tf)
        counts = metrics.confusion(ev["predictions"], ev["labels"])
        m = {"f1": metrics.f1(counts), "acc": metrics.accuracy(counts), "mcc": metrics.mcc(counts)}
        entry = {
            "fold": fold.fold_index,
            **m,
            "confusion": asdict(counts),
            "degenerate": metrics.degenerate(counts),
            "best_epoch": result.best_epoch,
            "epochs_run": len(result.log),
            "n_train": len(fold.train_ids),
            "n_val": len(fold.val_ids),
            "n_test": len(fold.test_ids),
            "fusion": ev["state"],
        }
        if checkpoint_dir is not None:
            ckpt = Path(checkpoint_dir) / f"fold{fold.fold_index}.pt"
            save_checkpoint(
                ckpt,
                model,
                {"config_hash": chash, "fold": fold.fold_index, "epoch": result.best_epoch, "metrics": m,
                 "train_config": asdict(config)},
            )
            entry["checkpoint"] = ckpt.name
        entries.append(entry)
        log.info("fold %d: acc=%.4f f1=%.4f mcc=%.4f", fold.fold_index, m["acc"], m["f1"], m["mcc"])
    entries.sort(key=lambda e: e["fold"])
    return {
        "fusion_mode": config.fusion_mode,
        "config_hash": chash,
        "n_subjects": len(dataset),
        "folds": entries,
        "aggregate": aggregate(entries),
        "test_batching": "whole test fold" if config.eval_batch_size is None
        else f"chunks of {config.eval_batch_size}; predictions depend on batch composition",
    }


def ablation_sweep(config: TrainConfig, dataset, model_config: ModelConfig, modes=FUSION_MODES) -> dict:
    """Cross-validate each fusion mode on identical folds; returns reports and a comparison table."""
    folds = make_folds([s.subject_id for s in dataset], config.seed)
    reports = {}
    for mode in modes:
        cfg = copy.deepcopy(config)
        cfg.fusion_mode = mode
        reports[mode] = cross_validate(cfg, dataset, model_config, folds=folds)
    table = [
        {"fusion_mode": mode, **{k: r["aggregate"][k]["formatted"] for k in ("f1", "acc", "mcc")}}
        for mode, r in reports.items()
    ]
    return {"reports": reports, "table": table}
