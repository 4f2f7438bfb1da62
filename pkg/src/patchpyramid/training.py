"""Training loop, evaluation and the ablation-variant runner.

Training follows a fixed protocol: minibatch Adam on the MSE+MAE loss in
normalized space, learning rate lr0 * 0.5^epoch, and early stopping once
validation loss fails to strictly improve for ``patience`` consecutive
epochs; the best-validation parameters are restored at the end.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .data import Dataset, SplitSpec, WindowSet, sliding_windows
from .errors import DataError, DivergenceError
from .metrics import MetricsReport, mase, naive2_forecast, owa, smape
from .model import Model, ModelConfig, forecast_loss
from .optim import Adam


@dataclass
class TrainSpec:
    epochs: int = 10
    batch_size: int = 16
    lr0: float = 1e-4
    lr_decay: float = 0.5
    patience: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr0 <= 0 or self.patience < 1:
            raise DataError(f"invalid training spec: {self}")
        if self.epochs and self.patience > self.epochs:
            raise DataError(f"patience {self.patience} exceeds epochs {self.epochs}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


def _normalized_batch(batch):
    inputs, targets, mean, std = batch
    return (inputs - mean) / std, (targets - mean) / std


def _split_loss(model: Model, windows: WindowSet, batch_size: int = 256) -> float:
    """MSE+MAE loss over a split in normalized space, evaluation mode."""
    se = ae = 0.0
    count = 0
    with T.no_grad():
        for batch in windows.batches(batch_size):
            xb, yb = _normalized_batch(batch)
            pred = model.forward(xb, training=False).data
            d = pred - yb
            se += float((d * d).sum())
            ae += float(np.abs(d).sum())
            count += d.size
    return se / count + ae / count


def train(model: Model, train_windows: WindowSet, val_windows: WindowSet,
          spec: TrainSpec) -> tuple[Model, list[EpochRecord]]:
    """Train in place; returns the model at its best validation epoch."""
    spec.validate()
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise DataError("training needs non-empty train and validation streams")
    rng = np.random.default_rng(spec.seed)
    opt = Adam(model.parameters(), lr=spec.lr0)
    best_params = model.snapshot()
    best_val = np.inf
    bad_epochs = 0
    history: list[EpochRecord] = []
    n = len(train_windows)
    for epoch in range(spec.epochs):
        opt.lr = spec.lr0 * spec.lr_decay ** epoch
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for batch in train_windows.batches(spec.batch_size, order):
            xb, yb = _normalized_batch(batch)
            pred = model.forward(xb, training=True, rng=rng)
            loss = forecast_loss(pred, yb)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += value
            batches += 1
        val_loss = _split_loss(model, val_windows)
        history.append(EpochRecord(epoch=epoch, lr=opt.lr,
                                   train_loss=total / batches, val_loss=val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= spec.patience:
                break
    model.restore(best_params)
    return model, history


def evaluate(model: Model, test_windows: WindowSet, m: int | None = None,
             batch_size: int = 256, label: str = "") -> MetricsReport:
    """Denormalized test metrics; MASE/OWA only when periodicity is given."""
    if len(test_windows) == 0:
        raise DataError("evaluation needs a non-empty test stream")
    se_sum = ae_sum = 0.0
    n_elems = 0
    smape_sum = 0.0
    mase_sum = 0.0
    naive_smape_sum = 0.0
    naive_mase_sum = 0.0
    n_windows = 0
    with T.no_grad():
        for batch in test_windows.batches(batch_size):
            inputs, targets, mean, std = batch
            xb = (inputs - mean) / std
            pred = model.forward(xb, training=False).data
            pred = pred * std + mean
            d = pred - targets
            se_sum += float((d * d).sum())
            ae_sum += float(np.abs(d).sum())
            n_elems += d.size
            for i in range(pred.shape[0]):
                smape_sum += smape(pred[i], targets[i])
                if m is not None:
                    full = np.concatenate([inputs[i], targets[i]])
                    naive = naive2_forecast(inputs[i], m, test_windows.pred_len)
                    mase_sum += mase(pred[i], full, m)
                    naive_smape_sum += smape(naive, targets[i])
                    naive_mase_sum += mase(naive, full, m)
            n_windows += pred.shape[0]
    report = MetricsReport(
        mse=se_sum / n_elems,
        mae=ae_sum / n_elems,
        smape=smape_sum / n_windows,
        mase=None,
        owa=None,
        n_windows=n_windows,
        label=label,
    )
    if m is not None:
        report.mase = mase_sum / n_windows
        naive_report = MetricsReport(
            mse=0.0, mae=0.0, smape=naive_smape_sum / n_windows,
            mase=naive_mase_sum / n_windows, owa=None, n_windows=n_windows,
            label="naive2",
        )
        report.owa = owa(report, naive_report)
    return report


class AblationVariant(Enum):
    FULL = "full"
    POINT_WISE_ONLY = "point_wise_only"
    PATCH_WISE_ONLY = "patch_wise_only"
    BOTTOM_UP_DECODER = "bottom_up_decoder"
    LINEAR_DECODER = "linear_decoder"
    NO_DM = "no_dm"


def variant_config(base: ModelConfig, variant: AblationVariant) -> ModelConfig:
    """Rewire a base config for one ablation variant."""
    cfg = ModelConfig(**base.to_dict())
    if variant is AblationVariant.POINT_WISE_ONLY:
        cfg.granularity = "point"
        cfg.patch_attention = False
        cfg.element_attention = True
    elif variant is AblationVariant.PATCH_WISE_ONLY:
        cfg.element_attention = False
    elif variant is AblationVariant.BOTTOM_UP_DECODER:
        cfg.decoder = "bottom_up"
    elif variant is AblationVariant.LINEAR_DECODER:
        cfg.decoder = "linear"
    elif variant is AblationVariant.NO_DM:
        cfg.diagonal_mask = False
    cfg.validate()
    return cfg


def run_ablation(variant: AblationVariant, dataset: Dataset, config: ModelConfig,
                 spec: TrainSpec, n_seeds: int = 1,
                 split: SplitSpec | None = None) -> tuple[MetricsReport, list[MetricsReport]]:
    """Train and evaluate one variant over n seeds; returns (mean, per-seed)."""
    cfg = variant_config(config, variant)
    splits = sliding_windows(dataset, cfg.input_len, cfg.pred_len, split)
    reports: list[MetricsReport] = []
    for s in range(n_seeds):
        seed = spec.seed + s
        run_spec = TrainSpec(epochs=spec.epochs, batch_size=spec.batch_size,
                             lr0=spec.lr0, lr_decay=spec.lr_decay,
                             patience=spec.patience, seed=seed)
        model = Model(cfg, seed=seed)
        model, _ = train(model, splits["train"], splits["val"], run_spec)
        reports.append(evaluate(model, splits["test"], m=dataset.periodicity,
                                label=variant.value))
    def _mean(vals):
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else None

    mean_report = MetricsReport(
        mse=_mean([r.mse for r in reports]),
        mae=_mean([r.mae for r in reports]),
        smape=_mean([r.smape for r in reports]),
        mase=_mean([r.mase for r in reports]),
        owa=_mean([r.owa for r in reports]),
        n_windows=reports[0].n_windows,
        label=variant.value,
    )
    return mean_report, reports
