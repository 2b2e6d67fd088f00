"""Minibatch SGD-with-momentum training, prediction and checkpoint evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from respnet.errors import DivergedLoss, EmptyEvaluation, EmptyTrainSet, InvalidConfig, ShapeMismatch
from respnet.metrics import EVAL_FS, EvalReport, downsample_for_eval, evaluate_method
from respnet.model import (
    EVAL,
    TRAIN,
    ModelParams,
    forward,
    load_checkpoint,
    params_from_arrays,
    read_checkpoint,
    write_checkpoint,
)
from respnet.signalio import WindowedDataset, minmax_normalize, zscore
from respnet.tensor import Tensor, backward, sgd_momentum_step, smooth_l1_loss

logger = logging.getLogger(__name__)

PREDICT_BATCH = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.7
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0
    track_test_loss: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.lr < 0:
            raise InvalidConfig("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be non-negative")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        presets = {
            "paper": dict(epochs=2000, batch_size=256),
            "desk": dict(epochs=300, batch_size=8),
        }
        if name not in presets:
            raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    wall_s: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "test_loss", "wall_s"])
            for e, tr in enumerate(self.train_loss):
                te = self.test_loss[e] if e < len(self.test_loss) else ""
                w.writerow([e + 1, repr(tr), repr(te) if te != "" else "", f"{self.wall_s[e]:.3f}"])


def prepare_inputs(x: np.ndarray) -> np.ndarray:
    """(n, L) raw PPG windows -> (n, 1, L) per-window z-scored network input."""
    x = np.asarray(x, dtype=np.float64)
    return zscore(x)[:, None, :]


def prepare_targets(y: np.ndarray) -> np.ndarray:
    """(n, L) reference windows -> (n, 1, L) per-window min-max scaled targets."""
    y = np.asarray(y, dtype=np.float64)
    return np.stack([minmax_normalize(row)[0] for row in y])[:, None, :]


def batch_loss(params: ModelParams, x: np.ndarray, t: np.ndarray, mode: str) -> Tensor:
    return smooth_l1_loss(forward(params, Tensor(x), mode), t)


def _eval_loss(params: ModelParams, x: np.ndarray, t: np.ndarray) -> float:
    total = 0.0
    for i in range(0, len(x), PREDICT_BATCH):
        xb, tb = x[i : i + PREDICT_BATCH], t[i : i + PREDICT_BATCH]
        total += batch_loss(params, xb, tb, EVAL).item() * len(xb)
    return total / len(x)


def save_training_state(path, params: ModelParams, velocities: dict, history: TrainHistory, epoch: int, cfg: TrainConfig) -> None:
    tensors = {k: t.data for k, t in params.items()}
    tensors.update({f"optim.v.{k}": v for k, v in velocities.items()})
    hist = {"train_loss": history.train_loss, "test_loss": history.test_loss}
    meta = {"epoch": epoch, "train_config": asdict(cfg), "history": hist}
    write_checkpoint(path, params.config, tensors, meta)


def load_training_state(path) -> tuple[ModelParams, dict, TrainHistory, int]:
    config, meta, arrays = read_checkpoint(path)
    params = params_from_arrays(config, {k: v for k, v in arrays.items() if not k.startswith("optim.")})
    velocities = {k[len("optim.v.") :]: v for k, v in arrays.items() if k.startswith("optim.v.")}
    hist = meta.get("history", {})
    history = TrainHistory(list(hist.get("train_loss", [])), list(hist.get("test_loss", [])))
    history.wall_s = [0.0] * len(history.train_loss)
    return params, velocities, history, int(meta.get("epoch", 0))


def train(
    params: ModelParams,
    ds: WindowedDataset,
    cfg: TrainConfig,
    checkpoint_dir=None,
    resume_from=None,
) -> tuple[ModelParams, TrainHistory]:
    """Fit ``params`` in place on the train split of ``ds``.

    The shuffle order of epoch ``e`` depends only on ``(cfg.seed, e)``, so a
    run resumed from an epoch checkpoint reproduces the uninterrupted one.
    Raises :class:`DivergedLoss` on a non-finite loss after writing the last
    good parameters to ``checkpoint_dir`` (when given).
    """
    x_raw, y_raw = ds.subset(train=True)
    if len(x_raw) == 0:
        raise EmptyTrainSet("train split is empty")
    if ds.window_len != params.config.input_length:
        raise ShapeMismatch(f"windows have {ds.window_len} samples, model expects {params.config.input_length}")
    x_all, t_all = prepare_inputs(x_raw), prepare_targets(y_raw)
    test_xt = None
    if cfg.track_test_loss and ds.n_test:
        xt_raw, yt_raw = ds.subset(train=False)
        test_xt = (prepare_inputs(xt_raw), prepare_targets(yt_raw))

    velocities: dict[str, np.ndarray] = {}
    history = TrainHistory()
    start_epoch = 0
    if resume_from is not None:
        loaded, velocities, history, start_epoch = load_training_state(resume_from)
        if loaded.config != params.config:
            raise InvalidConfig("resume checkpoint was trained with a different model config")
        for name, t in params.items():
            t.data = loaded[name].data
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    n = len(x_all)
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        good = {k: t.data.copy() for k, t in params.items()}
        good_v = {k: v.copy() for k, v in velocities.items()}
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = batch_loss(params, x_all[idx], t_all[idx], TRAIN)
            value = loss.item()
            if not math.isfinite(value):
                path = None
                if ckdir is not None:
                    for k, t in params.items():
                        t.data = good[k]
                    path = ckdir / "last_good.rspn"
                    save_training_state(path, params, good_v, history, epoch, cfg)
                raise DivergedLoss(f"non-finite loss at epoch {epoch + 1}", checkpoint=path)
            backward(loss)
            sgd_momentum_step(params.trainable(), velocities, cfg.lr, cfg.momentum)
            total += value * len(idx)
        history.train_loss.append(total / n)
        if test_xt is not None:
            history.test_loss.append(_eval_loss(params, *test_xt))
        history.wall_s.append(time.perf_counter() - t0)
        logger.info("epoch %d/%d train_loss %.6f", epoch + 1, cfg.epochs, history.train_loss[-1])
        if ckdir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_training_state(ckdir / f"epoch_{epoch + 1:05d}.rspn", params, velocities, history, epoch + 1, cfg)
    if ckdir is not None:
        save_training_state(ckdir / "final.rspn", params, velocities, history, cfg.epochs, cfg)
        history.write_csv(ckdir / "loss.csv")
    return params, history


def predict(params: ModelParams, windows: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Eval-mode respiration estimates (scaled like the min-max training targets)."""
    if len(windows) == 0:
        return []
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.input_length:
        raise ShapeMismatch(f"windows of shape {x.shape}, model expects length {params.config.input_length}")
    xin = prepare_inputs(x)
    out = []
    for i in range(0, len(xin), PREDICT_BATCH):
        y = forward(params, Tensor(xin[i : i + PREDICT_BATCH]), EVAL).data
        out.extend(np.array(row[0]) for row in y)
    return out


def evaluate_predictions(preds, ds: WindowedDataset, dataset_id: str = "", out_fs: float = EVAL_FS) -> EvalReport:
    _, y = ds.subset(train=False)
    if len(y) == 0:
        raise EmptyEvaluation("test split is empty")
    p60 = [downsample_for_eval(p, ds.fs, out_fs) for p in preds]
    r60 = [downsample_for_eval(r.astype(np.float64), ds.fs, out_fs) for r in y]
    return evaluate_method(p60, r60, out_fs, "RespNet", dataset_id)


def evaluate_params(params: ModelParams, ds: WindowedDataset, dataset_id: str = "") -> EvalReport:
    x, _ = ds.subset(train=False)
    if len(x) == 0:
        raise EmptyEvaluation("test split is empty")
    return evaluate_predictions(predict(params, x), ds, dataset_id)


def evaluate_checkpoint(path, ds: WindowedDataset, dataset_id: str = "") -> EvalReport:
    return evaluate_params(load_checkpoint(path), ds, dataset_id)
