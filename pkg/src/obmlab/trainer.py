"""Optimization of the learned predictors.

Both trainable models share this loop: full forward over each trajectory,
per-step losses summed, one backward per trajectory, gradients averaged
over the batch in a fixed order, global-norm clipped, and applied with
adaptive-moment updates. The sparsity term ramps in over a configurable
window of epochs. Checkpoints and a CSV log are written as side effects
when an output directory is given.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import diffcore as dc
from . import evalkit as ek
from . import losses as ls
from . import obmnet as ob
from .simworld import DomainConfig

__all__ = [
    "TrainingError",
    "TrainConfig",
    "ModelSpec",
    "build_model",
    "model_from_checkpoint",
    "sparsity_weight",
    "clip_by_norm",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

MODEL_KINDS = ("obmnet", "recurrent")


class TrainingError(RuntimeError):
    """Optimization hit a non-finite loss or an invalid configuration."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    ramp_start: int | None = None  # default: middle third of training
    ramp_end: int | None = None
    loss_eps: float = 1e-3
    eval_every: int = 10
    seed: int = 0

    def resolved_ramp(self) -> tuple[int, int]:
        start = self.epochs // 3 if self.ramp_start is None else self.ramp_start
        end = (2 * self.epochs) // 3 if self.ramp_end is None else self.ramp_end
        return start, end

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise TrainingError("epochs, batch_size, eval_every must be >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise TrainingError("lr and clip_norm must be positive")
        start, end = self.resolved_ramp()
        if not 0 <= start <= end <= self.epochs:
            raise TrainingError(
                f"curriculum must satisfy 0 <= ramp_start <= ramp_end <= epochs, "
                f"got ({start}, {end}) with epochs={self.epochs}")

    def to_dict(self) -> dict:
        start, end = self.resolved_ramp()
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "adam_eps": self.adam_eps, "clip_norm": self.clip_norm,
                "ramp_start": start, "ramp_end": end,
                "loss_eps": self.loss_eps, "eval_every": self.eval_every,
                "seed": self.seed}


def sparsity_weight(epoch: int, config: TrainConfig) -> float:
    """Curriculum weight: 0 before the ramp, linear across it, then 1.
    A zero-length ramp degenerates to a step function at ramp_start."""
    start, end = config.resolved_ramp()
    if epoch >= end:
        return 1.0
    if epoch < start:
        return 0.0
    return (epoch - start) / (end - start)


@dataclass
class ModelSpec:
    """Uniform handle over the trainable model families."""

    kind: str
    hyper: object

    def init(self, rng: np.random.Generator) -> dc.ParamStore:
        if self.kind == "obmnet":
            return ob.init_params(self.hyper, rng)
        return bl.recurrent_init_params(self.hyper, rng)

    def run(self, params: dc.ParamStore, observations):
        if self.kind == "obmnet":
            outputs, _ = ob.run_trajectory(params, self.hyper, observations)
            return outputs
        return bl.run_recurrent(params, self.hyper, observations)

    def predictor(self, params: dc.ParamStore):
        if self.kind == "obmnet":
            return ob.Predictor(params, self.hyper)
        return bl.RecurrentPredictor(params, self.hyper)


def build_model(kind: str, domain: DomainConfig, **hyper_overrides) -> ModelSpec:
    if kind == "obmnet":
        hyper = ob.HyperParams(num_tables=domain.num_tables,
                               num_classes=domain.num_classes, **hyper_overrides)
    elif kind == "recurrent":
        hyper = bl.RecurrentHyperParams(num_tables=domain.num_tables,
                                        num_classes=domain.num_classes,
                                        **hyper_overrides)
    else:
        raise TrainingError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
    hyper.validate()
    return ModelSpec(kind=kind, hyper=hyper)


def _trajectory_loss(model: ModelSpec, params, trajectory, lam, loss_eps):
    outputs = model.run(params, (s.z for s in trajectory.steps))
    pairs = [(o.y, o.c) for o in outputs]
    labels = [s.labels for s in trajectory.steps]
    return ls.total_step_loss(pairs, labels, eps=loss_eps, lambda_sparse=lam)


class _Adam:
    def __init__(self, size: int, config: TrainConfig):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.config = config

    def update(self, values: np.ndarray, grads: np.ndarray) -> np.ndarray:
        cfg = self.config
        self.t += 1
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grads
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grads**2
        m_hat = self.m / (1 - cfg.beta1**self.t)
        v_hat = self.v / (1 - cfg.beta2**self.t)
        return values - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def clip_by_norm(grads: np.ndarray, clip: float) -> np.ndarray:
    """Global-norm clipping. Rescales, never reshapes: the output is a
    positive multiple of the input."""
    norm = float(np.linalg.norm(grads))
    if norm > clip:
        return grads * (clip / norm)
    return grads


def save_checkpoint(path, params: dc.ParamStore, kind: str, hyper,
                    config_digest: str, extra: dict | None = None):
    header = {"kind": kind, "hyper": hyper.to_dict(), "config_digest": config_digest}
    if extra:
        header.update(extra)
    dc.write_checkpoint(path, params, header)


def load_checkpoint(path):
    """Returns (params, header). The header names the model kind and its
    hyperparameters, enough to rebuild the predictor."""
    return dc.read_checkpoint(path)


def model_from_checkpoint(header: dict) -> ModelSpec:
    kind = header.get("kind")
    if kind == "obmnet":
        return ModelSpec(kind, ob.HyperParams.from_dict(header["hyper"]))
    if kind == "recurrent":
        return ModelSpec(kind, bl.RecurrentHyperParams.from_dict(header["hyper"]))
    raise TrainingError(f"checkpoint names unknown model kind {kind!r}")


def _log_row(epoch, split, n_steps, sums, lam, accuracy=""):
    return {
        "epoch": epoch,
        "split": split,
        "l_obj": sums[0] / n_steps,
        "l_slot": sums[1] / n_steps,
        "l_sparse": sums[2] / n_steps,
        "lambda": lam,
        "total": sums[3] / n_steps,
        "table_accuracy@25": accuracy,
    }


def write_log_csv(path, rows):
    fields = ["epoch", "split", "l_obj", "l_slot", "l_sparse", "lambda",
              "total", "table_accuracy@25"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def train(trajectories, kind: str, config: TrainConfig, domain: DomainConfig,
          heldout=None, out_dir=None, hyper_overrides: dict | None = None,
          params: dc.ParamStore | None = None):
    """Returns (params, log rows). Deterministic for fixed inputs: data
    order, reduction order, and initialization all derive from config.seed.

    A non-finite loss aborts with the epoch/trajectory context; checkpoints
    already on disk are left in place.
    """
    config.validate()
    if not trajectories:
        raise TrainingError("training set is empty")
    model = build_model(kind, domain, **(hyper_overrides or {}))
    if params is None:
        params = model.init(np.random.default_rng([config.seed, 0]))
    shuffle_rng = np.random.default_rng([config.seed, 1])
    adam = _Adam(params.total_count(), config)
    log_rows = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(config.epochs):
        lam = sparsity_weight(epoch, config)
        order = shuffle_rng.permutation(len(trajectories))
        sums = np.zeros(4)
        n_steps = 0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            params.zero_grad()
            for idx in batch:
                try:
                    breakdown = _trajectory_loss(
                        model, params, trajectories[idx], lam, config.loss_eps)
                except ob.NumericError as err:
                    raise TrainingError(
                        f"non-finite forward at epoch {epoch}, "
                        f"trajectory {idx}: {err}") from err
                if not np.isfinite(breakdown.total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, trajectory {idx}")
                dc.backward(breakdown.total_node)
                sums += (breakdown.l_obj, breakdown.l_slot,
                         breakdown.l_sparse, breakdown.total)
                n_steps += len(trajectories[idx].steps)
            grads = clip_by_norm(params.flat_grads() / len(batch), config.clip_norm)
            params.set_flat_values(adam.update(params.flat_values(), grads))
        log_rows.append(_log_row(epoch, "train", max(n_steps, 1), sums, lam))

        last = epoch == config.epochs - 1
        if (epoch + 1) % config.eval_every == 0 or last:
            accuracy = ""
            if heldout:
                records = evaluate(params, heldout, kind, domain,
                                   obs_counts=(25,), hyper=model.hyper)
                accuracy = records[0].table_accuracy
                log_rows.append(_log_row(epoch, "heldout", 1,
                                         np.full(4, np.nan), lam, accuracy))
            if out_dir:
                save_checkpoint(
                    os.path.join(out_dir, f"{kind}_epoch{epoch:03d}.json"),
                    params, kind, model.hyper, domain.digest(),
                    extra={"epoch": epoch, "train_config": config.to_dict()})
    if out_dir:
        write_log_csv(os.path.join(out_dir, f"train_log_{kind}.csv"), log_rows)
    return params, log_rows


def evaluate(params: dc.ParamStore, trajectories, kind: str,
             domain: DomainConfig, obs_counts=(10, 25, 50),
             hyper=None) -> list[ek.MetricsRecord]:
    """Mean metrics over a test split at fixed valid-observation counts."""
    model = ModelSpec(kind, hyper) if hyper is not None else build_model(kind, domain)
    predictor = model.predictor(params)
    outputs = [predictor.run(t) for t in trajectories]
    return ek.aggregate_at_counts(outputs, trajectories, domain.num_tables,
                                  obs_counts, penalty=domain.table_half_size)
