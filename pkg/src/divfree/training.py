"""Training loop, evaluation rollouts, and run configuration.

Training pairs follow the teacher-forcing convention: within the rollout
window, the model maps the window of ``t_in`` true frames ending at time t
to the frame at t+1.  The objective is the per-sample squared-norm ratio
(relative mean squared error) averaged over the batch; reported errors use
its square root.  Evaluation is fully autoregressive: conditioned on the
first ``t_in`` true frames, the model's own predictions feed the input
window for ``t_rollout`` steps.

Optimization is Adam with decoupled weight decay under a cosine schedule
that anneals the initial step size to zero over the run.  Runs are
reconstructible from (config, seed, dataset manifest): the checkpoint
stores parameters, Adam moments, the shuffling RNG state and the epoch
counter, so a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .grids import make_periodic_grid
from .model import (DivFreeFno, ModelSpec, load_checkpoint, relative_l2,
                    relative_l2_loss, save_checkpoint)
from .navier_stokes import load_dataset
from .skewdiv import divergence_ratio


class NumericalAbort(RuntimeError):
    """Raised when the optimization hits non-finite numbers."""


_CONFIG_FIELDS = {
    "dataset": str,
    "width": int,
    "depth": int,
    "modes": int,
    "proj_width": int,
    "extra_channels": int,
    "divergence_free": bool,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "weight_decay": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "t_in": int,
    "t_rollout": int,
}


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; serialized verbatim into the checkpoint."""

    dataset: str
    width: int = 8
    depth: int = 2
    modes: int = 8
    proj_width: int = 64
    extra_channels: int = 0
    divergence_free: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 2
    seed: int = 0
    t_in: int = 10
    t_rollout: int = 20

    def __post_init__(self):
        if min(self.width, self.depth, self.modes, self.proj_width) < 1:
            raise ValueError("width, depth, modes, proj_width must be positive")
        if self.extra_channels < 0:
            raise ValueError("extra_channels must be non-negative")
        if not (self.lr > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("need lr > 0 and betas in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if min(self.epochs, self.batch_size, self.t_in, self.t_rollout) < 1:
            raise ValueError("epochs, batch_size, t_in, t_rollout must be positive")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(_CONFIG_FIELDS)
        if unknown:
            raise ValueError(
                f"unknown config keys {sorted(unknown)}; "
                f"valid keys are {sorted(_CONFIG_FIELDS)}"
            )
        if "dataset" not in raw:
            raise ValueError("config must name a dataset directory")
        coerced = {k: _CONFIG_FIELDS[k](v) for k, v in raw.items()}
        return cls(**coerced)

    def model_spec(self, dim: int = 2) -> ModelSpec:
        return ModelSpec(
            dim=dim,
            input_channels=dim * self.t_in,
            width=self.width,
            depth=self.depth,
            modes=(self.modes,) * dim,
            proj_width=self.proj_width,
            extra_channels=self.extra_channels,
            divergence_free=self.divergence_free,
        )


@dataclass
class MetricsRecord:
    """Per-epoch training curves and per-step rollout metrics."""

    train_loss: list = dataclass_field(default_factory=list)
    val_loss: list = dataclass_field(default_factory=list)
    divergence: list = dataclass_field(default_factory=list)  # per epoch, val preds
    step_error: list = dataclass_field(default_factory=list)   # per rollout step
    step_divergence: list = dataclass_field(default_factory=list)
    aggregate_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class AdamState:
    """Decoupled-weight-decay Adam over a named parameter table."""

    def __init__(self, params: dict, beta1: float, beta2: float,
                 weight_decay: float, eps: float = 1e-8):
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0

    def step(self, params: dict, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, t in params.items():
            g = t.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            t.value = t.value - lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * t.value
            )


def cosine_lr(base: float, epoch: int, total: int) -> float:
    return base * 0.5 * (1.0 + np.cos(np.pi * epoch / total))


def _teacher_pairs(n_samples: int, t_in: int, t_rollout: int, n_frames: int):
    if t_in + t_rollout > n_frames:
        raise ValueError(
            f"window t_in={t_in} plus rollout {t_rollout} exceeds the "
            f"{n_frames} stored frames"
        )
    return [(s, t) for s in range(n_samples) for t in range(t_in, t_in + t_rollout)]


def _window(trajectory: np.ndarray, t: int, t_in: int) -> np.ndarray:
    """Stack frames [t - t_in, t) as input channels, (M, 2 * t_in)."""
    frames = trajectory[t - t_in:t]           # (t_in, N, N, 2)
    t_w, n, _, c = frames.shape
    return np.moveaxis(frames, 0, 2).reshape(n * n, t_w * c)


def _grid_for(res: int):
    return make_periodic_grid(2, [1.0, 1.0], [res, res])


def train(config: TrainConfig, out_path, resume_from=None,
          log=None) -> tuple[Path, MetricsRecord]:
    """Run the optimization; returns the checkpoint path and metrics."""
    manifest, trajectories = load_dataset(config.dataset)
    n_samples, n_frames = trajectories.shape[0], trajectories.shape[1]
    res = trajectories.shape[2]
    grid = _grid_for(res)
    n_val = max(1, round(0.2 * n_samples)) if n_samples > 1 else 0
    train_traj = trajectories[: n_samples - n_val]
    val_traj = trajectories[n_samples - n_val:]
    if len(train_traj) == 0:
        raise ValueError("dataset too small to carve out a validation split")

    model = DivFreeFno(config.model_spec(), seed=config.seed)
    adam = AdamState(model.params, config.beta1, config.beta2, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    metrics = MetricsRecord()
    start_epoch = 0
    best_val = np.inf
    best_arrays = model.state_arrays()

    if resume_from is not None:
        header, blobs = load_checkpoint(resume_from)
        if header["config"] != _config_header(config):
            raise ValueError("checkpoint was produced by a different configuration")
        model.load_state_arrays(_strip(blobs, "param."))
        adam.m = _strip(blobs, "adam_m.")
        adam.v = _strip(blobs, "adam_v.")
        best_arrays = _strip(blobs, "best.")
        adam.step_count = header["adam_steps"]
        start_epoch = header["epoch"]
        best_val = header["best_val"]
        rng.bit_generator.state = json.loads(header["rng_state"])
        metrics = MetricsRecord(**header["metrics"])

    pairs = _teacher_pairs(len(train_traj), config.t_in, config.t_rollout, n_frames)

    for epoch in range(start_epoch, config.epochs):
        lr = cosine_lr(config.lr, epoch, config.epochs)
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            ad.zero_grads(model.parameters())
            batch_loss = None
            for pair_idx in chunk:
                s, t = pairs[pair_idx]
                window = _window(train_traj[s], t, config.t_in)
                target = train_traj[s, t].reshape(res * res, 2)
                pred = model.forward_node(window, grid)
                loss = relative_l2_loss(pred, target) * (1.0 / len(chunk))
                batch_loss = loss if batch_loss is None else batch_loss + loss
            value = float(batch_loss.value)
            if not np.isfinite(value):
                raise NumericalAbort(
                    f"non-finite training loss in epoch {epoch}; aborting"
                )
            ad.backward(batch_loss)
            adam.step(model.params, lr)
            epoch_loss += value * len(chunk)
        epoch_loss /= len(pairs)

        val_loss, val_div = _validation_metrics(model, val_traj, config, grid)
        metrics.train_loss.append(epoch_loss)
        metrics.val_loss.append(val_loss)
        metrics.divergence.append(val_div)
        if log is not None:
            log(f"epoch {epoch:3d} lr {lr:.2e} train {epoch_loss:.4e} "
                f"val {val_loss:.4e} div {val_div:.2e}")
        if val_loss <= best_val:
            best_val = val_loss
            best_arrays = model.state_arrays()

        _write_checkpoint(out_path, config, model, adam, rng, metrics,
                          epoch + 1, best_val, best_arrays, res)

    return Path(out_path), metrics


def _validation_metrics(model, val_traj, config, grid):
    if len(val_traj) == 0:
        return np.nan, np.nan
    res = val_traj.shape[2]
    losses, divs = [], []
    for s in range(len(val_traj)):
        for t in range(config.t_in, min(config.t_in + config.t_rollout,
                                        val_traj.shape[1])):
            window = _window(val_traj[s], t, config.t_in)
            target = val_traj[s, t].reshape(res * res, 2)
            pred = model.forward(window, grid)
            losses.append(relative_l2(pred.values, target) ** 2)
            divs.append(divergence_ratio(pred.field))
    return float(np.mean(losses)), float(np.mean(divs))


def _config_header(config: TrainConfig) -> dict:
    return asdict(config)


def _strip(blobs: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)}


def _write_checkpoint(path, config, model, adam, rng, metrics, epoch,
                      best_val, best_arrays, resolution) -> None:
    header = {
        "config": _config_header(config),
        "epoch": epoch,
        "adam_steps": adam.step_count,
        "best_val": best_val,
        "rng_state": json.dumps(rng.bit_generator.state),
        "metrics": metrics.to_dict(),
        "resolution": resolution,
    }
    blobs: dict[str, np.ndarray] = {}
    for name, t in model.params.items():
        blobs[f"param.{name}"] = t.value
    for name in model.params:
        blobs[f"adam_m.{name}"] = adam.m[name]
    for name in model.params:
        blobs[f"adam_v.{name}"] = adam.v[name]
    for name, arr in best_arrays.items():
        blobs[f"best.{name}"] = arr
    save_checkpoint(path, header, blobs)


def load_model(checkpoint_path, best: bool = True) -> tuple[DivFreeFno, dict]:
    """Rebuild the model from a checkpoint (best-validation weights by default)."""
    header, blobs = load_checkpoint(checkpoint_path)
    config = TrainConfig.from_dict(header["config"])
    model = DivFreeFno(config.model_spec(), seed=config.seed)
    arrays = _strip(blobs, "best." if best else "param.")
    model.load_state_arrays(arrays)
    return model, header


def evaluate(model: DivFreeFno, dataset_path, t_in: int, t_rollout: int,
             trained_resolution: int | None = None,
             super_resolution: bool = False) -> MetricsRecord:
    """Autoregressive rollout metrics on a dataset.

    Without ``super_resolution``, a resolution mismatch between checkpoint
    and dataset is an error; with it, the model's spectral plans are simply
    rebuilt on the finer grid (weights unchanged).
    """
    manifest, trajectories = load_dataset(dataset_path)
    res = trajectories.shape[2]
    if trained_resolution is not None and res != trained_resolution:
        if not super_resolution:
            raise ValueError(
                f"dataset resolution {res} differs from training resolution "
                f"{trained_resolution}; pass super_resolution=True to allow it"
            )
    grid = _grid_for(res)
    n_frames = trajectories.shape[1]
    if t_in + t_rollout > n_frames:
        raise ValueError("rollout window exceeds stored frames")

    errors = np.zeros((len(trajectories), t_rollout))
    divs = np.zeros_like(errors)
    for s, traj in enumerate(trajectories):
        window = [traj[k] for k in range(t_in)]
        for step in range(t_rollout):
            stacked = np.moveaxis(np.asarray(window[-t_in:]), 0, 2)
            inputs = stacked.reshape(res * res, 2 * t_in)
            pred = model.forward(inputs, grid)
            frame = pred.values.reshape(res, res, 2)
            truth = traj[t_in + step]
            errors[s, step] = relative_l2(frame, truth)
            divs[s, step] = divergence_ratio(pred.field)
            window.append(frame)

    metrics = MetricsRecord()
    metrics.step_error = errors.mean(axis=0).tolist()
    metrics.step_divergence = divs.mean(axis=0).tolist()
    metrics.aggregate_error = float(errors.mean())
    return metrics
