"""Adam, the learning-rate schedule, the training loop and the two-phase protocol."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import AugmentConfig, Manifest, load_batch
from .geometry import invert_pose_params
from .losses import LossBatch, LossWeights, Regime, total_loss
from .networks import DepthNet, ModelKind, NetworkConfig, PoseNet, load_model, save_model
from .nn import atomic_write, load_checkpoint, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "AdamState", "adam_step", "lr_schedule", "TrainConfig", "TrainState", "TrainResult", "train",
    "pretrain_then_adapt", "config_hash", "predict_poses", "TrainConfigError",
]


class TrainConfigError(ValueError):
    pass


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> bool:
    """One bias-corrected Adam update with decoupled decay ``w -= lr * wd * w``.

    ``params`` maps names to Parameters, ``grads`` maps names to arrays (None
    means zero). If any gradient is non-finite nothing is changed, the name
    is logged and False is returned.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            logger.error("non-finite gradient in %s; step skipped", name)
            return False
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
    return True


def lr_schedule(epoch: float, lr0: float = 1.5e-4, half_life: float = 50.0) -> float:
    """Continuous exponential decay: lr0 * 0.5 ** (epoch / half_life)."""
    return lr0 * 0.5 ** (epoch / half_life)


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    regime: Regime | str = Regime.SYNTHETIC
    batch_size: int = 8
    lr0: float = 1.5e-4
    lr_half_life_epochs: float = 50.0
    weight_decay: float = 1e-4
    epochs: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    crop: tuple | None = None
    flip_prob: float = 0.5
    eval_every: int = 1
    max_steps: int | None = None
    keep_last: int = 2

    def __post_init__(self):
        self.regime = Regime(self.regime)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise TrainConfigError("lr0 must be positive")
        if self.epochs < 0:
            raise TrainConfigError("epochs must be >= 0")
        if self.crop is not None and (len(self.crop) != 2 or self.crop[0] % 32 or self.crop[1] % 32):
            raise TrainConfigError(f"crop {self.crop} must be two sizes divisible by 32")
        if self.eval_every < 1 or self.keep_last < 1:
            raise TrainConfigError("eval_every and keep_last must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = self.regime.value
        d["weights"] = self.weights.to_dict()
        d["crop"] = list(self.crop) if self.crop else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def config_hash(*configs: dict) -> str:
    blob = json.dumps(configs, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_val: float | None = None
    best_path: str | None = None
    rng_state: dict | None = None

    def save(self, path: str) -> None:
        arrays = {f"m/{k}": v for k, v in self.adam.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.adam.v.items()})
        meta = {"epoch": self.epoch, "step": self.step, "adam_t": self.adam.t, "best_val": self.best_val,
                "best_path": self.best_path, "rng_state": self.rng_state}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str) -> "TrainState":
        arrays, meta = load_checkpoint(path)
        adam = AdamState(
            {k[2:]: v for k, v in arrays.items() if k.startswith("m/")},
            {k[2:]: v for k, v in arrays.items() if k.startswith("v/")},
            meta["adam_t"],
        )
        return cls(meta["epoch"], meta["step"], adam, meta["best_val"], meta["best_path"], meta["rng_state"])


@dataclass
class TrainResult:
    out_dir: str
    best_dir: str
    last_dir: str
    log_path: str
    history: list


# -- loop ----------------------------------------------------------------------

def _sparse_seg(records: list) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([r.sparse for r in records]), np.stack([r.seg.labels for r in records])


def predict_poses(posenet: PoseNet, batch: LossBatch) -> tuple[Tensor, Tensor]:
    """P_{t->t-1} and P_{t->t+1} from one PoseNet pass over both frame pairs in temporal order."""
    n = batch.image.shape[0]
    first = np.concatenate([batch.prev_image, batch.image])
    second = np.concatenate([batch.image, batch.next_image])
    out = posenet(first, second)  # P_{t-1->t} then P_{t->t+1}
    return invert_pose_params(out[:n]), out[n:]


def _forward_loss(model: DepthNet, posenet: PoseNet | None, records: list, regime: Regime, weights: LossWeights):
    sparse, seg = _sparse_seg(records)
    depth = model(sparse, seg if model.kind is ModelKind.SEGGUIDED else None)
    batch = LossBatch.from_records(records, depth.dtype)
    poses = predict_poses(posenet, batch) if posenet is not None else (None, None)
    return total_loss(batch, depth, regime, weights, *poses), depth


def _check_modalities(manifest: Manifest, regime: Regime) -> None:
    if not manifest.split("train"):
        raise TrainConfigError("manifest has no training samples")
    if regime.photometric:
        entries = manifest.split("train")
        if not any(e.get("prev") in manifest.frames and e.get("next") in manifest.frames for e in entries):
            raise TrainConfigError(f"regime {regime.value} needs neighbour frames, none are present")


def _validate(model: DepthNet, posenet: PoseNet | None, manifest: Manifest, config: TrainConfig) -> dict | None:
    entries = manifest.split("val")
    if not entries:
        return None
    model.eval()
    if posenet is not None:
        posenet.eval()
    losses, abs_err, count = [], 0.0, 0
    try:
        for start in range(0, len(entries), config.batch_size):
            records = load_batch(manifest, "val", range(start, min(start + config.batch_size, len(entries))))
            report, depth = _forward_loss(model, posenet, records, config.regime, config.weights)
            losses.append((float(report.total.data), len(records)))
            gt = np.stack([r.gt for r in records])
            valid = gt > 0
            abs_err += float(np.abs(depth.data[:, 0] - gt)[valid].sum())
            count += int(valid.sum())
    finally:
        model.train()
        if posenet is not None:
            posenet.train()
    val_loss = sum(v * n for v, n in losses) / sum(n for _, n in losses)
    return {"val_loss": val_loss, "val_mae_mm": 1000.0 * abs_err / count if count else None}


def _save_epoch(directory: Path, model: DepthNet, posenet: PoseNet | None, state: TrainState,
                extra: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_model(str(directory / "depth.ckpt"), model, extra)
    if posenet is not None:
        save_model(str(directory / "pose.ckpt"), posenet, extra)
    state.save(str(directory / "state.ckpt"))


def _copy_dir(src: Path, dst: Path) -> None:
    tmp = dst.with_name(dst.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    shutil.copytree(src, tmp)
    if dst.exists():
        shutil.rmtree(dst)
    os.replace(tmp, dst)


def _log(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def train(
    manifest: Manifest | str,
    model_kind: ModelKind | str,
    config: TrainConfig,
    out_dir: str,
    network_config: NetworkConfig | None = None,
    init_checkpoint: str | None = None,
    resume: bool = False,
    log_header: dict | None = None,
) -> TrainResult:
    """Train a depth network (and PoseNet for photometric regimes) on ``manifest``.

    Writes ``log.jsonl``, ``ckpt/epoch_NNN/`` (the last ``keep_last`` epochs,
    plus the initial one) and ``best/`` (lowest validation loss; the last epoch
    when there is no validation split). With ``resume`` the run continues from
    the newest epoch directory and reproduces the uninterrupted run exactly.
    """
    if isinstance(manifest, (str, os.PathLike)):
        manifest = Manifest.load(manifest)
    regime = Regime(config.regime)
    _check_modalities(manifest, regime)
    out = Path(out_dir)
    ckpt_root, best_dir = out / "ckpt", out / "best"
    log_path = out / "log.jsonl"
    out.mkdir(parents=True, exist_ok=True)

    network_config = network_config or NetworkConfig(class_count=manifest.class_count)
    model = DepthNet(model_kind, network_config, seed=config.seed)
    posenet = PoseNet(network_config, seed=config.seed) if regime.photometric else None
    if init_checkpoint is not None:
        load_model(init_checkpoint, into=model)
    rng = np.random.default_rng(config.seed)
    state = TrainState()
    extra = {"train_config": config.to_dict()}

    if resume:
        epochs = sorted(ckpt_root.glob("epoch_*"))
        if not epochs:
            raise TrainConfigError(f"nothing to resume in {ckpt_root}")
        last = epochs[-1]
        load_model(str(last / "depth.ckpt"), into=model)
        if posenet is not None:
            load_model(str(last / "pose.ckpt"), into=posenet)
        state = TrainState.load(str(last / "state.ckpt"))
        rng.bit_generator.state = state.rng_state
        history = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
        # drop records written after the checkpoint we resume from
        history = [h for h in history if h.get("epoch", 0) < state.epoch or h.get("event") == "phase"
                   or (h.get("event") == "val" and h["epoch"] <= state.epoch)]
        fh = open(log_path, "w")
        for h in history:
            _log(fh, h)
    else:
        history = []
        fh = open(log_path, "w")
        if log_header is not None:
            _log(fh, log_header)
            history.append(log_header)
        state.rng_state = rng.bit_generator.state
        _save_epoch(ckpt_root / "epoch_000", model, posenet, state, extra)
        _copy_dir(ckpt_root / "epoch_000", best_dir)

    params = dict(model.named_parameters())
    if posenet is not None:
        params.update({f"pose.{k}": p for k, p in posenet.named_parameters()})
    n_train = len(manifest.split("train"))
    steps_per_epoch = max(1, -(-n_train // config.batch_size))
    augment_config = AugmentConfig(config.flip_prob, config.crop, config.seed)
    model.train()
    if posenet is not None:
        posenet.train()

    try:
        while state.epoch < config.epochs and (config.max_steps is None or state.step < config.max_steps):
            epoch = state.epoch
            order = rng.permutation(n_train)
            for b in range(steps_per_epoch):
                if config.max_steps is not None and state.step >= config.max_steps:
                    break
                t0 = time.perf_counter()
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                records = load_batch(manifest, "train", idx, augment_config, epoch=epoch)
                report, _ = _forward_loss(model, posenet, records, regime, config.weights)
                report.total.backward()
                grads = {k: p.grad for k, p in params.items()}
                norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()
                                         if g is not None)))
                lr = lr_schedule(epoch + b / steps_per_epoch, config.lr0, config.lr_half_life_epochs)
                applied = adam_step(params, grads, state.adam, lr, config.weight_decay)
                for p in params.values():
                    p.grad = None
                state.step += 1
                record = {"step": state.step, "epoch": epoch, "lr": lr, "grad_norm": norm,
                          "losses": report.as_log(), "applied": applied,
                          "wall_time": time.perf_counter() - t0}
                _log(fh, record)
                history.append(record)
            state.epoch += 1
            finished = state.epoch >= config.epochs or (config.max_steps is not None
                                                        and state.step >= config.max_steps)
            val = None
            if state.epoch % config.eval_every == 0 or finished:
                val = _validate(model, posenet, manifest, config)
            if val is not None:
                val_record = {"event": "val", "epoch": state.epoch, **val}
                _log(fh, val_record)
                history.append(val_record)
            state.rng_state = rng.bit_generator.state
            epoch_dir = ckpt_root / f"epoch_{state.epoch:03d}"
            improved = val is not None and (state.best_val is None or val["val_loss"] < state.best_val)
            if improved:
                state.best_val = val["val_loss"]
                state.best_path = str(best_dir)
            _save_epoch(epoch_dir, model, posenet, state, extra)
            if improved or (state.best_val is None and finished):
                _copy_dir(epoch_dir, best_dir)
            _prune(ckpt_root, config.keep_last)
    finally:
        fh.close()
    epochs = sorted(ckpt_root.glob("epoch_*"))
    return TrainResult(str(out), str(best_dir), str(epochs[-1]), str(log_path), history)


def _prune(ckpt_root: Path, keep_last: int) -> None:
    epochs = sorted(ckpt_root.glob("epoch_*"))
    for old in epochs[1:-keep_last]:  # epoch_000 is the initial model and is kept
        shutil.rmtree(old)


# -- two-phase protocol --------------------------------------------------------

def pretrain_then_adapt(
    synth_manifest: Manifest | str,
    real_manifest: Manifest | str | None,
    model_kind: ModelKind | str,
    synth_config: TrainConfig,
    adapt_config: TrainConfig | None,
    out_dir: str,
    network_config: NetworkConfig | None = None,
) -> dict:
    """Synthetic pre-training, then (optionally) adaptation from its best checkpoint.

    Returns the best-checkpoint directory of each phase that ran. Each phase
    log starts with a ``phase`` record carrying the config hashes.
    """
    if Regime(synth_config.regime) is not Regime.SYNTHETIC:
        raise TrainConfigError("the first phase must use the synthetic regime")
    network_config = network_config or NetworkConfig()
    net_dict = network_config.to_dict()
    out = Path(out_dir)
    header = {"event": "phase", "phase": "synthetic", "model_kind": ModelKind(model_kind).value,
              "config_hash": config_hash(synth_config.to_dict(), net_dict)}
    first = train(synth_manifest, model_kind, synth_config, str(out / "synthetic"), network_config,
                  log_header=header)
    result = {"synthetic": first.best_dir}
    if adapt_config is None:
        return result
    if real_manifest is None:
        raise TrainConfigError("adaptation needs a real-domain manifest")
    regime = Regime(adapt_config.regime)
    header = {"event": "phase", "phase": regime.value, "model_kind": ModelKind(model_kind).value,
              "config_hash": config_hash(adapt_config.to_dict(), net_dict),
              "init_config_hash": config_hash(synth_config.to_dict(), net_dict),
              "init_checkpoint": str(Path(first.best_dir) / "depth.ckpt")}
    second = train(real_manifest, model_kind, adapt_config, str(out / regime.value), network_config,
                   init_checkpoint=str(Path(first.best_dir) / "depth.ckpt"), log_header=header)
    result[regime.value] = second.best_dir
    return result


def write_json(path: str, data: dict) -> None:
    atomic_write(path, (json.dumps(data, indent=1, sort_keys=True) + "\n").encode())
