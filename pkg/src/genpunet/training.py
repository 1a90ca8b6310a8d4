"""ELBO training with ADAM, early stopping and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .autodiff import ops
from .autodiff.serialize import SerializationError, read_tensor, write_tensor
from .autodiff.tensor import Tape, Tensor
from .data import AnnotatedCase, stack_images
from .model import ArchConfig, GenProbUNet, build_variant, eval_mode, forward_train, latent_kl

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GPUNCKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta: float = 1.0
    batch_size: int = 32
    patience_epochs: int = 20
    max_epochs: int = 200
    kl_mc_samples: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.kl_mc_samples < 1:
            raise ValueError("batch_size, max_epochs and kl_mc_samples must be >= 1")


# -- loss -----------------------------------------------------------------------

def reconstruction_loss(logits: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all pixels."""
    return ops.mean(ops.bce_with_logits(logits, y))


def elbo_loss(logits: Tensor, y, kl_value, beta: float) -> Tensor:
    try:
        loss = reconstruction_loss(logits, y) + beta * kl_value
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite loss ({exc})") from exc
    if not np.isfinite(loss.data).all():
        raise TrainingError("non-finite loss")
    return loss


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected ADAM update, in place on ``params[name].data``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype)


# -- early stopping ---------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    adam: AdamState = field(default_factory=AdamState)
    rng_state: Optional[dict] = None

    def observe(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True when it strictly improves."""
        self.epoch += 1
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_epoch = self.epoch
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    def should_stop(self, patience: int) -> bool:
        return self.epochs_since_improvement > patience


# -- training loop -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    ce_term: float
    kl_term: float


@dataclass
class TrainResult:
    best_state: dict
    history: list
    best_epoch: int
    stop_epoch: int
    state: TrainState


def _batch(model: GenProbUNet, cases: Sequence[AnnotatedCase], rng: np.random.Generator):
    x = stack_images(cases)
    picks = [rng.integers(c.n_annotators) for c in cases]
    y = np.stack([c.masks[k] for c, k in zip(cases, picks)])[:, None].astype(model.dtype)
    return x.astype(model.dtype), y


def _loss_terms(model, x, y, rng, config: TrainConfig):
    out = forward_train(model, x, y, model.noise(rng, x.shape[0]))
    kl = ops.mean(latent_kl(out.posterior, out.prior, config.kl_mc_samples, rng))
    ce = reconstruction_loss(out.logits, y)
    return elbo_loss(out.logits, y, kl, config.beta), ce, kl


def validation_loss(model: GenProbUNet, cases: Sequence[AnnotatedCase], config: TrainConfig) -> float:
    """Eval-mode ELBO with a noise stream that is identical every epoch."""
    rng = np.random.default_rng([config.seed, 1])
    total, count = 0.0, 0
    with eval_mode(model):
        for start in range(0, len(cases), config.batch_size):
            chunk = cases[start:start + config.batch_size]
            x, y = _batch(model, chunk, rng)
            loss, _, _ = _loss_terms(model, x, y, rng, config)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / count


def train(model: GenProbUNet, train_set: Sequence[AnnotatedCase], val_set: Sequence[AnnotatedCase],
          config: TrainConfig, state: Optional[TrainState] = None,
          checkpoint_path: Union[str, Path, None] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Optimize the ELBO until validation loss stops improving.

    The model is left holding the parameters of the last epoch; the
    best-validation parameters are returned in ``best_state`` (and written to
    ``checkpoint_path`` when given).  Passing a ``state`` from a checkpoint
    resumes where it left off.
    """
    if not train_set or not val_set:
        raise TrainingError("train and validation sets must be non-empty")
    train_ids = {c.case_id for c in train_set}
    if train_ids & {c.case_id for c in val_set}:
        raise TrainingError("train and validation sets overlap")

    state = state or TrainState()
    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    params = model.parameters()
    best_state = model.state_dict()
    history: list[EpochRecord] = []

    while state.epoch < config.max_epochs:
        model.train()
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            x, y = _batch(model, chunk, rng)
            with Tape() as tape:
                try:
                    loss, ce, kl = _loss_terms(model, x, y, rng, config)
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {state.epoch + 1}: non-finite values ({exc})") from exc
                tape.backward(loss)
            adam_step(params, {n: p.grad for n, p in params.items()}, state.adam, config.learning_rate)
            model.zero_grad()
            sums += np.array([loss.item(), ce.item(), kl.item()]) * len(chunk)
        means = sums / len(train_set)

        val = validation_loss(model, val_set, config)
        if not math.isfinite(val):
            raise TrainingError(f"epoch {state.epoch + 1}: non-finite validation loss")
        improved = state.observe(val)
        state.rng_state = rng.bit_generator.state
        record = EpochRecord(state.epoch, float(means[0]), val, float(means[1]), float(means[2]))
        history.append(record)
        logger.info("epoch %d train %.5f val %.5f ce %.5f kl %.5f%s", record.epoch, record.train_loss,
                    val, record.ce_term, record.kl_term, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(record)
        if improved:
            best_state = model.state_dict()
            if checkpoint_path is not None:
                save_checkpoint(model, state, checkpoint_path)
        if state.should_stop(config.patience_epochs):
            break

    return TrainResult(best_state, history, state.best_epoch, state.epoch, state)


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "ce_term", "kl_term"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.ce_term), repr(r.kl_term)])


# -- checkpoints ---------------------------------------------------------------------

def arch_to_dict(config: ArchConfig) -> dict:
    d = asdict(config)
    d["variant"] = config.variant.value
    d["filter_depths"] = list(config.filter_depths)
    d["image_size"] = list(config.image_size)
    return d


def arch_from_dict(d: dict) -> ArchConfig:
    return ArchConfig(**d)


def save_checkpoint(model: GenProbUNet, state: Optional[TrainState], path) -> None:
    """Versioned binary container: JSON header, then named tensor records."""
    state = state or TrainState()
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for name, arr in state.adam.m.items():
        tensors[f"adam_m/{name}"] = arr
    for name, arr in state.adam.v.items():
        tensors[f"adam_v/{name}"] = arr
    header = {
        "arch": arch_to_dict(model.config),
        "dtype": model.dtype.name,
        "state": {
            "epoch": state.epoch,
            "best_val_loss": state.best_val_loss,
            "best_epoch": state.best_epoch,
            "epochs_since_improvement": state.epochs_since_improvement,
            "adam_step": state.adam.step,
            "rng_state": state.rng_state,
        },
        "n_tensors": len(tensors),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for name in sorted(tensors):
            write_tensor(fh, name, tensors[name])
    tmp.replace(path)


def load_checkpoint(path, expected: Optional[ArchConfig] = None) -> tuple[GenProbUNet, TrainState]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            version, n = struct.unpack("<II", fh.read(8))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
            header = json.loads(fh.read(n).decode("utf-8"))
            tensors = dict(read_tensor(fh) for _ in range(header["n_tensors"]))
    except (struct.error, SerializationError, json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc

    config = arch_from_dict(header["arch"])
    if expected is not None and arch_to_dict(expected) != arch_to_dict(config):
        raise CheckpointError(f"{path}: architecture mismatch with the expected configuration")
    model = build_variant(config, seed=0, dtype=np.dtype(header["dtype"]))
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: architecture mismatch ({exc})") from exc
    s = header["state"]
    adam = AdamState(
        step=s["adam_step"],
        m={k[len("adam_m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_v/")},
    )
    state = TrainState(s["epoch"], s["best_val_loss"], s["best_epoch"], s["epochs_since_improvement"],
                       adam, s["rng_state"])
    return model, state
