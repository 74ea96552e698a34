"""Masked-token pretraining and multi-label fine-tuning.

All stochasticity in an epoch (shuffle order, token masking, dropout) is
drawn from one generator seeded by (seed, epoch), so a run can be resumed
from any epoch-end checkpoint and reproduce the uninterrupted loss trace
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .ingest import MASK_ID, TokenSequence
from .model import FreezeMask, ProteinEncoder, pad_batch


class TrainingError(ValueError):
    pass


@dataclass
class PretrainConfig:
    epochs: int
    batch_size: int
    mask_probability: float = 0.15
    learning_rate: float = 0.002
    weight_decay: float = 0.01
    grad_accumulation: int = 1
    lr_schedule: str = "constant"  # "constant" | "linear"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_probability < 1.0:
            raise TrainingError(f"mask_probability out of (0,1): {self.mask_probability}")
        _validate_common(self)


@dataclass
class FinetuneConfig:
    batch_size: int
    epochs: int = 10
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    grad_accumulation: int = 32
    threshold: float = 0.5
    loss_kind: str = "bce"  # "bce" | "categorical"
    lr_schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise TrainingError(f"threshold out of [0,1]: {self.threshold}")
        if self.loss_kind not in ("bce", "categorical"):
            raise TrainingError(f"unknown loss_kind '{self.loss_kind}'")
        _validate_common(self)


def _validate_common(cfg):
    if cfg.epochs < 1:
        raise TrainingError(f"epochs must be >= 1, got {cfg.epochs}")
    if cfg.batch_size < 1:
        raise TrainingError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.grad_accumulation < 1:
        raise TrainingError(f"grad_accumulation must be >= 1, got {cfg.grad_accumulation}")
    if cfg.learning_rate <= 0:
        raise TrainingError(f"learning_rate must be positive, got {cfg.learning_rate}")
    if cfg.weight_decay < 0:
        raise TrainingError(f"weight_decay must be non-negative, got {cfg.weight_decay}")
    if cfg.lr_schedule not in ("constant", "linear"):
        raise TrainingError(f"unknown lr_schedule '{cfg.lr_schedule}'")


@dataclass
class LossRecord:
    step: int
    epoch: int
    loss: float
    aspect: str = "-"


def mask_tokens(tokens: TokenSequence, p: float, rng: np.random.Generator):
    """Independently mask each residue position with probability p; CLS/SEP
    are never touched. If chance selects nothing, one position is forced."""
    n_inner = len(tokens.ids) - 2
    if n_inner < 1:
        raise TrainingError("sequence has no maskable positions")
    draws = rng.random(n_inner)
    selected = [i + 1 for i in range(n_inner) if draws[i] < p]
    if not selected:
        selected = [1 + int(rng.integers(n_inner))]
    masked_ids = list(tokens.ids)
    targets = []
    for pos in selected:
        targets.append((pos, masked_ids[pos]))
        masked_ids[pos] = MASK_ID
    return TokenSequence(ids=masked_ids, original_length=tokens.original_length), targets


def mlm_loss(logits: ad.Tensor, targets) -> ad.Tensor:
    """Mean NLL at masked positions. logits: [B, L, V]; targets: list per
    batch row of (position, original id) pairs."""
    if not any(targets):
        raise TrainingError("mlm_loss: no masked positions")
    L = logits.shape[1]
    flat_pos, flat_ids = [], []
    for row, row_targets in enumerate(targets):
        for pos, tid in row_targets:
            flat_pos.append(row * L + pos)
            flat_ids.append(tid)
    return ad.nll_from_logits(logits, flat_pos, flat_ids)


def finetune_loss(logits: ad.Tensor, targets: np.ndarray, kind: str = "bce") -> ad.Tensor:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise TrainingError(f"target shape {targets.shape} does not match logits {logits.shape}")
    if kind == "categorical":
        return ad.categorical_ce_from_logits(logits, targets)
    return ad.bce_with_logits(logits, targets)


class AdamState:
    """First/second moment estimates plus the shared step count."""

    def __init__(self, params: dict):
        self.step = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    @classmethod
    def from_arrays(cls, params: dict, step: int, m: dict, v: dict) -> "AdamState":
        state = cls(params)
        state.step = step
        for k in state.m:
            if k in m:
                state.m[k] = m[k].copy()
                state.v[k] = v[k].copy()
        return state

    def to_arrays(self) -> dict:
        return {"step": self.step, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}


def adam_step(params: dict, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One Adam update over every requires_grad parameter with a gradient.
    Weight decay is decoupled: applied to the parameter before the update."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        if not tensor.requires_grad or tensor.grad is None:
            continue
        g = tensor.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter group '{name.split('.')[0]}'")
        if weight_decay > 0:
            tensor.data -= lr * weight_decay * tensor.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


def _micro_batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def train_loop(model: ProteinEncoder, data, config, mode: str,
               freeze_mask: FreezeMask | None = None,
               checkpoint_path=None, loss_log=None, aspect: str = "-",
               start_epoch: int = 0, adam_state: AdamState | None = None):
    """Run pretraining ("pretrain": data = TokenSequences) or fine-tuning
    ("finetune": data = (TokenSequence, label bits) pairs).

    Returns (final Checkpoint, list of LossRecord). One optimizer step per
    grad_accumulation micro-batches; micro-batch losses are scaled by
    1/grad_accumulation so the step is equivalent to one large batch.
    """
    if not data:
        raise TrainingError("training data is empty")
    if mode not in ("pretrain", "finetune"):
        raise TrainingError(f"unknown training mode '{mode}'")
    if freeze_mask is None:
        freeze_mask = FreezeMask.none(model.config)
    model.apply_freeze(freeze_mask, mode=mode if mode == "finetune" else "pretrain")

    if adam_state is None:
        adam_state = AdamState(model.params)
    records: list = []
    step = adam_state.step
    micro_per_epoch = (len(data) + config.batch_size - 1) // config.batch_size
    steps_per_epoch = (micro_per_epoch + config.grad_accumulation - 1) // config.grad_accumulation
    total_steps = max(1, config.epochs * steps_per_epoch)

    def current_lr():
        if config.lr_schedule == "linear":
            return config.learning_rate * max(0.0, 1.0 - adam_state.step / total_steps)
        return config.learning_rate

    last_ckpt = None
    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(len(data))
        model.zero_grads()
        pending = 0
        acc_loss = 0.0

        def flush():
            nonlocal pending, acc_loss, step
            adam_step(model.params, adam_state, current_lr(),
                      weight_decay=getattr(config, "weight_decay", 0.0))
            model.zero_grads()
            step += 1
            rec = LossRecord(step=step, epoch=epoch, loss=acc_loss, aspect=aspect)
            records.append(rec)
            if loss_log is not None:
                loss_log.write(f"{rec.step},{rec.epoch},{rec.aspect},{rec.loss:.10g}\n")
                loss_log.flush()
            pending = 0
            acc_loss = 0.0

        for batch_idx in _micro_batches(order, config.batch_size):
            if mode == "pretrain":
                masked, targets = [], []
                for i in batch_idx:
                    mseq, tgt = mask_tokens(data[i], config.mask_probability, rng)
                    masked.append(mseq)
                    targets.append(tgt)
                ids, mask = pad_batch(masked)
                drop_rng = rng if model.config.dropout > 0 else None
                logits = model.forward_mlm(ids, mask, drop_rng)
                loss = mlm_loss(logits, targets)
            else:
                seqs = [data[i][0] for i in batch_idx]
                labels = np.stack([data[i][1] for i in batch_idx]).astype(np.float64)
                ids, mask = pad_batch(seqs)
                drop_rng = rng if model.config.dropout > 0 else None
                logits = model.forward_classify(ids, mask, drop_rng)
                loss = finetune_loss(logits, labels, getattr(config, "loss_kind", "bce"))

            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingError("non-finite loss; training aborted, last checkpoint retained")
            scaled = ad.scale(loss, 1.0 / config.grad_accumulation)
            scaled.backward()
            acc_loss += loss_value / config.grad_accumulation
            pending += 1
            if pending == config.grad_accumulation:
                flush()
        if pending:
            flush()

        last_ckpt = checkpoint_from_model(
            model, freeze_mask,
            optimizer_state=adam_state.to_arrays(),
            rng_state={"seed": config.seed, "epochs_completed": epoch + 1},
        )
        if checkpoint_path is not None:
            save_checkpoint(last_ckpt, checkpoint_path)

    if last_ckpt is None:
        # start_epoch >= epochs: nothing to do, still emit a checkpoint
        last_ckpt = checkpoint_from_model(
            model, freeze_mask,
            optimizer_state=adam_state.to_arrays(),
            rng_state={"seed": config.seed, "epochs_completed": start_epoch},
        )
    return last_ckpt, records


def resume_state(ckpt: Checkpoint, model: ProteinEncoder):
    """(start_epoch, AdamState) recovered from a checkpoint."""
    start_epoch = int(ckpt.rng_state.get("epochs_completed", 0))
    if ckpt.optimizer_state is None:
        return start_epoch, AdamState(model.params)
    state = AdamState.from_arrays(model.params, ckpt.optimizer_state["step"],
                                  ckpt.optimizer_state["m"], ckpt.optimizer_state["v"])
    return start_epoch, state


def config_from_json(data: dict, mode: str):
    cls = PretrainConfig if mode == "pretrain" else FinetuneConfig
    allowed = set(cls.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise TrainingError(f"unknown config field(s): {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise TrainingError(f"invalid training config: {exc}") from exc


def config_to_json(config) -> dict:
    return asdict(config)
