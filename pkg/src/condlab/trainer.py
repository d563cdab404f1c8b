"""Supervised training loop: masked LM loss, AdamW, linear warmup/decay.

All randomness (shuffling, modality dropout, in-block dropout) comes from
generators derived from the config seed, so a fixed config reproduces the
loss series and the final checkpoint bit for bit on one machine.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .autograd import Tensor, backward, masked_cross_entropy, no_grad
from .conditioning import CondMode, apply_modality_dropout, build_inputs, drop_text_from_cond
from .model import TransformerLM, save_checkpoint
from .tokenizer import vocab_hash


@dataclass
class TrainConfig:
    lr_peak: float = 3e-4
    warmup_steps: int = 50
    total_steps: int = 600
    batch_size: int = 16
    p_text_dropout: float = 0.3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss_on_name: bool = False
    block_dropout: float = 0.1
    grad_clip: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if not 0.0 <= self.p_text_dropout <= 1.0:
            raise ValueError("p_text_dropout must be in [0, 1]")


@dataclass
class TrainReport:
    losses: list[float]
    final_eval_loss: float | None
    wall_time_s: float
    config: dict
    build_id: str
    skipped_empty_loss: int = 0
    checkpoint_path: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear 0 -> lr_peak over warmup, then linear lr_peak -> 0 at total_steps."""
    if not 0 <= step <= tc.total_steps:
        raise ValueError(f"step {step} outside [0, {tc.total_steps}]")
    if step < tc.warmup_steps:
        return tc.lr_peak * step / tc.warmup_steps
    span = max(1, tc.total_steps - tc.warmup_steps)
    return tc.lr_peak * (tc.total_steps - step) / span


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict, lr: float, tc: TrainConfig):
    """One AdamW update with decoupled weight decay, in place.

    Decay multiplies the parameter directly by (1 - lr*wd); the adaptive step
    uses bias-corrected first/second moments.  A NaN gradient aborts with the
    offending parameter's name.
    """
    b1, b2 = tc.betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter {name!r}; aborting step {t}")
        if name not in state:
            state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state[name] = (m, v)
        if tc.weight_decay:
            p.data = p.data * (1.0 - lr * tc.weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + tc.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def _sample_loss(model: TransformerLM, bundle, vocab, tc: TrainConfig, mode: CondMode, mod_rng, blk_rng, training: bool):
    sb, cond = build_inputs(bundle, vocab, model.cfg, mode, loss_on_name=tc.loss_on_name)
    if training:
        if mode == CondMode.MANTIS_PREFIX:
            sb = apply_modality_dropout(sb, tc.p_text_dropout, mod_rng)
        elif cond is not None:
            cond = drop_text_from_cond(cond, tc.p_text_dropout, mod_rng)
    if sum(sb.loss_mask) == 0:
        return None
    dropout_p = tc.block_dropout if training else 0.0
    logits = model.forward(sb, cond, dropout_p=dropout_p, rng=blk_rng if training else None)
    return masked_cross_entropy(logits, sb.targets, sb.loss_mask)


def evaluate_loss(model: TransformerLM, bundles, vocab, tc: TrainConfig) -> float:
    """Mean masked NLL over a split, no dropout, no gradient tracking."""
    total, n = 0.0, 0
    with no_grad():
        for b in bundles:
            loss = _sample_loss(model, b, vocab, tc, model.cfg.cond_mode, None, None, training=False)
            if loss is not None:
                total += loss.item()
                n += 1
    return total / max(1, n)


def train(
    model: TransformerLM,
    vocab,
    train_bundles,
    tc: TrainConfig,
    val_bundles=None,
    checkpoint_path=None,
    run_config: dict | None = None,
) -> TrainReport:
    """Run the full optimization loop and return the report.

    Batches cycle epochs with a per-epoch reshuffle; samples whose loss mask
    is empty are skipped and counted.  A checkpoint is written every
    ``checkpoint_every`` steps (when a path is given) and at the end.
    """
    if not train_bundles:
        raise ValueError("train: dataset is empty")
    model.set_sep_id(vocab.sep_id)
    vhash = vocab_hash(vocab)
    mode = model.cfg.cond_mode
    root = np.random.SeedSequence(tc.seed)
    shuffle_rng, mod_rng, blk_rng = (np.random.default_rng(s) for s in root.spawn(3))

    params = model.named_parameters()
    state: dict = {}
    losses: list[float] = []
    skipped = 0
    order: list[int] = []
    t0 = time.perf_counter()

    for step in range(tc.total_steps):
        batch_idx = []
        while len(batch_idx) < tc.batch_size:
            if not order:
                order = list(shuffle_rng.permutation(len(train_bundles)))
            batch_idx.append(order.pop())
        model.zero_grad()
        sample_losses = []
        for i in batch_idx:
            loss = _sample_loss(model, train_bundles[i], vocab, tc, mode, mod_rng, blk_rng, training=True)
            if loss is None:
                skipped += 1
                continue
            sample_losses.append(loss)
        if not sample_losses:
            continue
        total = sample_losses[0]
        for sl in sample_losses[1:]:
            total = total + sl
        total = total * (1.0 / len(sample_losses))
        backward(total)
        grads = {name: p.grad for name, p in params.items()}
        clip_global_norm(grads, tc.grad_clip)
        adamw_step(params, grads, state, lr_at(step + 1, tc), tc)
        losses.append(total.item())
        if checkpoint_path and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, vocab_hash=vhash, run_config=run_config)

    final_eval = evaluate_loss(model, val_bundles, vocab, tc) if val_bundles else None
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, vocab_hash=vhash, run_config=run_config)
    return TrainReport(
        losses=losses,
        final_eval_loss=final_eval,
        wall_time_s=time.perf_counter() - t0,
        config=run_config if run_config is not None else {"train": asdict(tc)},
        build_id=f"condlab {__version__}",
        skipped_empty_loss=skipped,
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
    )
