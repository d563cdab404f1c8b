"""Sequence assembly for the conditioning mechanisms plus modality dropout.

The prefix layout is [BOS, IMG x m, SEP, NAME x n, SEP, TGT..., EOS] with
position ids restarting at zero for every modality segment: BOS occupies
position 0 of the first segment present, each SEP sits at one plus the
previous token's position, and the target segment (with its closing EOS)
restarts from zero.  The loss mask selects predictions of TGT tokens and
EOS only, unless ``loss_on_name`` additionally unmasks NAME predictions.

Key/value-injection and cross-attention conditioning keep the decoded text
as a plain [BOS, TGT..., EOS] batch and carry the conditioning content in a
separate ``CondSpec`` (images + name ids + separator); the model embeds the
spec into the actual conditioning vectors, since embedding tables live on
the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

SEG_BOS = "BOS"
SEG_IMG = "IMG"
SEG_SEP = "SEP"
SEG_NAME = "NAME"
SEG_TGT = "TGT"
SEG_EOS = "EOS"
SEG_PAD = "PAD"


class CondMode(str, Enum):
    MANTIS_PREFIX = "mantis"
    PSEUDO_SELF = "pseudo_self"
    CONTEXT_ATTN = "context_attn"
    UNCONDITIONAL = "unconditional"


class SequenceOverflowError(ValueError):
    """A segment does not fit the configured position budget."""


@dataclass
class ConditioningBundle:
    """One sample's raw modalities: images, title token ids, target token ids."""

    images: list
    name_ids: list[int]
    target_ids: list[int]


@dataclass
class SequenceBatch:
    """Model-ready sequence: token/image slots, positions, masks, labels.

    ``slots`` entries are either a token id (int) or ``("img", k)`` indexing
    into ``images``; image slots have no vocabulary id.  ``loss_mask[i]``
    scores position i's logits against ``targets[i]`` (the token at i+1);
    masked entries carry a pad placeholder that is never read.
    """

    slots: list
    images: list
    position_ids: list[int]
    attention_mask: np.ndarray
    loss_mask: list[int]
    segment_labels: list[str]
    targets: list[int]

    def __len__(self):
        return len(self.slots)


@dataclass
class CondSpec:
    """Conditioning content for the key/value and cross-attention mechanisms."""

    images: list
    name_ids: list[int]

    @property
    def with_sep(self) -> bool:
        return bool(self.images) and bool(self.name_ids)

    @property
    def size(self) -> int:
        if not self.images and not self.name_ids:
            return 0
        return len(self.images) + len(self.name_ids) + (1 if self.with_sep else 0)


def _check_no_specials(ids, vocab, what):
    bad = set(ids) & set(vocab.special_ids)
    if bad:
        raise ValueError(f"{what} contains reserved ids {sorted(bad)}")


def build_prefix(
    bundle: ConditioningBundle,
    vocab,
    cfg,
    loss_on_name: bool = False,
    for_generation: bool = False,
) -> SequenceBatch:
    """Assemble one prefixed training sequence (or a generation prompt).

    With ``for_generation`` the closing EOS is omitted and target_ids may be
    empty (the tokens decoded so far); the model continues from the last
    position.  Raises SequenceOverflowError instead of silently truncating
    when any segment exceeds ``cfg.max_pos``.
    """
    _check_no_specials(bundle.name_ids, vocab, "name_ids")
    _check_no_specials(bundle.target_ids, vocab, "target_ids")
    if not for_generation and not bundle.target_ids:
        raise ValueError("training sample has empty target_ids")
    if len(bundle.images) > cfg.max_images:
        raise ValueError(f"{len(bundle.images)} images exceeds max_images={cfg.max_images}")

    slots: list = []
    labels: list[str] = []
    positions: list[int] = []
    first_segment = True

    def emit(slot, label, pos):
        slots.append(slot)
        labels.append(label)
        positions.append(pos)

    if bundle.images:
        emit(vocab.bos_id, SEG_BOS, 0)
        for k in range(len(bundle.images)):
            emit(("img", k), SEG_IMG, k + 1)
        emit(vocab.sep_id, SEG_SEP, len(bundle.images) + 1)
        first_segment = False
    if bundle.name_ids:
        base = 0
        if first_segment:
            emit(vocab.bos_id, SEG_BOS, 0)
            base = 1
            first_segment = False
        for j, tid in enumerate(bundle.name_ids):
            emit(tid, SEG_NAME, base + j)
        emit(vocab.sep_id, SEG_SEP, base + len(bundle.name_ids))

    base = 0
    if first_segment:
        emit(vocab.bos_id, SEG_BOS, 0)
        base = 1
    for j, tid in enumerate(bundle.target_ids):
        emit(tid, SEG_TGT, base + j)
    if not for_generation:
        emit(vocab.eos_id, SEG_EOS, base + len(bundle.target_ids))

    if positions and max(positions) >= cfg.max_pos:
        raise SequenceOverflowError(
            f"segment position {max(positions)} exceeds max_pos={cfg.max_pos} "
            f"(m={len(bundle.images)}, n={len(bundle.name_ids)}, t={len(bundle.target_ids)})"
        )

    t = len(slots)
    scored = {SEG_TGT, SEG_EOS} | ({SEG_NAME} if loss_on_name else set())
    loss_mask = [0] * t
    targets = [vocab.pad_id] * t
    for i in range(t - 1):
        if labels[i + 1] in scored:
            loss_mask[i] = 1
            targets[i] = slots[i + 1]
    return SequenceBatch(
        slots=slots,
        images=list(bundle.images),
        position_ids=positions,
        attention_mask=np.tril(np.ones((t, t), dtype=np.uint8)),
        loss_mask=loss_mask,
        segment_labels=labels,
        targets=targets,
    )


def apply_modality_dropout(sb: SequenceBatch, p_text: float, rng: np.random.Generator) -> SequenceBatch:
    """With probability p_text, make all NAME columns (and their trailing SEP)
    unattendable for this sample.

    Shapes and position ids are unchanged; a sample without images keeps its
    text path (both modalities are never dropped together).
    """
    if not 0.0 <= p_text <= 1.0:
        raise ValueError(f"p_text must be in [0, 1], got {p_text}")
    drop = rng.random() < p_text
    name_cols = [i for i, l in enumerate(sb.segment_labels) if l == SEG_NAME]
    has_images = any(l == SEG_IMG for l in sb.segment_labels)
    if not (drop and name_cols and has_images):
        return sb
    cols = list(name_cols)
    trailing = name_cols[-1] + 1
    if trailing < len(sb) and sb.segment_labels[trailing] == SEG_SEP:
        cols.append(trailing)
    mask = sb.attention_mask.copy()
    mask[:, cols] = 0
    return replace(sb, attention_mask=mask)


def drop_text_from_cond(spec: CondSpec, p_text: float, rng: np.random.Generator) -> CondSpec:
    """CondSpec analogue of modality dropout: remove name tokens (and the
    implicit separator) with probability p_text when images are present."""
    if not 0.0 <= p_text <= 1.0:
        raise ValueError(f"p_text must be in [0, 1], got {p_text}")
    drop = rng.random() < p_text
    if drop and spec.name_ids and spec.images:
        return CondSpec(images=spec.images, name_ids=[])
    return spec


def make_pseudo_self_inputs(
    bundle: ConditioningBundle,
    vocab,
    cfg,
    for_generation: bool = False,
) -> tuple[CondSpec | None, SequenceBatch]:
    """Split a bundle into conditioning content and a plain text batch.

    The conditioning tokens (projected images, a separator, then name token
    embeddings) never join the decoded sequence; each attention layer sees
    per-layer key/value projections of them instead.  The text batch is the
    unconditional [BOS, TGT..., EOS] layout.
    """
    _check_no_specials(bundle.name_ids, vocab, "name_ids")
    text = build_prefix(
        ConditioningBundle([], [], bundle.target_ids), vocab, cfg, for_generation=for_generation
    )
    spec = CondSpec(images=list(bundle.images), name_ids=list(bundle.name_ids))
    if len(spec.images) > cfg.max_images:
        raise ValueError(f"{len(spec.images)} images exceeds max_images={cfg.max_images}")
    return (spec if spec.size else None), text


def build_inputs(
    bundle: ConditioningBundle,
    vocab,
    cfg,
    mode: CondMode,
    loss_on_name: bool = False,
    for_generation: bool = False,
) -> tuple[SequenceBatch, CondSpec | None]:
    """Dispatch sequence assembly for a conditioning mode."""
    if mode == CondMode.MANTIS_PREFIX:
        sb = build_prefix(bundle, vocab, cfg, loss_on_name=loss_on_name, for_generation=for_generation)
        return sb, None
    if mode == CondMode.UNCONDITIONAL:
        sb = build_prefix(
            ConditioningBundle([], [], bundle.target_ids), vocab, cfg, for_generation=for_generation
        )
        return sb, None
    if mode in (CondMode.PSEUDO_SELF, CondMode.CONTEXT_ATTN):
        spec, sb = make_pseudo_self_inputs(bundle, vocab, cfg, for_generation=for_generation)
        return sb, spec
    raise ValueError(f"unknown conditioning mode: {mode}")
