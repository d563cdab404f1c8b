"""Prefix layout rules, loss masking, modality dropout."""

import numpy as np
import pytest

from condlab.conditioning import (
    CondMode,
    ConditioningBundle,
    SequenceOverflowError,
    apply_modality_dropout,
    build_inputs,
    build_prefix,
    drop_text_from_cond,
    make_pseudo_self_inputs,
)
from condlab.model import ModelConfig
from condlab.tokenizer import train_bpe
from condlab.vision import Image


@pytest.fixture(scope="module")
def vocab():
    return train_bpe(["abcdefgh ijkl mnop qrstuv wxyz"], 280)


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig(n_layers=1, n_heads=2, embed_dim=16, vocab_size=280, max_pos=32)


def img():
    return Image(width=24, height=24, pixels=np.zeros(24 * 24, dtype=np.float32))


def test_layout_two_images_three_name_tokens_two_targets(vocab, cfg):
    b = ConditioningBundle(images=[img(), img()], name_ids=[7, 8, 9], target_ids=[11, 12])
    sb = build_prefix(b, vocab, cfg)
    assert sb.slots == [vocab.bos_id, ("img", 0), ("img", 1), vocab.sep_id, 7, 8, 9, vocab.sep_id, 11, 12, vocab.eos_id]
    assert sb.segment_labels == ["BOS", "IMG", "IMG", "SEP", "NAME", "NAME", "NAME", "SEP", "TGT", "TGT", "EOS"]
    assert sb.position_ids == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2]
    # predictions of 11, 12, EOS happen at the second SEP and the two targets
    assert sb.loss_mask == [0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0]
    assert sb.targets[7:10] == [11, 12, vocab.eos_id]


def test_layout_unconditional(vocab, cfg):
    sb = build_prefix(ConditioningBundle([], [], [5, 6, 7]), vocab, cfg)
    assert sb.slots == [vocab.bos_id, 5, 6, 7, vocab.eos_id]
    assert sb.position_ids == [0, 1, 2, 3, 4]
    assert sb.loss_mask == [1, 1, 1, 1, 0]


def test_layout_image_only_single_sep(vocab, cfg):
    sb = build_prefix(ConditioningBundle([img()], [], [5, 6]), vocab, cfg)
    assert sb.slots == [vocab.bos_id, ("img", 0), vocab.sep_id, 5, 6, vocab.eos_id]
    assert sb.segment_labels.count("SEP") == 1
    assert sb.position_ids == [0, 1, 2, 0, 1, 2]


def test_layout_text_only(vocab, cfg):
    sb = build_prefix(ConditioningBundle([], [7, 8], [5]), vocab, cfg)
    assert sb.slots == [vocab.bos_id, 7, 8, vocab.sep_id, 5, vocab.eos_id]
    assert sb.position_ids == [0, 1, 2, 3, 0, 1]


def test_every_sep_position_is_one_plus_previous(vocab, cfg):
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = int(rng.integers(0, 4))
        n = int(rng.integers(0, 5))
        t = int(rng.integers(1, 6))
        b = ConditioningBundle([img()] * m, list(rng.integers(5, 50, n)), list(rng.integers(5, 50, t)))
        sb = build_prefix(b, vocab, cfg)
        for i, label in enumerate(sb.segment_labels):
            if label == "SEP":
                assert sb.position_ids[i] == sb.position_ids[i - 1] + 1


def test_position_restart_at_each_segment(vocab, cfg):
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = int(rng.integers(0, 4))
        n = int(rng.integers(0, 5))
        t = int(rng.integers(1, 6))
        b = ConditioningBundle([img()] * m, list(rng.integers(5, 50, n)), list(rng.integers(5, 50, t)))
        sb = build_prefix(b, vocab, cfg)
        for i in range(1, len(sb)):
            prev, cur = sb.segment_labels[i - 1], sb.segment_labels[i]
            starts_segment = (prev == "SEP" and cur in ("NAME", "TGT")) or (cur == "IMG" and prev == "BOS")
            if prev == "SEP" and cur in ("NAME", "TGT"):
                assert sb.position_ids[i] == 0


def test_loss_mask_only_covers_target_and_eos_predictions(vocab, cfg):
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = int(rng.integers(0, 3))
        n = int(rng.integers(0, 4))
        b = ConditioningBundle([img()] * m, list(rng.integers(5, 50, n)), list(rng.integers(5, 50, 4)))
        sb = build_prefix(b, vocab, cfg)
        for i, bit in enumerate(sb.loss_mask):
            if bit:
                assert sb.segment_labels[i + 1] in ("TGT", "EOS")
        assert sum(sb.loss_mask) == 5  # four targets + EOS


def test_loss_on_name_unmasks_name_predictions(vocab, cfg):
    b = ConditioningBundle([img()], [7, 8, 9], [11])
    sb = build_prefix(b, vocab, cfg, loss_on_name=True)
    scored_next = [sb.segment_labels[i + 1] for i, bit in enumerate(sb.loss_mask) if bit]
    assert scored_next.count("NAME") == 3
    assert set(scored_next) == {"NAME", "TGT", "EOS"}


def test_attention_mask_is_causal(vocab, cfg):
    sb = build_prefix(ConditioningBundle([img()], [7], [11, 12]), vocab, cfg)
    t = len(sb)
    for i in range(t):
        for j in range(t):
            assert sb.attention_mask[i, j] == (1 if j <= i else 0)


def test_empty_targets_rejected_for_training(vocab, cfg):
    with pytest.raises(ValueError, match="target"):
        build_prefix(ConditioningBundle([], [7], []), vocab, cfg)
    sb = build_prefix(ConditioningBundle([], [7], []), vocab, cfg, for_generation=True)
    assert sb.segment_labels[-1] == "SEP"


def test_special_ids_rejected_in_bundle(vocab, cfg):
    with pytest.raises(ValueError, match="reserved"):
        build_prefix(ConditioningBundle([], [vocab.sep_id], [5]), vocab, cfg)


def test_overflow_raises_instead_of_truncating(vocab, cfg):
    long_targets = list(range(5, 5 + cfg.max_pos))
    with pytest.raises(SequenceOverflowError):
        build_prefix(ConditioningBundle([], [], long_targets), vocab, cfg)


# ---------------------------------------------------------------------------
# modality dropout


def test_dropout_zero_probability_is_identity(vocab, cfg):
    sb = build_prefix(ConditioningBundle([img()], [7, 8], [11]), vocab, cfg)
    out = apply_modality_dropout(sb, 0.0, np.random.default_rng(0))
    assert out.attention_mask.tobytes() == sb.attention_mask.tobytes()
    assert out.position_ids == sb.position_ids


def test_dropout_full_probability_masks_name_columns(vocab, cfg):
    sb = build_prefix(ConditioningBundle([img()], [7, 8], [11, 12]), vocab, cfg)
    out = apply_modality_dropout(sb, 1.0, np.random.default_rng(0))
    name_cols = [i for i, l in enumerate(sb.segment_labels) if l == "NAME"]
    trailing_sep = name_cols[-1] + 1
    for col in name_cols + [trailing_sep]:
        assert not out.attention_mask[:, col].any()
    kept = [i for i in range(len(sb)) if i not in name_cols + [trailing_sep]]
    for col in kept:
        assert np.array_equal(out.attention_mask[:, col], sb.attention_mask[:, col])
    assert out.position_ids == sb.position_ids
    assert len(out) == len(sb)


def test_dropout_never_drops_text_without_images(vocab, cfg):
    sb = build_prefix(ConditioningBundle([], [7, 8], [11]), vocab, cfg)
    out = apply_modality_dropout(sb, 1.0, np.random.default_rng(0))
    assert out.attention_mask.tobytes() == sb.attention_mask.tobytes()


def test_dropout_pattern_reproducible_across_runs(vocab, cfg):
    sbs = [build_prefix(ConditioningBundle([img()], [7, 8], [11]), vocab, cfg) for _ in range(20)]

    def pattern(seed):
        rng = np.random.default_rng(seed)
        return [apply_modality_dropout(sb, 0.5, rng).attention_mask.tobytes() for sb in sbs]

    assert pattern(7) == pattern(7)
    assert pattern(7) != pattern(8)


# ---------------------------------------------------------------------------
# conditioning-vector inputs


def test_pseudo_self_inputs_structure(vocab, cfg):
    b = ConditioningBundle([img(), img()], [7, 8, 9], [11, 12])
    spec, text = make_pseudo_self_inputs(b, vocab, cfg)
    assert spec.size == 2 + 1 + 3  # images + SEP + name
    assert spec.with_sep
    assert text.slots == [vocab.bos_id, 11, 12, vocab.eos_id]
    assert text.position_ids == [0, 1, 2, 3]


def test_pseudo_self_inputs_single_modality_has_no_sep(vocab, cfg):
    spec, _ = make_pseudo_self_inputs(ConditioningBundle([img()], [], [11]), vocab, cfg)
    assert spec.size == 1 and not spec.with_sep
    spec, _ = make_pseudo_self_inputs(ConditioningBundle([], [7, 8], [11]), vocab, cfg)
    assert spec.size == 2 and not spec.with_sep


def test_pseudo_self_inputs_empty_conditioning_is_none(vocab, cfg):
    spec, text = make_pseudo_self_inputs(ConditioningBundle([], [], [11]), vocab, cfg)
    assert spec is None
    assert text.slots == [vocab.bos_id, 11, vocab.eos_id]


def test_drop_text_from_cond(vocab, cfg):
    spec, _ = make_pseudo_self_inputs(ConditioningBundle([img()], [7, 8], [11]), vocab, cfg)
    dropped = drop_text_from_cond(spec, 1.0, np.random.default_rng(0))
    assert dropped.name_ids == [] and len(dropped.images) == 1
    kept = drop_text_from_cond(spec, 0.0, np.random.default_rng(0))
    assert kept.name_ids == [7, 8]
    # text-only conditioning is never dropped
    spec2, _ = make_pseudo_self_inputs(ConditioningBundle([], [7, 8], [11]), vocab, cfg)
    assert drop_text_from_cond(spec2, 1.0, np.random.default_rng(0)).name_ids == [7, 8]


def test_build_inputs_dispatch(vocab, cfg):
    b = ConditioningBundle([img()], [7], [11])
    sb, spec = build_inputs(b, vocab, cfg, CondMode.MANTIS_PREFIX)
    assert spec is None and ("img", 0) in sb.slots
    sb, spec = build_inputs(b, vocab, cfg, CondMode.UNCONDITIONAL)
    assert spec is None and sb.slots == [vocab.bos_id, 11, vocab.eos_id]
    sb, spec = build_inputs(b, vocab, cfg, CondMode.PSEUDO_SELF)
    assert spec is not None and sb.slots == [vocab.bos_id, 11, vocab.eos_id]
    sb, spec = build_inputs(b, vocab, cfg, CondMode.CONTEXT_ATTN)
    assert spec is not None
