"""Final calibration for the acceptance experiments (scratch file)."""
import time

import numpy as np

from condlab import *
from condlab.conditioning import ConditioningBundle
from condlab.datakit import SynthSpec, attribute_recall, generate as gen_data, split_of
from condlab.metrics import EvalCorpus, score_all
from condlab.tokenizer import decode, encode, train_bpe
from condlab.trainer import TrainConfig, train

t0 = time.perf_counter()
samples = gen_data(SynthSpec(n_samples=2500, seed=11))
splits = {"train": [], "val": [], "test": []}
for s in samples:
    splits[split_of(s.id)].append(s)
print({k: len(v) for k, v in splits.items()}, flush=True)
corpus = [s.name for s in splits["train"]] + [s.description for s in splits["train"]]
v = train_bpe(corpus, 384)


def bundles(ss, m):
    return [ConditioningBundle(s.images[:m], encode(v, s.name), encode(v, s.description)) for s in ss]


def evaluate(model, m, tag):
    gens, img_rec, name_rec = [], [], []
    gc = GenerationConfig(max_new_tokens=40)
    for s in splits["test"]:
        ids = generate(model, ConditioningBundle(s.images[:m], encode(v, s.name), []), gc, v)
        text = decode(v, ids)
        gens.append(text)
        img_rec.append(attribute_recall(text, s.attributes, "image_only"))
        name_rec.append(attribute_recall(text, s.attributes, "name_only"))
    scores = score_all(EvalCorpus.from_strings(gens, [[s.description] for s in splits["test"]]))
    scores["img_recall"] = float(np.mean(img_rec))
    scores["name_recall"] = float(np.mean(name_rec))
    print(tag, {k: round(x, 4) for k, x in scores.items()}, flush=True)
    return scores


# conditioning-efficacy arms
for mode in (CondMode.MANTIS_PREFIX, CondMode.UNCONDITIONAL):
    cfg = ModelConfig(n_layers=2, n_heads=4, embed_dim=64, vocab_size=v.size, max_pos=64, cond_mode=mode)
    model = TransformerLM(cfg, seed=0)
    tc = TrainConfig(lr_peak=1e-3, total_steps=1500, warmup_steps=100, batch_size=16, p_text_dropout=0.0, seed=0)
    t1 = time.perf_counter()
    rep = train(model, v, bundles(splits["train"], 1), tc)
    print(f"{mode.value}: {time.perf_counter()-t1:.0f}s loss {rep.losses[0]:.3f}->{rep.losses[-1]:.3f}", flush=True)
    evaluate(model, 1, f"C6 {mode.value}")

# multi-image arms
for m in (1, 3):
    for seed in (1, 2, 3):
        cfg = ModelConfig(n_layers=2, n_heads=4, embed_dim=64, vocab_size=v.size, max_pos=64, cond_mode=CondMode.MANTIS_PREFIX)
        model = TransformerLM(cfg, seed=seed)
        tc = TrainConfig(lr_peak=1e-3, total_steps=800, warmup_steps=80, batch_size=16, p_text_dropout=0.0, seed=seed)
        t1 = time.perf_counter()
        train(model, v, bundles(splits["train"], m), tc)
        img = np.mean(
            [
                attribute_recall(
                    decode(v, generate(model, ConditioningBundle(s.images[:m], encode(v, s.name), []), GenerationConfig(max_new_tokens=40), v)),
                    s.attributes,
                    "image_only",
                )
                for s in splits["test"]
            ]
        )
        print(f"C7 m={m} seed={seed}: {time.perf_counter()-t1:.0f}s img {img:.4f}", flush=True)

print("TOTAL", round(time.perf_counter() - t0), "s", flush=True)
