"""Calibration run for the conditioning-efficacy experiment (scratch file)."""
import time

import numpy as np

from condlab import *
from condlab.conditioning import ConditioningBundle
from condlab.datakit import SynthSpec, attribute_recall, generate as gen_data, split_of
from condlab.tokenizer import decode, encode, train_bpe
from condlab.trainer import TrainConfig, train
from condlab.metrics import EvalCorpus, score_all

t0 = time.perf_counter()
samples = gen_data(SynthSpec(n_samples=2500, seed=11))
splits = {"train": [], "val": [], "test": []}
for s in samples:
    splits[split_of(s.id)].append(s)
print({k: len(v) for k, v in splits.items()})
corpus = [s.name for s in splits["train"]] + [s.description for s in splits["train"]]
v = train_bpe(corpus, 384)

def bundles(ss, m):
    return [ConditioningBundle(s.images[:m], encode(v, s.name), encode(v, s.description)) for s in ss]

results = {}
for mode, m in ((CondMode.MANTIS_PREFIX, 1), (CondMode.UNCONDITIONAL, 1)):
    cfg = ModelConfig(n_layers=2, n_heads=4, embed_dim=64, vocab_size=v.size, max_pos=64, cond_mode=mode)
    model = TransformerLM(cfg, seed=0)
    tc = TrainConfig(total_steps=1500, warmup_steps=100, batch_size=16, p_text_dropout=0.0, seed=0)
    t1 = time.perf_counter()
    rep = train(model, v, bundles(splits["train"], m), tc, val_bundles=bundles(splits["val"][:100], m))
    print(f"{mode.value}: train {time.perf_counter()-t1:.0f}s loss {rep.losses[0]:.3f}->{rep.losses[-1]:.3f} eval {rep.final_eval_loss:.3f}")
    gens, img_rec, name_rec = [], [], []
    gc = GenerationConfig(max_new_tokens=40)
    t1 = time.perf_counter()
    for s in splits["test"]:
        ids = generate(model, ConditioningBundle(s.images[:m], encode(v, s.name), []), gc, v)
        text = decode(v, ids)
        gens.append(text)
        img_rec.append(attribute_recall(text, s.attributes, "image_only"))
        name_rec.append(attribute_recall(text, s.attributes, "name_only"))
    print(f"  gen {time.perf_counter()-t1:.0f}s; sample: {gens[0]!r}")
    corpus_eval = EvalCorpus.from_strings(gens, [[s.description] for s in splits["test"]])
    scores = score_all(corpus_eval)
    scores["img_recall"] = float(np.mean(img_rec))
    scores["name_recall"] = float(np.mean(name_rec))
    results[mode.value] = scores
    print(f"  {scores}")

print("\nTOTAL", round(time.perf_counter() - t0), "s")
for k, sc in results.items():
    print(k, {m: round(x, 4) for m, x in sc.items()})
