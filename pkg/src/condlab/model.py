"""Miniature GPT-2-style decoder with pluggable conditioning and generation.

Pre-norm blocks, learned absolute position embeddings (restarting per
modality segment, so max_pos bounds segment length rather than total
length), and a weight-tied output head by default.  Input embeddings are
token-or-injected-image embeddings plus position embeddings.

Conditioning hooks:

* prefix mode: conditioning lives in the SequenceBatch itself (image slots
  are encoded and injected by the forward pass, so the image encoder trains
  end-to-end);
* key/value injection: every attention layer adds bonus attention mass over
  per-layer projections of the conditioning vectors; with those projections
  zeroed the model is exactly the unconditional one, bit for bit;
* cross-attention: a residual encoder-decoder sublayer after every block;
  with its output projection zeroed the sublayer is an exact identity.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    cond_softmax,
    embedding_lookup,
    gelu,
    layernorm,
    matmul,
    mul,
    no_grad,
    slice_cols,
    softmax_rows,
    transpose,
)
from .conditioning import CondMode, CondSpec, ConditioningBundle, SequenceBatch, build_inputs
from .vision import ImageProjector

CHECKPOINT_MAGIC = b"MNTS"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 64
    vocab_size: int = 384
    max_pos: int = 64
    cond_mode: CondMode = CondMode.MANTIS_PREFIX
    max_images: int = 5
    n_feat: int = 32
    img_size: int = 24
    tied_head: bool = True
    proj_bias: bool = True

    def __post_init__(self):
        if isinstance(self.cond_mode, str):
            self.cond_mode = CondMode(self.cond_mode)
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cond_mode"] = self.cond_mode.value
        return d


@dataclass
class GenerationConfig:
    strategy: str = "greedy"  # greedy | top_k
    k: int = 1
    temperature: float = 1.0
    max_new_tokens: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "top_k"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def make_context_attn_layer(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Cross-attention sublayer parameters for one decoder block.

    Queries come from decoder states, keys/values from the conditioning
    vectors; with the output projection zeroed the sublayer is an exact
    identity through its residual.
    """
    d = cfg.embed_dim
    layer = {
        "wq": Tensor(rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True),
        "wk": Tensor(rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True),
        "wv": Tensor(rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True),
        "wo": Tensor(np.zeros((d, d), dtype=dtype), requires_grad=True),
    }
    for name in ("bq", "bk", "bv", "bo"):
        layer[name] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    return layer


class TransformerLM:
    """Decoder-only transformer over SequenceBatch slots."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        d, v = cfg.embed_dim, cfg.vocab_size
        base = np.random.default_rng(np.random.SeedSequence([seed, 0]))

        def normal(shape):
            return Tensor(base.normal(0.0, 0.02, shape).astype(dtype), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        self.tok_emb = normal((v, d))
        self.pos_emb = normal((cfg.max_pos, d))
        self.blocks = []
        for _ in range(cfg.n_layers):
            self.blocks.append(
                {
                    "ln1.g": ones(d),
                    "ln1.b": zeros(d),
                    "attn.wq": normal((d, d)),
                    "attn.bq": zeros(d),
                    "attn.wk": normal((d, d)),
                    "attn.bk": zeros(d),
                    "attn.wv": normal((d, d)),
                    "attn.bv": zeros(d),
                    "attn.wo": normal((d, d)),
                    "attn.bo": zeros(d),
                    "ln2.g": ones(d),
                    "ln2.b": zeros(d),
                    "mlp.w1": normal((d, 4 * d)),
                    "mlp.b1": zeros(4 * d),
                    "mlp.w2": normal((4 * d, d)),
                    "mlp.b2": zeros(d),
                }
            )
        self.lnf_g = ones(d)
        self.lnf_b = zeros(d)
        self.head_w = None if cfg.tied_head else normal((d, v))

        self.projector = ImageProjector(
            embed_dim=d,
            n_feat=cfg.n_feat,
            img_size=cfg.img_size,
            max_images=cfg.max_images,
            use_bias=cfg.proj_bias,
            seed=seed,
            dtype=dtype,
        )

        mode_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.kv_inject = []
        self.cross = []
        if cfg.cond_mode == CondMode.PSEUDO_SELF:
            for _ in range(cfg.n_layers):
                self.kv_inject.append(
                    {
                        "wk": Tensor(mode_rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True),
                        "wv": Tensor(mode_rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True),
                    }
                )
        elif cfg.cond_mode == CondMode.CONTEXT_ATTN:
            for _ in range(cfg.n_layers):
                layer = make_context_attn_layer(cfg, mode_rng, dtype=dtype)
                # scratch training wants gradient flow from step one, so the
                # output projection starts random like everything else; use
                # zero_conditioning_parameters() for the exact-identity start
                layer["wo"] = Tensor(mode_rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True)
                self.cross.append(layer)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            for k, t in blk.items():
                params[f"block{i}.{k}"] = t
        params["lnf.g"] = self.lnf_g
        params["lnf.b"] = self.lnf_b
        if self.head_w is not None:
            params["head.w"] = self.head_w
        params.update(self.projector.named_parameters())
        for i, layer in enumerate(self.kv_inject):
            params[f"kvinj{i}.wk"] = layer["wk"]
            params[f"kvinj{i}.wv"] = layer["wv"]
        for i, layer in enumerate(self.cross):
            for k, t in layer.items():
                params[f"xattn{i}.{k}"] = t
        return params

    def param_groups(self) -> dict[str, list[str]]:
        names = list(self.named_parameters())
        groups = {
            "embeddings": [n for n in names if n in ("tok_emb", "pos_emb")],
            "blocks": [n for n in names if n.startswith("block")],
            "head": ["head.w"] if self.head_w is not None else ["tok_emb"],
            "image_encoder": [n for n in names if n.startswith("vis.conv")],
            "projection": [n for n in names if n.startswith("vis.proj")],
        }
        mech = [n for n in names if n.startswith(("kvinj", "xattn"))]
        if mech:
            groups["mechanism"] = mech
        return groups

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def embed_cond(self, spec: CondSpec) -> Tensor:
        """Materialize conditioning vectors (c x D): projected images, a SEP
        embedding between modalities, then name token embeddings, each with
        segment-restarting position embeddings added."""
        pieces = []
        pos: list[int] = []
        if spec.images:
            pieces.append(self.projector.encode_images(spec.images))
            pos.extend(range(len(spec.images)))
        if spec.with_sep:
            pieces.append(embedding_lookup(self.tok_emb, [self._sep_id_hint]))
            pos.append(len(spec.images))
        if spec.name_ids:
            pieces.append(embedding_lookup(self.tok_emb, spec.name_ids))
            pos.extend(range(len(spec.name_ids)))
        vecs = concat_rows(pieces) if len(pieces) > 1 else pieces[0]
        return add(vecs, embedding_lookup(self.pos_emb, pos))

    # the separator id is a vocab property; the model caches it at forward
    # time so embed_cond stays callable without threading the vocab through
    _sep_id_hint: int = 0

    def set_sep_id(self, sep_id: int):
        self._sep_id_hint = sep_id

    def _embed_slots(self, sb: SequenceBatch) -> Tensor:
        pieces = []
        i, t = 0, len(sb.slots)
        while i < t:
            j = i
            if isinstance(sb.slots[i], tuple):
                ks = []
                while j < t and isinstance(sb.slots[j], tuple):
                    ks.append(sb.slots[j][1])
                    j += 1
                pieces.append(self.projector.encode_images([sb.images[k] for k in ks]))
            else:
                ids = []
                while j < t and not isinstance(sb.slots[j], tuple):
                    ids.append(sb.slots[j])
                    j += 1
                pieces.append(embedding_lookup(self.tok_emb, ids))
            i = j
        x = concat_rows(pieces) if len(pieces) > 1 else pieces[0]
        return add(x, embedding_lookup(self.pos_emb, sb.position_ids))

    def _dropout(self, x: Tensor, p: float, rng) -> Tensor:
        if p <= 0.0 or rng is None:
            return x
        keep = (rng.random(x.data.shape) >= p).astype(self.dtype) / self.dtype(1.0 - p)
        return mul(x, Tensor(keep))

    def _self_attention(self, a: Tensor, addmask: Tensor, cond_k, cond_v, blk) -> Tensor:
        cfg = self.cfg
        dh = cfg.embed_dim // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)
        t = a.data.shape[0]
        q = add(matmul(a, blk["attn.wq"]), blk["attn.bq"])
        k = add(matmul(a, blk["attn.wk"]), blk["attn.bk"])
        v = add(matmul(a, blk["attn.wv"]), blk["attn.bv"])
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = slice_cols(q, lo, hi)
            kh = slice_cols(k, lo, hi)
            vh = slice_cols(v, lo, hi)
            scores = add(mul(matmul(qh, transpose(kh)), scale), addmask)
            if cond_k is None:
                ctx = matmul(softmax_rows(scores), vh)
            else:
                ckh = slice_cols(cond_k, lo, hi)
                cvh = slice_cols(cond_v, lo, hi)
                cscores = mul(matmul(qh, transpose(ckh)), scale)
                joint = cond_softmax(scores, cscores)
                c = ckh.data.shape[0]
                ctx = add(
                    matmul(slice_cols(joint, 0, t), vh),
                    matmul(slice_cols(joint, t, t + c), cvh),
                )
            heads.append(ctx)
        merged = concat_cols(heads) if len(heads) > 1 else heads[0]
        return add(matmul(merged, blk["attn.wo"]), blk["attn.bo"])

    def _cross_attention(self, x: Tensor, cond: Tensor, layer) -> Tensor:
        cfg = self.cfg
        dh = cfg.embed_dim // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)
        q = add(matmul(x, layer["wq"]), layer["bq"])
        k = add(matmul(cond, layer["wk"]), layer["bk"])
        v = add(matmul(cond, layer["wv"]), layer["bv"])
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            probs = softmax_rows(mul(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), scale))
            heads.append(matmul(probs, slice_cols(v, lo, hi)))
        merged = concat_cols(heads) if len(heads) > 1 else heads[0]
        return add(matmul(merged, layer["wo"]), layer["bo"])

    def forward(self, sb: SequenceBatch, cond: CondSpec | None = None, dropout_p: float = 0.0, rng=None) -> Tensor:
        """Next-token logits (T x V) for one assembled sequence."""
        cfg = self.cfg
        if max(sb.position_ids) >= cfg.max_pos:
            raise ValueError(f"position id {max(sb.position_ids)} >= max_pos {cfg.max_pos}")
        if cond is not None and cfg.cond_mode not in (CondMode.PSEUDO_SELF, CondMode.CONTEXT_ATTN):
            raise ValueError(f"conditioning vectors not supported in mode {cfg.cond_mode.value}")

        x = self._embed_slots(sb)
        neg = np.array(-np.inf, dtype=self.dtype)
        addmask = Tensor(np.where(sb.attention_mask.astype(bool), self.dtype(0.0), neg))

        cond_vecs = None
        if cond is not None and cond.size > 0:
            cond_vecs = self.embed_cond(cond)

        for li, blk in enumerate(self.blocks):
            cond_k = cond_v = None
            if cond_vecs is not None and cfg.cond_mode == CondMode.PSEUDO_SELF:
                cond_k = matmul(cond_vecs, self.kv_inject[li]["wk"])
                cond_v = matmul(cond_vecs, self.kv_inject[li]["wv"])
            a = layernorm(x, blk["ln1.g"], blk["ln1.b"])
            x = add(x, self._dropout(self._self_attention(a, addmask, cond_k, cond_v, blk), dropout_p, rng))
            h = layernorm(x, blk["ln2.g"], blk["ln2.b"])
            m1 = gelu(add(matmul(h, blk["mlp.w1"]), blk["mlp.b1"]))
            x = add(x, self._dropout(add(matmul(m1, blk["mlp.w2"]), blk["mlp.b2"]), dropout_p, rng))
            if cond_vecs is not None and cfg.cond_mode == CondMode.CONTEXT_ATTN:
                x = add(x, self._cross_attention(x, cond_vecs, self.cross[li]))

        xf = layernorm(x, self.lnf_g, self.lnf_b)
        if self.head_w is not None:
            return matmul(xf, self.head_w)
        return matmul(xf, transpose(self.tok_emb))


def zero_conditioning_parameters(model: TransformerLM):
    """Zero the mechanism-specific projections so the model's logits equal the
    unconditional decoder's exactly: key/value-injection K/V projections, or
    the cross-attention output projection and bias."""
    for layer in model.kv_inject:
        layer["wk"].data = np.zeros_like(layer["wk"].data)
        layer["wv"].data = np.zeros_like(layer["wv"].data)
    for layer in model.cross:
        layer["wo"].data = np.zeros_like(layer["wo"].data)
        layer["bo"].data = np.zeros_like(layer["bo"].data)


def generate(model: TransformerLM, bundle: ConditioningBundle, gen: GenerationConfig, vocab) -> list[int]:
    """Sample a continuation conditioned per the model's mode.

    Greedy decoding is argmax with lowest-id tie-break; top_k with k=1 is
    identical.  BOS/SEP/PAD are banned from sampling (they are never valid
    text); EOS stops decoding, as do max_new_tokens and the position budget.
    """
    model.set_sep_id(vocab.sep_id)
    rng = np.random.default_rng(gen.seed)
    banned = [vocab.bos_id, vocab.sep_id, vocab.pad_id]
    out: list[int] = []
    with no_grad():
        for _ in range(gen.max_new_tokens):
            working = ConditioningBundle(bundle.images, bundle.name_ids, out)
            sb, cond = build_inputs(working, vocab, model.cfg, model.cfg.cond_mode, for_generation=True)
            logits = model.forward(sb, cond).data[-1].copy()
            logits[banned] = -np.inf
            if gen.strategy == "greedy" or gen.k == 1:
                nxt = int(np.argmax(logits))
            else:
                vals = logits / gen.temperature
                top = np.argsort(-vals, kind="stable")[: gen.k]
                p = np.exp(vals[top] - vals[top].max())
                p /= p.sum()
                nxt = int(rng.choice(top, p=p))
            if nxt == vocab.eos_id:
                break
            out.append(nxt)
            next_pos = sb.position_ids[-1] + 1 if sb.segment_labels[-1] == "TGT" else 1
            if next_pos >= model.cfg.max_pos - 1:
                break
    return out


# ---------------------------------------------------------------------------
# checkpoint container: magic "MNTS", u16 version, u32 header length,
# JSON header (config + named shape table), then f32 blobs in table order


def save_checkpoint(model: TransformerLM, path, vocab_hash: str = "", run_config: dict | None = None):
    if model.dtype != np.float32:
        raise ValueError("checkpoint format stores float32 parameters only")
    params = model.named_parameters()
    header = {
        "model_config": model.cfg.to_dict(),
        "tensors": [[name, list(t.data.shape)] for name, t in params.items()],
        "vocab_hash": vocab_hash,
        "run_config": run_config,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for t in params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[TransformerLM, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    table = header["tensors"]
    payload = blob[10 + hlen :]
    expected = sum(int(np.prod(shape)) for _, shape in table) * 4
    if len(payload) != expected:
        raise CheckpointError(f"{path}: parameter payload is {len(payload)} bytes, expected {expected}")

    cfg = ModelConfig(**header["model_config"])
    model = TransformerLM(cfg, seed=0)
    params = model.named_parameters()
    if [n for n, _ in table] != list(params):
        raise CheckpointError(f"{path}: tensor table does not match model configuration")
    off = 0
    for name, shape in table:
        t = params[name]
        if list(t.data.shape) != list(shape):
            raise CheckpointError(f"{path}: shape mismatch for {name}: file {shape}, model {list(t.data.shape)}")
        n = int(np.prod(shape)) * 4
        t.data = np.frombuffer(payload[off : off + n], dtype="<f4").reshape(shape).copy()
        off += n
    return model, header
