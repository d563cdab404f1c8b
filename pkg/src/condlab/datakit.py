"""Deterministic synthetic dataset: glyph images + titled descriptions.

Each sample is a fashion-like item whose visual attributes (shape, pattern,
size) appear only in its rendered 24x24 images and whose textual attributes
(material, gender) appear only in its title; the description mentions all
five attribute words verbatim.  That separation is what makes multimodal
conditioning measurable: image-only attributes can be produced correctly
only by a model that actually reads the pixels.

Rendering is binary (no anti-aliasing) with a +/-2 px translation jitter per
image, giving each item several "perspectives".  Generation is deterministic
per (seed, sample index); the train/val/test split is a stable hash of the
sample id, so membership never changes when the corpus grows.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .metrics import tokenize
from .vision import Image

log = logging.getLogger(__name__)

SHAPES = ("square", "triangle", "circle", "cross")
PATTERNS = ("solid", "striped", "dotted")
SIZES = ("small", "large")
MATERIALS = ("cotton", "denim", "velour", "silk")
GENDERS = ("mens", "womens")

IMAGE_ATTRS = ("shape", "pattern", "size")
NAME_ATTRS = ("material", "gender")

_NOUNS = ("tote", "scarf", "jacket", "tunic", "beanie", "wrap", "vest", "sash")
_EXTRAS = ("classic", "modern", "cozy", "sleek", "breezy", "sturdy")
_CLOSERS = (
    "for everyday wear",
    "with a relaxed fit",
    "cut for comfort",
    "made to last",
    "with clean lines",
)

IMG_SIZE = 24


@dataclass
class SynthSpec:
    n_samples: int
    seed: int = 0
    img_size: int = IMG_SIZE

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "seed": self.seed, "img_size": self.img_size}


@dataclass
class Sample:
    id: str
    name: str
    description: str
    images: list
    attributes: dict = field(default_factory=dict)


def render_glyph(shape: str, pattern: str, size: str, rng: np.random.Generator, img_size: int = IMG_SIZE) -> Image:
    """Rasterize one attribute combination; jitter moves the glyph, patterns
    stay locked to the glyph center so perspectives agree."""
    cy = img_size // 2 + int(rng.integers(-2, 3))
    cx = img_size // 2 + int(rng.integers(-2, 3))
    half = 5 if size == "small" else 9
    yy, xx = np.mgrid[0:img_size, 0:img_size]
    dy = yy - cy
    dx = xx - cx
    if shape == "square":
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif shape == "circle":
        mask = dx * dx + dy * dy <= half * half
    elif shape == "triangle":
        mask = (np.abs(dy) <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    elif shape == "cross":
        arm = max(2, half // 3)
        mask = ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= half))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    if pattern == "striped":
        mask = mask & ((dy % 4) < 2)
    elif pattern == "dotted":
        # half-density checker: isolated pixels, but the outline stays readable
        mask = mask & ((dy + dx) % 2 == 0)
    elif pattern != "solid":
        raise ValueError(f"unknown pattern {pattern!r}")
    pixels = mask.astype(np.float32)
    return Image(width=img_size, height=img_size, pixels=pixels.reshape(-1))


def _name_for(attrs: dict, noun: str, extra: str, variant: int) -> str:
    if variant == 0:
        return f"{attrs['gender']} {attrs['material']} {noun}"
    return f"{extra} {attrs['material']} {noun} for {attrs['gender']}"


def _description_for(attrs: dict, noun: str, extra: str, closer: str, variant: int) -> str:
    a = attrs
    if variant == 0:
        return f"a {a['size']} {a['pattern']} {a['shape']} {noun} in {extra} {a['material']} for {a['gender']} style"
    if variant == 1:
        return f"this {a['gender']} {noun} pairs {extra} {a['material']} with a {a['size']} {a['pattern']} {a['shape']} motif {closer}"
    return f"{extra} {a['material']} {noun} for {a['gender']} featuring a {a['size']} {a['pattern']} {a['shape']} print {closer}"


def generate(spec: SynthSpec) -> list[Sample]:
    """Produce n_samples items, deterministic under the spec seed."""
    if spec.n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    samples = []
    for i in range(spec.n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        attrs = {
            "shape": SHAPES[rng.integers(len(SHAPES))],
            "pattern": PATTERNS[rng.integers(len(PATTERNS))],
            "size": SIZES[rng.integers(len(SIZES))],
            "material": MATERIALS[rng.integers(len(MATERIALS))],
            "gender": GENDERS[rng.integers(len(GENDERS))],
        }
        noun = _NOUNS[rng.integers(len(_NOUNS))]
        extra = _EXTRAS[rng.integers(len(_EXTRAS))]
        closer = _CLOSERS[rng.integers(len(_CLOSERS))]
        name = _name_for(attrs, noun, extra, int(rng.integers(2)))
        description = _description_for(attrs, noun, extra, closer, int(rng.integers(3)))
        n_images = int(rng.integers(3, 6))
        images = [
            render_glyph(attrs["shape"], attrs["pattern"], attrs["size"], rng, spec.img_size)
            for _ in range(n_images)
        ]
        samples.append(Sample(id=f"item-{i:06d}", name=name, description=description, images=images, attributes=attrs))
    return samples


def split_of(sample_id: str) -> str:
    """Stable 80/10/10 split by id hash; independent of corpus size."""
    h = int(hashlib.sha1(sample_id.encode("utf-8")).hexdigest()[:8], 16) / 0xFFFFFFFF
    if h < 0.8:
        return "train"
    if h < 0.9:
        return "val"
    return "test"


# ---------------------------------------------------------------------------
# JSONL I/O


def to_record(sample: Sample) -> dict:
    rec = {
        "id": sample.id,
        "name": sample.name,
        "description": sample.description,
        "attributes": sample.attributes,
    }
    if sample.images and isinstance(sample.images[0], Image):
        rec["images"] = [[float(v) for v in img.pixels] for img in sample.images]
    else:
        rec["image_features"] = [[float(v) for v in feat] for feat in sample.images]
    return rec


def from_record(rec: dict, img_size: int = IMG_SIZE) -> Sample:
    if "image_features" in rec:
        images = [np.asarray(f, dtype=np.float32) for f in rec["image_features"]]
    else:
        images = [
            Image(width=img_size, height=img_size, pixels=np.asarray(p, dtype=np.float32))
            for p in rec.get("images", [])
        ]
    return Sample(
        id=rec["id"],
        name=rec["name"],
        description=rec["description"],
        images=images,
        attributes=rec.get("attributes", {}),
    )


def write_jsonl(samples: list[Sample], path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(json.dumps(to_record(s), separators=(",", ":")) + "\n")


def load_jsonl_with_report(path, img_size: int = IMG_SIZE) -> tuple[list[Sample], dict]:
    """Load and clean: drop records with empty name/description/images and
    exact-duplicate descriptions (first kept); counts per drop reason."""
    samples: list[Sample] = []
    drops = {"empty_name": 0, "empty_description": 0, "empty_images": 0, "duplicate_description": 0}
    seen_desc: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            if not rec.get("name"):
                drops["empty_name"] += 1
                continue
            if not rec.get("description"):
                drops["empty_description"] += 1
                continue
            if not rec.get("images") and not rec.get("image_features"):
                drops["empty_images"] += 1
                continue
            if rec["description"] in seen_desc:
                drops["duplicate_description"] += 1
                continue
            seen_desc.add(rec["description"])
            samples.append(from_record(rec, img_size))
    return samples, drops


def load_jsonl(path, img_size: int = IMG_SIZE) -> list[Sample]:
    samples, drops = load_jsonl_with_report(path, img_size)
    dropped = sum(drops.values())
    if dropped:
        log.info("load_jsonl(%s): kept %d records, dropped %s", path, len(samples), drops)
    return samples


# ---------------------------------------------------------------------------
# evaluation probe


def attribute_recall(generated: str, attrs: dict, scope: str) -> float:
    """Fraction of scoped attribute words present in the generated text."""
    if scope == "image_only":
        keys = IMAGE_ATTRS
    elif scope == "name_only":
        keys = NAME_ATTRS
    elif scope == "all":
        keys = IMAGE_ATTRS + NAME_ATTRS
    else:
        raise ValueError(f"unknown scope {scope!r}")
    words = [attrs[k] for k in keys if k in attrs]
    if not words:
        raise ValueError(f"no attributes available for scope {scope!r}")
    toks = set(tokenize(generated))
    return sum(1 for w in words if w in toks) / len(words)
