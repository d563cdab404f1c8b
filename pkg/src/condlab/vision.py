"""Conv image encoder: one dense token per image, projected into LM space.

Two 3x3/stride-2 conv layers with GELU feed a global average pool, giving a
feature vector of dim ``n_feat``; a linear map (the trainable projection)
lifts it to the LM embedding width.  The whole path is built from autograd
ops so conv weights fine-tune end-to-end through the language-model loss.

Records that ship precomputed ``image_features`` bypass the conv stage; only
the projection then trains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor, add, concat_rows, gelu, im2col, matmul, reshape, transpose


@dataclass
class Image:
    """Single-channel image, pixel values in [0, 1], row-major flat buffer."""

    width: int
    height: int
    pixels: np.ndarray
    channels: int = 1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32).reshape(-1)
        if self.pixels.size != self.width * self.height * self.channels:
            raise ShapeError(
                f"image buffer has {self.pixels.size} values, expected "
                f"{self.width}x{self.height}x{self.channels}"
            )


class ImageProjector:
    """Trainable conv feature extractor plus linear map into embedding space."""

    KSIZE = 3
    STRIDE = 2

    def __init__(
        self,
        embed_dim: int,
        n_feat: int = 32,
        img_size: int = 24,
        c_hidden: int = 16,
        max_images: int = 5,
        use_bias: bool = True,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.embed_dim = embed_dim
        self.n_feat = n_feat
        self.img_size = img_size
        self.c_hidden = c_hidden
        self.max_images = max_images
        self.use_bias = use_bias
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        k2 = self.KSIZE * self.KSIZE

        def uniform(fan_in, shape):
            lim = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-lim, lim, size=shape).astype(dtype), requires_grad=True)

        self.conv1_w = uniform(k2, (k2, c_hidden))
        self.conv1_b = Tensor(np.zeros(c_hidden, dtype=dtype), requires_grad=True)
        self.conv2_w = uniform(c_hidden * k2, (c_hidden * k2, n_feat))
        self.conv2_b = Tensor(np.zeros(n_feat, dtype=dtype), requires_grad=True)
        self.proj_w = uniform(n_feat, (n_feat, embed_dim))
        self.proj_b = Tensor(np.zeros(embed_dim, dtype=dtype), requires_grad=True)

        side1 = (img_size - self.KSIZE) // self.STRIDE + 1
        side2 = (side1 - self.KSIZE) // self.STRIDE + 1
        self._side1 = side1
        self._pool = Tensor(np.full((1, side2 * side2), 1.0 / (side2 * side2), dtype=dtype))

    def named_parameters(self) -> dict[str, Tensor]:
        params = {
            "vis.conv1.w": self.conv1_w,
            "vis.conv1.b": self.conv1_b,
            "vis.conv2.w": self.conv2_w,
            "vis.conv2.b": self.conv2_b,
            "vis.proj.w": self.proj_w,
        }
        if self.use_bias:
            params["vis.proj.b"] = self.proj_b
        return params

    def conv_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("vis.conv")}

    def _features(self, img: Image) -> Tensor:
        if img.width != self.img_size or img.height != self.img_size or img.channels != 1:
            raise ShapeError(
                f"image is {img.width}x{img.height}x{img.channels}, "
                f"encoder expects {self.img_size}x{self.img_size}x1"
            )
        x = Tensor(img.pixels.astype(self.dtype).reshape(1, self.img_size, self.img_size))
        h1 = gelu(add(matmul(im2col(x, self.KSIZE, self.STRIDE), self.conv1_w), self.conv1_b))
        maps = reshape(transpose(h1), (self.c_hidden, self._side1, self._side1))
        h2 = gelu(add(matmul(im2col(maps, self.KSIZE, self.STRIDE), self.conv2_w), self.conv2_b))
        return matmul(self._pool, h2)  # (1, n_feat) global average pool

    def encode_image(self, img) -> Tensor:
        """Encode one Image (or a precomputed n_feat feature vector) to (1, D)."""
        if isinstance(img, Image):
            feat = self._features(img)
        else:
            arr = np.asarray(img, dtype=self.dtype).reshape(-1)
            if arr.size != self.n_feat:
                raise ShapeError(f"feature vector has dim {arr.size}, expected {self.n_feat}")
            feat = Tensor(arr.reshape(1, self.n_feat))
        out = matmul(feat, self.proj_w)
        if self.use_bias:
            out = add(out, self.proj_b)
        return out

    def encode_images(self, imgs) -> Tensor:
        """Encode an ordered list of 1..max_images images to (m, D)."""
        if not imgs:
            raise ValueError("encode_images: image list is empty")
        if len(imgs) > self.max_images:
            raise ValueError(f"encode_images: {len(imgs)} images exceeds max_images={self.max_images}")
        return concat_rows([self.encode_image(im) for im in imgs])
