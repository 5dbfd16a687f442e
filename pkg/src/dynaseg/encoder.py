"""Tiny ViT-style encoder returning tokens and the last-block attention map.

Pre-norm transformer blocks (attention + MLP with residuals). In the last
block the per-head attention weights can be refined by the dynamic-dilation
ASPP before they are applied to V; only that refined map is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aspp import DEFAULT_SCHEDULE, AsppParams, DilationSchedule, attention_aspp_inject
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    layer_norm,
    narrow,
    relu,
    reshape,
    softmax,
    transpose,
)

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class AttentionMap:
    """Per-head token-to-token weights (h, N+1, N+1); rows are distributions."""

    weights: Tensor

    def __post_init__(self):
        w = self.weights
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ShapeError(f"attention map must be (heads, N+1, N+1), got {w.shape}")
        if np.any(w.data < -1e-12):
            raise ValueError("attention map has negative entries")
        sums = w.data.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
            raise ValueError(
                f"attention rows must sum to 1 +- {ROW_SUM_TOL}, worst deviation "
                f"{np.max(np.abs(sums - 1.0)):.3e}"
            )

    @property
    def num_heads(self) -> int:
        return self.weights.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.weights.shape[1]


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, scale: float = 0.06) -> dict[str, Tensor]:
    """Seeded parameter tree; keys are stable so the tree is checkpointable."""
    d = cfg.embed_dim
    patch_dim = 3 * cfg.patch_size * cfg.patch_size

    def p(shape, s=scale):
        return Tensor(s * rng.standard_normal(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "patch.w": p((patch_dim, d)),
        "patch.b": Tensor(np.zeros(d), requires_grad=True),
        "cls": p((1, d)),
        "pos": p((cfg.num_patches + 1, d)),
    }
    for b in range(cfg.num_blocks):
        pre = f"blk{b}."
        params[pre + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + name] = p((d, d))
        params[pre + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
        params[pre + "mlp.w1"] = p((d, cfg.mlp_dim))
        params[pre + "mlp.b1"] = Tensor(np.zeros(cfg.mlp_dim), requires_grad=True)
        params[pre + "mlp.w2"] = p((cfg.mlp_dim, d))
        params[pre + "mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
    params["ln_f.g"] = Tensor(np.ones(d), requires_grad=True)
    params["ln_f.b"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def patchify(image: Tensor, cfg: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Row-major patch tokens + class token + positional embeddings: (N+1, D)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"patchify: image must be (3, H, W), got {image.shape}")
    if image.shape[1] != cfg.image_size or image.shape[2] != cfg.image_size:
        raise ShapeError(
            f"patchify: image is {image.shape[1]}x{image.shape[2]}, config expects "
            f"{cfg.image_size}x{cfg.image_size}"
        )
    g, ps = cfg.grid, cfg.patch_size
    patches = reshape(image, (3, g, ps, g, ps))
    patches = transpose(patches, (1, 3, 0, 2, 4))  # token i -> patch (i // g, i % g)
    patches = reshape(patches, (cfg.num_patches, 3 * ps * ps))
    tokens = patches @ params["patch.w"] + params["patch.b"]
    tokens = concat([params["cls"], tokens], axis=0)
    return tokens + params["pos"]


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention: weights = softmax(Q K^T / sqrt(d_k)) row-wise."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    d_k = q.shape[1]
    scores = (q @ transpose(k)) * (1.0 / math.sqrt(d_k))
    weights = softmax(scores, axis=1)
    return weights @ v, weights


def encoder_forward(
    image: Tensor,
    cfg: EncoderConfig,
    params: dict[str, Tensor],
    epoch: int,
    *,
    aspp_params: AsppParams | None = None,
    aspp_on: bool = True,
    aspp_residual: bool = False,
    schedule: DilationSchedule = DEFAULT_SCHEDULE,
) -> tuple[Tensor, AttentionMap]:
    """Full forward pass; returns final tokens and the last-block AttentionMap."""
    x = patchify(image, cfg, params)
    n1 = cfg.num_patches + 1
    dk = cfg.head_dim
    inject = aspp_on and aspp_params is not None
    last_map: AttentionMap | None = None

    for b in range(cfg.num_blocks):
        pre = f"blk{b}."
        h = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = h @ params[pre + "wq"]
        k = h @ params[pre + "wk"]
        v = h @ params[pre + "wv"]

        head_weights = []
        head_values = []
        for i in range(cfg.num_heads):
            qi = narrow(q, 1, i * dk, dk)
            ki = narrow(k, 1, i * dk, dk)
            vi = narrow(v, 1, i * dk, dk)
            scores = (qi @ transpose(ki)) * (1.0 / math.sqrt(dk))
            head_weights.append(softmax(scores, axis=1))
            head_values.append(vi)

        if b == cfg.num_blocks - 1:
            raw = AttentionMap(
                concat([reshape(w, (1, n1, n1)) for w in head_weights], axis=0)
            )
            if inject:
                refined = attention_aspp_inject(raw, epoch, aspp_params, schedule)
                if aspp_residual:
                    mixed = (raw.weights + refined.weights) * 0.5
                    refined = AttentionMap(mixed)
                last_map = refined
                head_weights = [
                    reshape(narrow(refined.weights, 0, i, 1), (n1, n1))
                    for i in range(cfg.num_heads)
                ]
            else:
                last_map = raw

        heads_out = [w @ vi for w, vi in zip(head_weights, head_values)]
        x = x + concat(heads_out, axis=1) @ params[pre + "wo"]

        h2 = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        hidden = relu(h2 @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        x = x + hidden @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]

    tokens = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    assert last_map is not None
    return tokens, last_map
