"""Small vision transformer encoder with a 3-layer projection head onto the
unit hypersphere.

Pre-norm blocks (norm -> attention -> residual; norm -> GELU feed-forward ->
residual), learned positional embeddings at the global grid, bilinearly
interpolated (align-corners) for other view resolutions, and a [CLS] token
whose final-layer-norm row is the image embedding. Everything is a pure
function of (params, input); params are a name->Tensor dict shared by
student and teacher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    global_view_px: int = 64
    local_view_px: int = 32
    proj_hidden_dim: int = 2048
    proj_out_dim: int = 256
    channels: int = 3

    def __post_init__(self):
        if self.global_view_px % self.patch_size or self.local_view_px % self.patch_size:
            raise ValueError(
                f"view sizes ({self.global_view_px}, {self.local_view_px}) must be "
                f"multiples of patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def global_grid(self) -> int:
        return self.global_view_px // self.patch_size

    def grid_for(self, px: int) -> int:
        if px % self.patch_size:
            raise ValueError(f"view size {px} not divisible by patch_size {self.patch_size}")
        return px // self.patch_size


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) redrawn until within 2 std; reference ViT init."""
    out = rng.normal(0.0, std, size=shape)
    mask = np.abs(out) > 2.0 * std
    while mask.any():
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def init_encoder_params(config: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Encoder + projection head parameters; weights truncated-normal, biases
    zero, layer norms identity. Construction order is fixed, so a given rng
    state always yields the same parameters."""
    d = config.embed_dim
    h = config.mlp_ratio * d
    g = config.global_grid
    params: dict[str, np.ndarray] = {}

    params["encoder.patch.weight"] = truncated_normal(
        rng, (config.patch_size**2 * config.channels, d)
    )
    params["encoder.patch.bias"] = np.zeros(d, dtype=np.float32)
    params["encoder.cls"] = truncated_normal(rng, (1, d))
    params["encoder.pos"] = truncated_normal(rng, (g * g + 1, d))
    for i in range(config.depth):
        base = f"encoder.blocks.{i}"
        params[f"{base}.ln1.gamma"] = np.ones(d, dtype=np.float32)
        params[f"{base}.ln1.beta"] = np.zeros(d, dtype=np.float32)
        params[f"{base}.attn.qkv.weight"] = truncated_normal(rng, (d, 3 * d))
        params[f"{base}.attn.qkv.bias"] = np.zeros(3 * d, dtype=np.float32)
        params[f"{base}.attn.proj.weight"] = truncated_normal(rng, (d, d))
        params[f"{base}.attn.proj.bias"] = np.zeros(d, dtype=np.float32)
        params[f"{base}.ln2.gamma"] = np.ones(d, dtype=np.float32)
        params[f"{base}.ln2.beta"] = np.zeros(d, dtype=np.float32)
        params[f"{base}.mlp.fc1.weight"] = truncated_normal(rng, (d, h))
        params[f"{base}.mlp.fc1.bias"] = np.zeros(h, dtype=np.float32)
        params[f"{base}.mlp.fc2.weight"] = truncated_normal(rng, (h, d))
        params[f"{base}.mlp.fc2.bias"] = np.zeros(d, dtype=np.float32)
    params["encoder.norm.gamma"] = np.ones(d, dtype=np.float32)
    params["encoder.norm.beta"] = np.zeros(d, dtype=np.float32)

    ph = config.proj_hidden_dim
    params["head.fc1.weight"] = truncated_normal(rng, (d, ph))
    params["head.fc1.bias"] = np.zeros(ph, dtype=np.float32)
    params["head.fc2.weight"] = truncated_normal(rng, (ph, ph))
    params["head.fc2.bias"] = np.zeros(ph, dtype=np.float32)
    params["head.fc3.weight"] = truncated_normal(rng, (ph, config.proj_out_dim))
    params["head.fc3.bias"] = np.zeros(config.proj_out_dim, dtype=np.float32)

    return {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}


def clone_params(params: dict[str, Tensor], requires_grad: bool) -> dict[str, Tensor]:
    return {n: Tensor(p.data.copy(), requires_grad=requires_grad) for n, p in params.items()}


def patchify(view: np.ndarray, patch_size: int) -> np.ndarray:
    """Non-overlapping patches in row-major order, each flattened row-major:
    (H, W, C) -> (H/p * W/p, p*p*C)."""
    if view.ndim != 3:
        raise ValueError(f"expected an H x W x C view, got shape {view.shape}")
    hh, ww, cc = view.shape
    if hh % patch_size or ww % patch_size:
        raise ValueError(f"view {hh}x{ww} not divisible by patch size {patch_size}")
    gh, gw = hh // patch_size, ww // patch_size
    tiles = view.reshape(gh, patch_size, gw, patch_size, cc)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * cc)


@lru_cache(maxsize=32)
def _interp_matrix(source_grid: int, target_grid: int) -> np.ndarray:
    """Align-corners bilinear interpolation as a (target^2, source^2) matrix.
    Constants are preserved (rows sum to 1) and equal grids give identity."""
    gs, gt = source_grid, target_grid
    mat = np.zeros((gt * gt, gs * gs), dtype=np.float64)
    for ti in range(gt):
        fy = ti * (gs - 1) / (gt - 1) if gt > 1 else (gs - 1) / 2.0
        y0 = min(int(math.floor(fy)), gs - 1)
        y1 = min(y0 + 1, gs - 1)
        wy = fy - y0
        for tj in range(gt):
            fx = tj * (gs - 1) / (gt - 1) if gt > 1 else (gs - 1) / 2.0
            x0 = min(int(math.floor(fx)), gs - 1)
            x1 = min(x0 + 1, gs - 1)
            wx = fx - x0
            row = ti * gt + tj
            mat[row, y0 * gs + x0] += (1 - wy) * (1 - wx)
            mat[row, y0 * gs + x1] += (1 - wy) * wx
            mat[row, y1 * gs + x0] += wy * (1 - wx)
            mat[row, y1 * gs + x1] += wy * wx
    return mat.astype(np.float32)


def interpolate_pos_embed(pos: np.ndarray, source_grid: int, target_grid: int) -> np.ndarray:
    """Resample a (source^2 + 1, d) positional table to a target grid; the
    leading [CLS] entry passes through unchanged."""
    if pos.shape[0] != source_grid * source_grid + 1:
        raise ValueError(f"pos table has {pos.shape[0]} rows, expected {source_grid**2 + 1}")
    mat = _interp_matrix(source_grid, target_grid).astype(pos.dtype)
    grid = mat @ pos[1:]
    return np.concatenate([pos[:1], grid], axis=0)


def _token_interp_matrix(source_grid: int, target_grid: int, dtype) -> np.ndarray:
    gs, gt = source_grid, target_grid
    full = np.zeros((gt * gt + 1, gs * gs + 1), dtype=dtype)
    full[0, 0] = 1.0
    full[1:, 1:] = _interp_matrix(gs, gt)
    return full


def _linear(x2d: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return ad.add_bias(ad.matmul(x2d, params[f"{name}.weight"]), params[f"{name}.bias"])


def _attention(x: Tensor, params: dict[str, Tensor], base: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    h2 = ad.reshape(x, (b * t, d))
    qkv = ad.reshape(_linear(h2, params, f"{base}.qkv"), (b, t, 3 * d))

    def split(part: int) -> Tensor:
        piece = ad.slice_axis(qkv, 2, part * d, (part + 1) * d)
        piece = ad.reshape(piece, (b, t, heads, dh))
        piece = ad.transpose(piece, (0, 2, 1, 3))
        return ad.reshape(piece, (b * heads, t, dh))

    q, k, v = split(0), split(1), split(2)
    scores = ad.multiply_scalar(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = ad.reshape(ad.softmax_rows(ad.reshape(scores, (b * heads * t, t)), 1.0), (b * heads, t, t))
    ctx = ad.bmm(attn, v)
    ctx = ad.transpose(ad.reshape(ctx, (b, heads, t, dh)), (0, 2, 1, 3))
    out = _linear(ad.reshape(ctx, (b * t, d)), params, f"{base}.proj")
    return ad.reshape(out, (b, t, d))


def _mlp(x: Tensor, params: dict[str, Tensor], base: str) -> Tensor:
    b, t, d = x.shape
    h = _linear(ad.reshape(x, (b * t, d)), params, f"{base}.fc1")
    h = _linear(ad.gelu(h), params, f"{base}.fc2")
    return ad.reshape(h, (b, t, d))


def encode_batch(views: np.ndarray, params: dict[str, Tensor], config: ViTConfig) -> Tensor:
    """Encode a (B, H, W, C) stack of equally sized views to (B, embed_dim)
    [CLS] embeddings."""
    if views.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) views, got shape {views.shape}")
    b, hh, ww, cc = views.shape
    if hh != ww:
        raise ValueError(f"views must be square, got {hh}x{ww}")
    if cc != config.channels:
        raise ValueError(f"expected {config.channels} channels, got {cc}")
    grid = config.grid_for(hh)
    n = grid * grid
    d = config.embed_dim
    dtype = params["encoder.patch.weight"].dtype

    tokens = np.stack([patchify(v, config.patch_size) for v in views]).reshape(b * n, -1)
    x = _linear(Tensor(tokens.astype(dtype)), params, "encoder.patch")
    x = ad.reshape(x, (b, n, d))

    cls = ad.reshape(ad.broadcast_rows(params["encoder.cls"], b), (b, 1, d))
    x = ad.concat([cls, x], axis=1)

    interp = Tensor(_token_interp_matrix(config.global_grid, grid, dtype))
    pos = ad.matmul(interp, params["encoder.pos"])
    x = ad.add_shared(x, pos)

    for i in range(config.depth):
        base = f"encoder.blocks.{i}"
        h = ad.layer_norm(x, params[f"{base}.ln1.gamma"], params[f"{base}.ln1.beta"])
        x = ad.add(x, _attention(h, params, f"{base}.attn", config.heads))
        h = ad.layer_norm(x, params[f"{base}.ln2.gamma"], params[f"{base}.ln2.beta"])
        x = ad.add(x, _mlp(h, params, f"{base}.mlp"))

    x = ad.layer_norm(x, params["encoder.norm.gamma"], params["encoder.norm.beta"])
    cls_out = ad.slice_axis(x, 1, 0, 1)
    return ad.reshape(cls_out, (b, d))


def encode(view: np.ndarray, params: dict[str, Tensor], config: ViTConfig) -> Tensor:
    """Single-view convenience wrapper; returns a (embed_dim,) embedding."""
    out = encode_batch(view[None], params, config)
    return ad.reshape(out, (config.embed_dim,))


def project_batch(cls_embed: Tensor, params: dict[str, Tensor]) -> Tensor:
    """3-layer GELU MLP onto the unit hypersphere: (B, d) -> (B, out_dim)."""
    h = ad.gelu(_linear(cls_embed, params, "head.fc1"))
    h = ad.gelu(_linear(h, params, "head.fc2"))
    h = _linear(h, params, "head.fc3")
    return ad.l2_normalize_rows(h)


def project(cls_embed: Tensor, params: dict[str, Tensor]) -> Tensor:
    if cls_embed.data.ndim != 1:
        raise ValueError(f"project expects a 1-D embedding, got {cls_embed.shape}")
    out = project_batch(ad.reshape(cls_embed, (1, cls_embed.shape[0])), params)
    return ad.reshape(out, (out.shape[1],))
