"""Patch-based image encoder and the patch merger.

The encoder's input — patch embeddings plus learned positions — is the exact
point where the feedback loop injects its additive perturbation: `encode`
takes an optional delta of the same shape and runs the transformer on the
sum.  With no delta (or a zero delta) it reproduces the plain encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError, DataError
from .nn import linear, transformer_block
from .tensor import Tensor


@dataclass
class ImageGrid:
    """Pixels in [0, 1], row-major, [height, width, channels]."""

    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def patch_count(self, patch_size: int) -> int:
        return (self.height // patch_size) * (self.width // patch_size)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling; identity when sizes match."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)[:, None, None]
    wx = (xs - x0).astype(img.dtype)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(raw: np.ndarray, target_height: int, patch_size: int) -> ImageGrid:
    """Resize so height == target_height (aspect preserved), floor the width
    to a patch multiple by cropping rightmost columns, normalize to [0, 1].

    Integer input is treated as 0..255; float input must already be in [0, 1].
    """
    if raw.size == 0:
        raise DataError("empty image")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3:
        raise DataError(f"expected [h, w, c] pixels, got shape {raw.shape}")
    if raw.shape[2] == 1:
        raw = np.repeat(raw, 3, axis=2)

    if np.issubdtype(raw.dtype, np.integer):
        pixels = raw.astype(np.float32) / np.float32(255.0)
    else:
        pixels = raw.astype(np.float32)
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise DataError("float pixels must lie in [0, 1]")

    if target_height % patch_size != 0:
        raise ConfigError(f"target height {target_height} not a multiple of patch {patch_size}")
    h, w = pixels.shape[:2]
    scaled_w = int(round(w * target_height / h))
    out_w = scaled_w - scaled_w % patch_size
    if target_height < patch_size or out_w < patch_size:
        raise DataError(f"image {h}x{w} smaller than one {patch_size}px patch after resize")
    resized = bilinear_resize(pixels, target_height, scaled_w)[:, :out_w]
    return ImageGrid(np.ascontiguousarray(np.clip(resized, 0.0, 1.0)))


def patchify(img: ImageGrid, patch_size: int) -> np.ndarray:
    """Non-overlapping patches, row-major over the patch lattice, each
    flattened as (rows, cols, channels)."""
    h, w, c = img.pixels.shape
    if h % patch_size or w % patch_size:
        raise ContractError(f"image {h}x{w} not aligned to patch size {patch_size}")
    ph, pw = h // patch_size, w // patch_size
    blocks = img.pixels.reshape(ph, patch_size, pw, patch_size, c)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(ph * pw, patch_size * patch_size * c)


def embed_patches(params: dict[str, Tensor], cfg: ModelConfig, img: ImageGrid) -> Tensor:
    """Linear patch embedding plus learned per-position rows: [P, d_embed]."""
    flat = patchify(img, cfg.patch_size).astype(cfg.np_dtype)
    p = flat.shape[0]
    if p > cfg.max_patches:
        raise ConfigError(f"{p} patches exceed the positional table ({cfg.max_patches})")
    x = linear(Tensor(flat), params["enc.patch.w"], params["enc.patch.b"])
    return T.add(x, T.slice_rows(params["enc.pos"], 0, p))


def encode(params: dict[str, Tensor], cfg: ModelConfig, pe: Tensor,
           delta: Tensor | None = None) -> Tensor:
    """Bidirectional transformer over (patch embeddings + optional delta).

    No output normalization: per-row norms carry how much of a patch is
    covered, which downstream shape discrimination needs (a final per-patch
    layernorm erases it)."""
    if delta is not None:
        if delta.shape != pe.shape:
            raise ContractError(f"delta shape {delta.shape} != patch embeddings {pe.shape}")
        x = T.add(pe, delta)
    else:
        x = pe
    for i in range(cfg.n_enc_blocks):
        x = transformer_block(params, f"enc.block{i}", x, cfg.enc_heads, mask=None)
    return x


_WINDOWS = {1: (1, 1), 2: (1, 2), 4: (2, 2), 8: (2, 4), 16: (4, 4)}


def merge_window(merge: int) -> tuple[int, int]:
    if merge not in _WINDOWS:
        raise ConfigError(f"unsupported merge factor {merge}; choose from {sorted(_WINDOWS)}")
    return _WINDOWS[merge]


def window_order(grid: tuple[int, int], merge: int) -> np.ndarray:
    """Row-major patch indices regrouped so each window's patches are
    consecutive; windows themselves run row-major over the merged lattice."""
    ph, pw = grid
    wh, ww = merge_window(merge)
    if ph % wh or pw % ww:
        raise ConfigError(f"patch grid {ph}x{pw} not tiled by {wh}x{ww} merge windows")
    idx = np.arange(ph * pw).reshape(ph // wh, wh, pw // ww, ww)
    return idx.transpose(0, 2, 1, 3).reshape(-1)


def merge_patches(params: dict[str, Tensor], cfg: ModelConfig, features: Tensor,
                  grid: tuple[int, int]) -> Tensor:
    """Concatenate each spatial window of `merge` patch features and map the
    result to an LM-facing token: [P, d_embed] -> [P/merge, d_llm], tokens
    ordered row-major over the merged lattice."""
    p, d = features.shape
    if p != grid[0] * grid[1]:
        raise ContractError(f"{p} patch rows != grid {grid}")
    if p % cfg.merge != 0:
        raise ConfigError(f"{p} patches not divisible by merge factor {cfg.merge}")
    order = window_order(grid, cfg.merge)
    regrouped = T.embed(features, order) if not np.array_equal(order, np.arange(p)) else features
    grouped = T.reshape(regrouped, (p // cfg.merge, cfg.merge * d))
    return linear(grouped, params["enc.merge.w"], params["enc.merge.b"])


def project_tokens(params: dict[str, Tensor], tokens: Tensor) -> Tensor:
    """Frozen alignment projector between encoder tokens and LM embeddings."""
    return linear(tokens, params["proj.w"], params["proj.b"])


def patch_grid(img: ImageGrid, patch_size: int) -> tuple[int, int]:
    return img.height // patch_size, img.width // patch_size


def encode_image(params: dict[str, Tensor], cfg: ModelConfig, img: ImageGrid,
                 delta: Tensor | None = None) -> tuple[Tensor, Tensor, tuple[int, int]]:
    """Full image path: (patch embeddings, projected LM tokens, patch grid)."""
    grid = patch_grid(img, cfg.patch_size)
    pe = embed_patches(params, cfg, img)
    feats = encode(params, cfg, pe, delta)
    tokens = project_tokens(params, merge_patches(params, cfg, feats, grid))
    return pe, tokens, grid


def reencode(params: dict[str, Tensor], cfg: ModelConfig, pe: Tensor,
             delta: Tensor, grid: tuple[int, int]) -> Tensor:
    """Second encoding pass from already-computed patch embeddings."""
    feats = encode(params, cfg, pe, delta)
    return project_tokens(params, merge_patches(params, cfg, feats, grid))
