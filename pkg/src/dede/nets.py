"""Patch-token transformers: the victim encoder, the patch encoder and the decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ContractError, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class PatchGrid:
    channels: int = 3
    height: int = 16
    width: int = 16
    patch: int = 4

    def __post_init__(self):
        if self.patch <= 0 or self.height % self.patch or self.width % self.patch:
            raise ContractError(f"patch size {self.patch} must divide {self.height}x{self.width}")

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def patch_count(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def check(self, images: np.ndarray) -> None:
        if images.ndim != 4 or images.shape[1:] != self.image_shape:
            raise ContractError(f"image batch {images.shape} does not match grid {self.image_shape}")


def patchify(images: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """(N, C, H, W) -> (N, P, p*p*C), patches in row-major grid order."""
    grid.check(images)
    n, c = images.shape[:2]
    p = grid.patch
    x = images.reshape(n, c, grid.grid_h, p, grid.grid_w, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(n, grid.patch_count, grid.patch_dim)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    n = patches.shape[0]
    if patches.shape[1:] != (grid.patch_count, grid.patch_dim):
        raise ContractError(f"patch tensor {patches.shape} does not match grid")
    p = grid.patch
    x = patches.reshape(n, grid.grid_h, grid.grid_w, p, p, grid.channels)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(n, grid.channels, grid.height, grid.width)


def _param(shape, rng: Rng | None, dtype, std: float = INIT_STD, fill: float = 0.0) -> Tensor:
    if rng is None:
        data = np.full(shape, fill, dtype=dtype)
    else:
        data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True, dtype=dtype)


class Module:
    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.name == "param":
                out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{prefix}{name}."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    out.extend(sub.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            raise ContractError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in named.items():
            if state[k].shape != p.shape:
                raise ContractError(f"{k}: shape {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _mark(t: Tensor) -> Tensor:
    t.name = "param"
    return t


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, dtype=T.DEFAULT_DTYPE):
        self.weight = _mark(_param((d_in, d_out), rng, dtype))
        self.bias = _mark(_param((d_out,), None, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, dtype=T.DEFAULT_DTYPE):
        self.gain = _mark(_param((width,), None, dtype, fill=1.0))
        self.shift = _mark(_param((width,), None, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layernorm_lastdim(x), self.gain), self.shift)


class Attention(Module):
    def __init__(self, width: int, heads: int, rng: Rng, dtype=T.DEFAULT_DTYPE):
        if width % heads:
            raise ContractError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng.child("qkv"), dtype)
        self.out = Linear(width, width, rng.child("out"), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, t, w = x.shape
        h = self.heads
        dh = w // h
        qkv = self.qkv(x).reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(dh))
        att = T.softmax_lastdim(scores)
        y = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(n, t, w)
        return self.out(y)


class Block(Module):
    """Pre-norm self-attention + MLP, both residual."""

    def __init__(self, width: int, heads: int, rng: Rng, dtype=T.DEFAULT_DTYPE):
        self.ln1 = LayerNorm(width, dtype)
        self.attn = Attention(width, heads, rng.child("attn"), dtype)
        self.ln2 = LayerNorm(width, dtype)
        self.fc1 = Linear(width, 4 * width, rng.child("fc1"), dtype)
        self.fc2 = Linear(4 * width, width, rng.child("fc2"), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.fc2(T.gelu(self.fc1(self.ln2(x)))))


class TransformerStack(Module):
    def __init__(self, depth: int, width: int, heads: int, rng: Rng, dtype=T.DEFAULT_DTYPE):
        self.blocks = [Block(width, heads, rng.child(f"block{i}"), dtype) for i in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


def _broadcast_rows(param: Tensor, n: int) -> Tensor:
    """(1, 1, W) parameter repeated to (n, 1, W) through a broadcasting add."""
    zeros = Tensor(np.zeros((n,) + param.shape[1:], dtype=param.dtype))
    return T.add(zeros, param)


@dataclass(frozen=True)
class EncoderArch:
    depth: int = 2
    width: int = 64
    heads: int = 4
    embed_dim: int = 64


class VictimEncoder(Module):
    """Image -> L2-normalized embedding, read from a class token."""

    def __init__(self, grid: PatchGrid, arch: EncoderArch, rng: Rng, dtype=T.DEFAULT_DTYPE):
        self.grid = grid
        self.arch = arch
        w = arch.width
        self.patch_proj = Linear(grid.patch_dim, w, rng.child("patch_proj"), dtype)
        self.cls_token = _mark(_param((1, 1, w), rng.child("cls"), dtype))
        self.pos = _mark(_param((1, grid.patch_count + 1, w), rng.child("pos"), dtype))
        self.stack = TransformerStack(arch.depth, w, arch.heads, rng.child("stack"), dtype)
        self.ln_f = LayerNorm(w, dtype)
        self.head = Linear(w, arch.embed_dim, rng.child("head"), dtype)

    @property
    def dtype(self):
        return self.pos.dtype

    def __call__(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images)
        patches = Tensor(patchify(images, self.grid).astype(self.dtype, copy=False))
        n = images.shape[0]
        tokens = self.patch_proj(patches)
        x = T.add(T.concat([_broadcast_rows(self.cls_token, n), tokens], axis=1), self.pos)
        x = self.ln_f(self.stack(x))
        cls = x[:, 0, :]
        return T.l2_normalize(self.head(cls))

    def embed(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Gradient-free batched embeddings as an (N, d) array."""
        out = [self(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        if not out:
            return np.zeros((0, self.arch.embed_dim), dtype=self.dtype)
        return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class DedeArch:
    enc_depth: int = 2
    enc_width: int = 64
    dec_depth: int = 2
    dec_width: int = 64
    heads: int = 4


class PatchEncoder(Module):
    """Encodes the visible patches of a masked image; position comes from a learned table."""

    def __init__(self, grid: PatchGrid, depth: int, width: int, heads: int, rng: Rng, dtype=T.DEFAULT_DTYPE):
        self.grid = grid
        self.width = width
        self.patch_proj = Linear(grid.patch_dim, width, rng.child("patch_proj"), dtype)
        self.pos = _mark(_param((grid.patch_count, width), rng.child("pos"), dtype))
        self.stack = TransformerStack(depth, width, heads, rng.child("stack"), dtype)
        self.ln_f = LayerNorm(width, dtype)

    def __call__(self, masked_images: np.ndarray, visible: np.ndarray) -> Tensor:
        masked_images = np.asarray(masked_images)
        n = masked_images.shape[0]
        visible = np.asarray(visible, dtype=np.int64)
        P = self.grid.patch_count
        if visible.ndim != 2 or visible.shape[0] != n:
            raise ContractError(f"visible index array {visible.shape} for batch of {n}")
        if visible.size and (visible.min() < 0 or visible.max() >= P):
            raise ContractError("visible index out of range")
        k = visible.shape[1]
        if k == 0:
            return Tensor(np.zeros((n, 0, self.width), dtype=self.pos.dtype))
        patches = patchify(masked_images, self.grid)[np.arange(n)[:, None], visible]
        tokens = self.patch_proj(Tensor(patches.astype(self.pos.dtype, copy=False)))
        x = T.add(tokens, self.pos[visible])
        return self.ln_f(self.stack(x))


def hidden_indices(visible: np.ndarray, patch_count: int) -> np.ndarray:
    n, k = visible.shape
    keep = np.ones((n, patch_count), dtype=bool)
    keep[np.arange(n)[:, None], visible] = False
    return np.nonzero(keep)[1].reshape(n, patch_count - k)


class Decoder(Module):
    """(global embedding, visible-patch tokens) -> full patch grid in [0, 1].

    The global embedding enters as one extra conditioning token; hidden slots
    are a shared learned mask token plus their positional embedding.
    """

    def __init__(self, grid: PatchGrid, embed_dim: int, enc_width: int, depth: int, width: int, heads: int,
                 rng: Rng, dtype=T.DEFAULT_DTYPE):
        self.grid = grid
        self.embed_dim = embed_dim
        self.cond = Linear(embed_dim, width, rng.child("cond"), dtype)
        self.enc_proj = Linear(enc_width, width, rng.child("enc_proj"), dtype)
        self.mask_token = _mark(_param((1, 1, width), rng.child("mask_token"), dtype))
        self.pos = _mark(_param((grid.patch_count, width), rng.child("pos"), dtype))
        self.stack = TransformerStack(depth, width, heads, rng.child("stack"), dtype)
        self.ln_f = LayerNorm(width, dtype)
        self.head = Linear(width, grid.patch_dim, rng.child("head"), dtype)

    def __call__(self, e: Tensor, b: Tensor, visible: np.ndarray) -> Tensor:
        n = e.shape[0]
        if e.ndim != 2 or e.shape[1] != self.embed_dim:
            raise ContractError(f"decoder expects embeddings (N, {self.embed_dim}), got {e.shape}")
        visible = np.asarray(visible, dtype=np.int64).reshape(n, -1)
        if b.shape[:2] != visible.shape:
            raise ContractError(f"patch tokens {b.shape} do not match visible indices {visible.shape}")
        P = self.grid.patch_count
        k = visible.shape[1]
        hidden = hidden_indices(visible, P)
        parts = [self.cond(e).reshape(n, 1, -1)]
        if k:
            parts.append(T.add(self.enc_proj(b), self.pos[visible]))
        if k < P:
            parts.append(T.add(self.mask_token, self.pos[hidden]))
        x = self.ln_f(self.stack(T.concat(parts, axis=1)))
        pred = self.head(x[:, 1:, :])
        # token j of row r sits at slot order[r, j]; invert to slot order
        order = np.concatenate([visible, hidden], axis=1)
        inv = np.argsort(order, axis=1)
        pred = pred[np.arange(n)[:, None], inv]
        return T.clamp01(pred)
