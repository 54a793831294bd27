"""Miniature patchified diffusion transformer with group attention.

Hidden states live as [B, N, L, C] tensors: B groups, N members per group,
L patch tokens per member. Attention runs either per member (each image
attends to its own L tokens) or across the whole group (the member axis is
folded into the sequence so all N*L tokens attend to each other); nothing
else in the network changes, so grouping is purely an attention-scope
switch.

Every member gets a learnable per-slot embedding added once to all of its
patch tokens after patch embedding, which is how the network tells members
apart inside the shared attention. Conditioning (timestep + class, with a
dedicated null class) enters through per-layer adaptive layer norm with
zero-initialized modulation and a zero-initialized output head, so a fresh
model predicts exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import (Tensor, add, gelu, layer_norm, matmul, mul,
                     scaled_dot_attention, silu, take_rows)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    num_classes: int = 8     # null-class index == num_classes
    max_group: int = 16      # slot-table rows; inference N may not exceed this
    time_embed_dim: int = 32
    dtype: str = "float32"

    def validate(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValidationError("hidden_dim must be divisible by num_heads")
        if self.image_size % self.patch_size != 0:
            raise ValidationError("image_size must be divisible by patch_size")
        if self.hidden_dim % 4 != 0:
            raise ValidationError("hidden_dim must be divisible by 4 (2-D sin-cos positions)")
        if self.time_embed_dim % 2 != 0:
            raise ValidationError("time_embed_dim must be even")
        if self.depth < 1 or self.max_group < 1 or self.num_classes < 1:
            raise ValidationError("depth, max_group and num_classes must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class GroupBatch:
    """One training/sampling group. Member 0 is the anchor."""
    images: np.ndarray      # [N, H, W, Ch]
    labels: np.ndarray      # [N] int, null class allowed
    timesteps: np.ndarray   # [N] int
    noise: np.ndarray       # [N, H, W, Ch]

    ANCHOR = 0

    @property
    def group_size(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class AttnCaptureSpec:
    enabled: bool = True
    layers: tuple[int, ...] | None = None  # None = all layers

    def layer_set(self, depth: int) -> tuple[int, ...]:
        if self.layers is None:
            return tuple(range(depth))
        if any(l < 0 or l >= depth for l in self.layers):
            raise ValidationError(f"capture layers {self.layers} outside [0, {depth})")
        return tuple(sorted(set(self.layers)))


# -- patch <-> image ----------------------------------------------------------

def patchify(x: Tensor, patch: int) -> Tensor:
    """[..., H, W, Ch] -> [..., L, patch*patch*Ch], patches in raster order.

    Lossless: unpatchify(patchify(x)) is bitwise x.
    """
    *lead, h, w, ch = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"image size {h}x{w} not divisible by patch {patch}")
    g_h, g_w = h // patch, w // patch
    nd = len(lead)
    x = x.reshape(*lead, g_h, patch, g_w, patch, ch)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, g_h * g_w, patch * patch * ch)


def unpatchify(x: Tensor, patch: int, image_size: int, channels: int) -> Tensor:
    *lead, L, d = x.shape
    g = image_size // patch
    if L != g * g or d != patch * patch * channels:
        raise DimensionError(f"token shape ({L},{d}) does not match image layout")
    nd = len(lead)
    x = x.reshape(*lead, g, g, patch, patch, channels)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, image_size, image_size, channels)


# -- embeddings ---------------------------------------------------------------

def sincos_position_embedding(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin-cos positions, [grid*grid, dim]; shared by all members."""
    if dim % 4:
        raise ValidationError("position embedding dim must be divisible by 4")
    half = dim // 2

    def one_axis(pos):
        quarter = half // 2
        omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    ys, xs = np.mgrid[0:grid, 0:grid]
    return np.concatenate([one_axis(ys.reshape(-1)), one_axis(xs.reshape(-1))], axis=1)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, [..., dim]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def add_sample_embedding(h: Tensor, slot_table: Tensor) -> Tensor:
    """Add slot_table[i] to every patch token of member i.

    h: [N, L, C] or [B, N, L, C]; uses the first N rows of the table.
    """
    n_axis = h.ndim - 3
    n = h.shape[n_axis]
    if n > slot_table.shape[0]:
        raise ValidationError(f"group size {n} exceeds slot table ({slot_table.shape[0]})")
    slots = slot_table[:n]
    shape = [1] * h.ndim
    shape[n_axis] = n
    shape[-1] = slot_table.shape[-1]
    return add(h, slots.reshape(*shape))


# -- attention ----------------------------------------------------------------

def group_attention(q: Tensor, k: Tensor | None = None, v: Tensor | None = None, *,
                    heads: int = 1, group_on: bool = True,
                    return_block_sums: bool = False):
    """Multi-head attention per member or across the whole group.

    q (and k, v, defaulting to q) are [N, L, C] or [B, N, L, C]. With
    group_on the member axis folds into the sequence, giving one attention
    over N*L tokens per group; otherwise each member attends over its own
    L tokens. Optionally also returns the member-to-member attention mass
    matrix [.., N, N] (mean over heads, each row normalized to sum to 1).
    """
    k = q if k is None else k
    v = q if v is None else v
    squeeze = q.ndim == 3
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    if q.ndim != 4:
        raise DimensionError(f"expected [B, N, L, C] tokens, got {q.shape}")
    b, n, l, c = q.shape
    if c % heads:
        raise DimensionError(f"channels {c} not divisible by heads {heads}")
    dh = c // heads
    if group_on:
        groups, tokens = b, n * l
    else:
        groups, tokens = b * n, l

    def split_heads(t):
        return t.reshape(groups, tokens, heads, dh).transpose(0, 2, 1, 3)

    out, weights = scaled_dot_attention(split_heads(q), split_heads(k), split_heads(v),
                                        return_weights=True)
    out = out.transpose(0, 2, 1, 3).reshape(b, n, l, c)
    block = None
    if return_block_sums:
        if group_on:
            wa = weights.data.reshape(b, heads, n, l, n, l)
            block = wa.sum(axis=(3, 5)).mean(axis=1) / l
        else:
            block = np.broadcast_to(np.eye(n), (b, n, n)).copy()
        if squeeze:
            block = block[0]
    if squeeze:
        out = out.reshape(n, l, c)
    if return_block_sums:
        return out, block
    return out


# -- the denoiser -------------------------------------------------------------

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class DenoiserModel:
    """Noise predictor e(X; t, c) over a group of images."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None,
                 meta: dict | None = None):
        config.validate()
        self.config = config
        self.meta = dict(meta or {})
        self.pos_embed = sincos_position_embedding(config.grid, config.hidden_dim).astype(
            config.np_dtype)
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        c = cfg.hidden_dim

        def param(arr):
            return Tensor(arr.astype(dt), requires_grad=True)

        p: dict[str, Tensor] = {}
        p["patch_embed.w"] = param(_xavier(rng, cfg.patch_dim, c, dt))
        p["patch_embed.b"] = param(np.zeros(c))
        p["slot_table"] = param(rng.normal(0.0, 0.02, size=(cfg.max_group, c)))
        p["class_table"] = param(rng.normal(0.0, 0.02, size=(cfg.num_classes + 1, c)))
        p["time_mlp.w1"] = param(_xavier(rng, cfg.time_embed_dim, c, dt))
        p["time_mlp.b1"] = param(np.zeros(c))
        p["time_mlp.w2"] = param(_xavier(rng, c, c, dt))
        p["time_mlp.b2"] = param(np.zeros(c))
        for i in range(cfg.depth):
            for name in ("wq", "wk", "wv", "wo"):
                p[f"block{i}.attn.{name}"] = param(_xavier(rng, c, c, dt))
                p[f"block{i}.attn.{name[-1]}b"] = param(np.zeros(c))
            p[f"block{i}.mlp.w1"] = param(_xavier(rng, c, 4 * c, dt))
            p[f"block{i}.mlp.b1"] = param(np.zeros(4 * c))
            p[f"block{i}.mlp.w2"] = param(_xavier(rng, 4 * c, c, dt))
            p[f"block{i}.mlp.b2"] = param(np.zeros(c))
            p[f"block{i}.ada.w"] = param(np.zeros((c, 6 * c)))
            p[f"block{i}.ada.b"] = param(np.zeros(6 * c))
        p["final.ada.w"] = param(np.zeros((c, 2 * c)))
        p["final.ada.b"] = param(np.zeros(2 * c))
        p["head.w"] = param(np.zeros((c, cfg.patch_dim)))
        p["head.b"] = param(np.zeros(cfg.patch_dim))
        return p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _conditioning(self, timesteps: np.ndarray, labels: np.ndarray) -> Tensor:
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() > cfg.null_class:
            raise ValidationError(f"labels must lie in [0, {cfg.null_class}]")
        temb = Tensor(timestep_embedding(timesteps, cfg.time_embed_dim).astype(cfg.np_dtype))
        p = self.params
        y = matmul(temb, p["time_mlp.w1"]) + p["time_mlp.b1"]
        y = matmul(silu(y), p["time_mlp.w2"]) + p["time_mlp.b2"]
        return add(y, take_rows(p["class_table"], labels))

    def forward(self, images, timesteps, labels, *, group_on: bool = True,
                group_layers: tuple[int, ...] | None = None,
                capture: AttnCaptureSpec | None = None,
                hidden_layer: int | None = None):
        """Predict per-member noise.

        images: [B, N, H, W, Ch] array (or Tensor); timesteps, labels: [B, N] ints.
        group_on enables cross-member attention; group_layers (when not
        None) limits it to those layer indices. Returns (eps_hat, captures)
        where captures maps layer index -> [B, N, N] block-sum matrices
        (empty dict unless capture is enabled).

        With hidden_layer set, the pass stops after that block and returns
        the patch-pooled activations [B, N, C] instead of noise (feature
        extraction for probes).
        """
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images, dtype=cfg.np_dtype)
        if x.ndim != 5:
            raise DimensionError(f"expected images [B, N, H, W, Ch], got {x.shape}")
        b, n, h, w, ch = x.shape
        if (h, w, ch) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(f"image shape {(h, w, ch)} does not match config")
        if n > cfg.max_group:
            raise ValidationError(f"group size {n} exceeds max_group {cfg.max_group}")
        timesteps = np.asarray(timesteps, dtype=np.int64).reshape(b, n)
        labels = np.asarray(labels, dtype=np.int64).reshape(b, n)
        p = self.params

        tokens = patchify(x, cfg.patch_size)
        tokens = add(matmul(tokens, p["patch_embed.w"]), p["patch_embed.b"])
        tokens = add(tokens, Tensor(self.pos_embed.reshape(1, 1, cfg.seq_len, cfg.hidden_dim)))
        tokens = add_sample_embedding(tokens, p["slot_table"])

        y = self._conditioning(timesteps, labels)          # [B, N, C]
        y_act = silu(y)
        c = cfg.hidden_dim

        capture_layers = ()
        captures: dict[int, np.ndarray] = {}
        if capture is not None and capture.enabled:
            capture_layers = capture.layer_set(cfg.depth)

        allowed = set(range(cfg.depth)) if group_layers is None else set(group_layers)
        if any(l < 0 or l >= cfg.depth for l in allowed):
            raise ValidationError(f"group_layers {sorted(allowed)} outside [0, {cfg.depth})")
        if hidden_layer is not None and not 0 <= hidden_layer < cfg.depth:
            raise ValidationError(f"hidden_layer {hidden_layer} outside [0, {cfg.depth})")

        h_t = tokens
        for i in range(cfg.depth):
            mod = add(matmul(y_act, p[f"block{i}.ada.w"]), p[f"block{i}.ada.b"])

            def chunk(j):
                return mod[..., j * c:(j + 1) * c].reshape(b, n, 1, c)

            shift_msa, scale_msa, gate_msa = chunk(0), chunk(1), chunk(2)
            shift_mlp, scale_mlp, gate_mlp = chunk(3), chunk(4), chunk(5)

            normed = add(mul(layer_norm(h_t), add(scale_msa, 1.0)), shift_msa)
            q = add(matmul(normed, p[f"block{i}.attn.wq"]), p[f"block{i}.attn.qb"])
            k = add(matmul(normed, p[f"block{i}.attn.wk"]), p[f"block{i}.attn.kb"])
            v = add(matmul(normed, p[f"block{i}.attn.wv"]), p[f"block{i}.attn.vb"])
            layer_group = group_on and i in allowed
            want_block = i in capture_layers
            att = group_attention(q, k, v, heads=cfg.num_heads, group_on=layer_group,
                                  return_block_sums=want_block)
            if want_block:
                att, block = att
                captures[i] = block
            att = add(matmul(att, p[f"block{i}.attn.wo"]), p[f"block{i}.attn.ob"])
            h_t = add(h_t, mul(gate_msa, att))

            normed2 = add(mul(layer_norm(h_t), add(scale_mlp, 1.0)), shift_mlp)
            hidden = gelu(add(matmul(normed2, p[f"block{i}.mlp.w1"]), p[f"block{i}.mlp.b1"]))
            mlp_out = add(matmul(hidden, p[f"block{i}.mlp.w2"]), p[f"block{i}.mlp.b2"])
            h_t = add(h_t, mul(gate_mlp, mlp_out))

            if hidden_layer == i:
                return h_t.mean(axis=2), captures

        fmod = add(matmul(y_act, p["final.ada.w"]), p["final.ada.b"])
        f_shift = fmod[..., 0:c].reshape(b, n, 1, c)
        f_scale = fmod[..., c:2 * c].reshape(b, n, 1, c)
        h_t = add(mul(layer_norm(h_t), add(f_scale, 1.0)), f_shift)
        out = add(matmul(h_t, p["head.w"]), p["head.b"])
        eps_hat = unpatchify(out, cfg.patch_size, cfg.image_size, cfg.channels)
        return eps_hat, captures

    def forward_group(self, batch: GroupBatch, *, group_on: bool = True,
                      group_layers: tuple[int, ...] | None = None,
                      capture: AttnCaptureSpec | None = None):
        """Single-group convenience wrapper around forward()."""
        eps, caps = self.forward(batch.images[None], batch.timesteps[None],
                                 batch.labels[None], group_on=group_on,
                                 group_layers=group_layers, capture=capture)
        caps = {layer: m[0] for layer, m in caps.items()}
        n = batch.group_size
        return eps.reshape(n, *eps.shape[2:]), caps
