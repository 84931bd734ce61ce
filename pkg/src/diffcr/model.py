"""Desk-scale diffusion transformer: patch embedding, conditioning, blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import kernels as K
from . import tensor as tc
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 16
    patch_side: int = 2
    hidden_dim: int = 64
    heads: int = 4
    layers: int = 8
    mlp_ratio: int = 4
    classes: int = 10
    train_timesteps: int = 200
    sample_steps: int = 50
    regions: int = 4
    target_ratio: float = 0.3
    ratio_loss_coeff: float = 0.3
    cfg_scale: float = 4.5

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not 1 <= self.regions <= self.train_timesteps:
            raise ConfigError(f"regions {self.regions} must lie in [1, {self.train_timesteps}]")
        if not 0.0 <= self.target_ratio <= 1.0:
            raise ConfigError(f"target_ratio {self.target_ratio} outside [0, 1]")
        if self.sample_steps > self.train_timesteps:
            raise ConfigError("sample_steps cannot exceed train_timesteps")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# tokenization

def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """(B, H, W) -> (B, N, p*p), row-major over the patch grid."""
    images = np.asarray(images)
    squeeze = images.ndim == 2
    if squeeze:
        images = images[None]
    b, h, w = images.shape
    p = patch_side
    if h != w or h % p:
        raise ConfigError(f"image {h}x{w} does not tile into {p}x{p} patches")
    g = h // p
    out = images.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b, g * g, p * p)
    return out[0] if squeeze else out


def unpatchify(tokens, patch_side: int):
    """Inverse of :func:`patchify`; works on arrays and Tensors."""
    p = patch_side
    if isinstance(tokens, Tensor):
        b, n, _ = tokens.shape
        g = math.isqrt(n)
        x = tokens.reshape(b, g, g, p, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(b, g * p, g * p)
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    b, n, _ = tokens.shape
    g = math.isqrt(n)
    out = tokens.reshape(b, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(b, g * p, g * p)
    return out[0] if squeeze else out


def timestep_embedding(t, dim: int, T: Optional[int] = None, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding; first half sin, second half cos.

    Returns ``(dim,)`` for a scalar ``t`` and ``(B, dim)`` for a vector.
    """
    t_arr = np.asarray(t)
    if T is not None and (t_arr.min() < 0 or t_arr.max() >= T):
        raise ValueError(f"timestep {t} outside [0, {T})")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t_arr.astype(np.float64)[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


# ---------------------------------------------------------------------------
# parameters

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: tc.Rng) -> dict[str, Tensor]:
    """Fresh model weights. Every block starts as the identity map.

    Attention/MLP output projections, adaLN modulations and the final
    projection are zero, so the untrained model predicts zero noise.
    """
    gen = rng.generator("init")
    d, pd, n = config.hidden_dim, config.patch_dim, config.tokens
    hid = config.mlp_ratio * d
    p: dict[str, np.ndarray] = {
        "embed.w": _xavier(gen, pd, d),
        "embed.b": np.zeros(d),
        "pos": gen.normal(0.0, 0.02, size=(n, d)),
        "class_embed": gen.normal(0.0, 0.02, size=(config.classes + 1, d)),
        "temb.w1": _xavier(gen, d, d),
        "temb.b1": np.zeros(d),
        "temb.w2": _xavier(gen, d, d),
        "temb.b2": np.zeros(d),
    }
    for i in range(config.layers):
        pre = f"blocks.{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "attn.wq"] = _xavier(gen, d, d)
        p[pre + "attn.wk"] = _xavier(gen, d, d)
        p[pre + "attn.wv"] = _xavier(gen, d, d)
        p[pre + "attn.wo"] = np.zeros((d, d))
        p[pre + "mlp.w1"] = _xavier(gen, d, hid)
        p[pre + "mlp.b1"] = np.zeros(hid)
        p[pre + "mlp.w2"] = np.zeros((hid, d))
        p[pre + "mlp.b2"] = np.zeros(d)
        p[pre + "ada.w"] = np.zeros((d, 2 * d))
        p[pre + "ada.b"] = np.zeros(2 * d)
    p["final.ln.g"] = np.ones(d)
    p["final.ln.b"] = np.zeros(d)
    p["final.ada.w"] = np.zeros((d, 2 * d))
    p["final.ada.b"] = np.zeros(2 * d)
    p["final.w"] = np.zeros((d, pd))
    p["final.b"] = np.zeros(pd)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def block_params(params: dict, layer: int) -> dict[str, Tensor]:
    pre = f"blocks.{layer}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# ---------------------------------------------------------------------------
# forward pieces

def _modulated_norm(h: Tensor, g: Tensor, b: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    x = tc.layernorm(h) * g + b
    return x * (scale + 1.0) + shift


def attention(h: Tensor, blk: dict, heads: int) -> Tensor:
    """Multi-head self-attention over the rows of ``h`` (B, n, d), from primitives."""
    bsz, n, d = h.shape
    dh = d // heads

    def split(x):
        return x.reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(h @ blk["attn.wq"])
    k = split(h @ blk["attn.wk"])
    v = split(h @ blk["attn.wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    out = tc.softmax(scores) @ v
    out = out.transpose(0, 2, 1, 3).reshape(bsz, n, d)
    return out @ blk["attn.wo"]


def modulation(cond: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Per-sample (shift, scale), each shaped (B, 1, d)."""
    d = w.shape[0]
    mod = K.affine(cond, w, b).reshape(cond.shape[0], 2, d)
    return tc.take(mod, [0], axis=1), tc.take(mod, [1], axis=1)


def block_forward_reference(h: Tensor, cond: Tensor, blk: dict, heads: int) -> Tensor:
    """:func:`block_forward` spelled out in unfused primitives."""
    shift, scale = modulation(cond, blk["ada.w"], blk["ada.b"])
    a = attention(_modulated_norm(h, blk["ln1.g"], blk["ln1.b"], shift, scale), blk, heads)
    h1 = h + a
    x = _modulated_norm(h1, blk["ln2.g"], blk["ln2.b"], shift, scale)
    m = tc.gelu(x @ blk["mlp.w1"] + blk["mlp.b1"]) @ blk["mlp.w2"] + blk["mlp.b2"]
    return a + m


def block_forward(h: Tensor, cond: Tensor, blk: dict, heads: int) -> Tensor:
    """Residual update U of one transformer block; layer output is h + U.

    ``h`` is (B, n, d) and ``cond`` (B, d). Attention only sees the given
    rows, so callers pass the selected tokens.
    """
    if h.ndim == 2:
        return block_forward(h.reshape(1, *h.shape), cond.reshape(1, -1), blk, heads).reshape(h.shape)
    if h.shape[1] == 0:
        return Tensor(np.zeros(h.shape, dtype=h.dtype))
    shift, scale = modulation(cond, blk["ada.w"], blk["ada.b"])
    x = K.modulated_layernorm(h, blk["ln1.g"], blk["ln1.b"], shift, scale)
    a = K.self_attention(x, blk["attn.wq"], blk["attn.wk"], blk["attn.wv"], heads) @ blk["attn.wo"]
    x = K.modulated_layernorm(h + a, blk["ln2.g"], blk["ln2.b"], shift, scale)
    return a + K.mlp(x, blk["mlp.w1"], blk["mlp.b1"], blk["mlp.w2"], blk["mlp.b2"])


def conditioning(params: dict, config: ModelConfig, t, y) -> Tensor:
    """cond = MLP(sinusoid(t)) + class_embed[y]; ``y == classes`` is the null class."""
    t = np.atleast_1d(np.asarray(t))
    y = np.atleast_1d(np.asarray(y))
    emb = Tensor(timestep_embedding(t, config.hidden_dim, config.train_timesteps))
    temb = K.mlp(emb, params["temb.w1"], params["temb.b1"], params["temb.w2"], params["temb.b2"])
    return temb + tc.take(params["class_embed"], y, axis=0)


def embed(params: dict, config: ModelConfig, x_t: np.ndarray) -> Tensor:
    tokens = Tensor(patchify(x_t, config.patch_side))
    return K.affine(tokens, params["embed.w"], params["embed.b"]) + params["pos"]


def final_layer(params: dict, config: ModelConfig, h: Tensor, cond: Tensor) -> Tensor:
    shift, scale = modulation(cond, params["final.ada.w"], params["final.ada.b"])
    x = K.modulated_layernorm(h, params["final.ln.g"], params["final.ln.b"], shift, scale)
    out = K.affine(x, params["final.w"], params["final.b"])
    return unpatchify(out, config.patch_side)


def model_forward(params: dict, config: ModelConfig, x_t, t, y, ratios=None, mode: str = "train",
                  rescale: bool = True, scores_out: Optional[dict] = None) -> Tensor:
    """Predict noise for a batch of noised images.

    ``ratios=None`` runs the dense network and ignores the routers. With a
    :class:`~diffcr.ratio.RatioTable`, ``mode="train"`` mixes the two bins
    around every continuous ratio and ``mode="infer"`` runs one branch per
    layer at the (already snapped) bin. ``scores_out``, when given, collects
    each layer's router scores.
    """
    from .ratio import diffcr_block_forward, region_of_timestep
    from .routing import N_BINS, route_batch, router_scores

    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x_t = np.asarray(x_t)
    if x_t.ndim == 2:
        x_t = x_t[None]
    if x_t.shape[1:] != (config.image_side, config.image_side):
        raise ConfigError(f"image shape {x_t.shape[1:]} does not match image_side {config.image_side}")
    bsz = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (bsz,))
    y = np.broadcast_to(np.asarray(y), (bsz,))
    h = embed(params, config, x_t)
    cond = conditioning(params, config, t, y)
    if ratios is not None:
        regions = region_of_timestep(t, config.train_timesteps, ratios.regions)
        if mode == "train":
            per_sample = tc.take(ratios.values, regions, axis=1)
        else:
            if not ratios.is_snapped():
                raise ValueError("inference needs a snapped ratio table")
            bins = np.rint(ratios.numpy()[:, regions] * N_BINS).astype(int)
    for i in range(config.layers):
        blk = block_params(params, i)
        if ratios is None:
            h = h + block_forward(h, cond, blk, config.heads)
            continue
        w, b = params[f"router.{i}.w"], params[f"router.{i}.b"]
        if mode == "train":
            if scores_out is not None:
                scores_out[i] = router_scores(h, w, b).data
            r = tc.take(per_sample, [i], axis=0).reshape(bsz)
            h = diffcr_block_forward(h, cond, blk, w, b, r, config.heads, rescale)
        else:
            s = router_scores(h, w, b)
            if scores_out is not None:
                scores_out[i] = s.data
            h = route_batch(h, cond, blk, s, bins[i], config.heads, rescale)
    return final_layer(params, config, h, cond)
