"""SM-ViT assembly: embedding, guided encoder, classification head,
attention heatmaps and the binary checkpoint format."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from . import numerics as nx
from . import smge
from .tokenizer import (
    ConfigError,
    ViTConfig,
    downsample_mask,
    embed,
    embed_backward,
    flatten_mask,
    split_patches,
)

MAGIC = b"SMVT"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor, in checkpoint order."""
    d = config.embed_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "cls_token": (d,),
        "pos_embed": (config.num_tokens, d),
    }
    for i in range(config.layers):
        for key, shape in smge.layer_shapes(d).items():
            shapes[f"layers.{i}.{key}"] = shape
    shapes.update(
        {
            "norm.gamma": (d,),
            "norm.beta": (d,),
            "head.fc1.weight": (d, d),
            "head.fc1.bias": (d,),
            "head.fc2.weight": (d, config.num_classes),
            "head.fc2.bias": (config.num_classes,),
        }
    )
    return shapes


def init_params(config: ViTConfig, seed=0, std=0.02) -> dict[str, np.ndarray]:
    """Truncated-normal weights (cut at two std), zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(("bias", "beta")):
            params[name] = np.zeros(shape)
        else:
            params[name] = std * truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)
    return params


def layer_view(params, i):
    prefix = f"layers.{i}."
    return {key: params[prefix + key] for key in smge.LAYER_KEYS}


def mask_vector(pixel_mask: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Pixel mask (..., H, W) -> token mask (..., N_p+1)."""
    return flatten_mask(downsample_mask(pixel_mask, config.patch_side, config.tau_patch))


@dataclass
class AttentionRecord:
    """Post-softmax class-token rows, shape (layers, ..., heads, tokens)."""

    rows: np.ndarray

    @property
    def layers(self):
        return self.rows.shape[0]

    @property
    def heads(self):
        return self.rows.shape[-2]


@dataclass
class ForwardCache:
    patches: np.ndarray
    layers: list
    final_ln: tuple
    z0: np.ndarray
    f1: np.ndarray
    g: np.ndarray


def forward(images, masks, config: ViTConfig, params, guided=True):
    """Logits for a batch of already-cropped images.

    ``images`` is (..., H, W, C); ``masks`` is the token mask (..., N_p+1)
    and is ignored when ``guided`` is false. Returns
    ``(logits, AttentionRecord, ForwardCache)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != (config.image_side, config.image_side, config.channels):
        raise ValueError(
            f"image shape {images.shape[-3:]} does not match config "
            f"{(config.image_side, config.image_side, config.channels)}"
        )
    if guided:
        if masks is None or np.shape(masks)[-1] != config.num_tokens:
            raise ValueError(f"guided forward needs a mask of length {config.num_tokens}")
    else:
        masks = None
    patches = split_patches(images, config.patch_side)
    x = embed(patches, params["patch_embed.weight"], params["pos_embed"], params["cls_token"])
    layers = [layer_view(params, i) for i in range(config.layers)]
    x, caches, rows = smge.encoder_forward(
        x, masks, config.d_theta, layers, config.heads, guided, config.ln_eps
    )
    z, final_ln = nx.layer_norm(x, params["norm.gamma"], params["norm.beta"], config.ln_eps)
    z0 = z[..., 0, :]
    f1 = nx.linear(z0, params["head.fc1.weight"], params["head.fc1.bias"])
    g = nx.gelu(f1)
    logits = nx.linear(g, params["head.fc2.weight"], params["head.fc2.bias"])
    record = AttentionRecord(np.stack(rows))
    return logits, record, ForwardCache(patches, caches, final_ln, z0, f1, g)


def backward(dlogits, cache: ForwardCache, config: ViTConfig, params):
    """Gradients of every parameter given the upstream logit gradient."""
    if cache is None:
        raise nx.BackwardStateError("model backward called before forward")
    grads = {}
    dg, grads["head.fc2.weight"], grads["head.fc2.bias"] = nx.linear_backward(
        dlogits, cache.g, params["head.fc2.weight"]
    )
    df1 = nx.gelu_backward(dg, cache.f1)
    dz0, grads["head.fc1.weight"], grads["head.fc1.bias"] = nx.linear_backward(
        df1, cache.z0, params["head.fc1.weight"]
    )
    xhat = cache.final_ln[0]
    dz = np.zeros_like(xhat)
    dz[..., 0, :] = dz0
    dx, grads["norm.gamma"], grads["norm.beta"] = nx.layer_norm_backward(dz, cache.final_ln)
    layers = [layer_view(params, i) for i in range(config.layers)]
    dx, layer_grads = smge.encoder_backward(dx, cache.layers, layers)
    for i, lg in enumerate(layer_grads):
        for key, value in lg.items():
            grads[f"layers.{i}.{key}"] = value
    (
        grads["patch_embed.weight"],
        grads["pos_embed"],
        grads["cls_token"],
    ) = embed_backward(dx, cache.patches, params["patch_embed.weight"])
    return {name: grads[name] for name in params}


def loss_and_grads(images, masks, labels, config, params, guided=True):
    logits, record, cache = forward(images, masks, config, params, guided)
    loss = nx.cross_entropy(logits, labels)
    grads = backward(nx.cross_entropy_backward(logits, labels), cache, config, params)
    return loss, grads, logits


class SMViT:
    """Stateful wrapper: parameters plus the cache of the last forward pass."""

    def __init__(self, config: ViTConfig, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self._cache = None

    def forward(self, images, masks=None, guided=True):
        logits, record, self._cache = forward(images, masks, self.config, self.params, guided)
        return logits, record

    def backward(self, dlogits):
        if self._cache is None:
            raise nx.BackwardStateError("backward called before forward")
        return backward(dlogits, self._cache, self.config, self.params)

    def predict(self, images, masks=None, guided=True):
        logits, _ = self.forward(images, masks, guided)
        return predict(logits)


def predict(logits: np.ndarray):
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)


def attention_heatmap(record: AttentionRecord, config: ViTConfig, index=None) -> np.ndarray:
    """Final-layer class-token attention averaged over heads, as an H x W
    image in [0, 255] (per-image min-max; a constant map is all zeros).

    ``index`` selects a sample when the record is batched.
    """
    rows = record.rows[-1]
    if index is not None:
        rows = rows[index]
    if rows.ndim != 2:
        raise ValueError(f"expected (heads, tokens) for one image, got {rows.shape}")
    mean = rows.mean(axis=0)[1:]
    g = int(round(np.sqrt(mean.size)))
    if g * g != mean.size:
        raise ConfigError(f"{mean.size} patches do not form a square grid")
    grid = mean.reshape(g, g)
    p = config.image_side // g
    heat = np.repeat(np.repeat(grid, p, axis=0), p, axis=1)
    lo, hi = heat.min(), heat.max()
    if hi == lo:
        return np.zeros_like(heat)
    return 255.0 * (heat - lo) / (hi - lo)


def save_checkpoint(path: str | os.PathLike, config: ViTConfig, params) -> None:
    shapes = param_shapes(config)
    cfg = config.to_text().encode("utf-8")
    out = [MAGIC, bytes([FORMAT_VERSION]), struct.pack("<I", len(cfg)), cfg]
    for name, shape in shapes.items():
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise CheckpointFormatError(f"tensor {name}: shape {arr.shape}, expected {shape}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        out.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint while reading {what} at byte {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | os.PathLike):
    """Returns ``(config, params)`` with params widened to float64."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic: not an SMVT checkpoint")
    version = r.take(1, "version")[0]
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    cfg_len = r.u32("config length")
    try:
        config = ViTConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad config record: {exc}") from exc
    params = {}
    for name, shape in param_shapes(config).items():
        got = r.take(r.u32(f"name length of {name}"), f"name of {name}")
        if got != name.encode("utf-8"):
            raise CheckpointFormatError(f"expected tensor {name}, found {got!r}")
        rank = r.u32(f"rank of {name}")
        if rank != len(shape):
            raise CheckpointFormatError(f"tensor {name}: rank {rank}, expected {len(shape)}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        if dims != shape:
            raise CheckpointFormatError(f"tensor {name}: shape {dims}, expected {shape}")
        n = int(np.prod(shape))
        raw = r.take(4 * n, f"data of {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes after last tensor")
    return config, params
