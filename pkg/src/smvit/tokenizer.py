"""Image-to-token conversion and the token-aligned saliency mask."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .numerics import DimensionError, matmul


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 24
    channels: int = 3
    patch_side: int = 4
    embed_dim: int = 32
    layers: int = 2
    heads: int = 4
    d_theta: float = 0.25
    num_classes: int = 10
    tau_patch: float = 0.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_side", "channels", "patch_side", "embed_dim", "layers", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.image_side % self.patch_side:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.d_theta < 0:
            raise ConfigError("d_theta must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0.0 <= self.tau_patch < 1.0:
            raise ConfigError("tau_patch must be in [0, 1)")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_text(self) -> str:
        return "".join(f"{k}:{v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "ViTConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = type(f.default)(values[f.name])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ViTConfig":
        values = {}
        known = {f.name for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition(":")
            if not sep or key not in known:
                raise ConfigError(f"bad config record line {line!r}")
            values[key] = value.strip()
        return cls.from_mapping(values)


def split_patches(images: np.ndarray, patch_side: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N_p, P*P*C).

    Patches are taken row-major over the grid; inside a patch, pixels are
    row-major with channels interleaved per pixel.
    """
    *lead, h, w, c = images.shape
    p = patch_side
    if h != w or h % p:
        raise ConfigError(f"image {h}x{w} cannot be split into {p}x{p} patches")
    g = h // p
    x = images.reshape(*lead, g, p, g, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, g * g, p * p * c)


def merge_patches(patches: np.ndarray, patch_side: int, channels: int) -> np.ndarray:
    """Inverse of :func:`split_patches`."""
    *lead, n_p, _ = patches.shape
    g = int(round(np.sqrt(n_p)))
    if g * g != n_p:
        raise ConfigError(f"{n_p} patches do not form a square grid")
    p = patch_side
    x = patches.reshape(*lead, g, g, p, p, channels)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, g * p, g * p, channels)


def embed(patches, projection, position, class_token):
    """Project patches, prepend the class token, add position embeddings.

    ``patches`` is (..., N_p, P*P*C); returns (..., N_p+1, D).
    """
    n_p = patches.shape[-2]
    d = projection.shape[1]
    if position.shape != (n_p + 1, d) or class_token.shape[-1] != d:
        raise DimensionError(
            f"embed: position {position.shape}, class token {class_token.shape} "
            f"for {n_p} patches of width {d}"
        )
    proj = matmul(patches, projection)
    cls = np.broadcast_to(class_token.reshape(1, d), (*proj.shape[:-2], 1, d))
    return np.concatenate([cls, proj], axis=-2) + position


def embed_backward(dtokens, patches, projection):
    """Returns ``(dprojection, dposition, dclass_token)``."""
    d = projection.shape[1]
    dposition = dtokens.reshape(-1, *dtokens.shape[-2:]).sum(axis=0)
    dclass = dtokens[..., 0, :].reshape(-1, d).sum(axis=0)
    dproj = np.matmul(
        patches.reshape(-1, patches.shape[-1]).T, dtokens[..., 1:, :].reshape(-1, d)
    )
    return dproj, dposition, dclass


def downsample_mask(mask: np.ndarray, patch_side: int, tau_patch: float = 0.0) -> np.ndarray:
    """Pixel mask (..., H, W) -> patch vector (..., N_p).

    A patch is salient when its fraction of positive pixels exceeds
    ``tau_patch``; with the default 0 any positive pixel marks the patch.
    """
    *lead, h, w = mask.shape
    p = patch_side
    if h != w or h % p:
        raise ConfigError(f"mask {h}x{w} does not tile into {p}x{p} patches")
    g = h // p
    frac = (np.asarray(mask) > 0).reshape(*lead, g, p, g, p).mean(axis=(-3, -1))
    return (frac > tau_patch).reshape(*lead, g * g).astype(np.uint8)


def flatten_mask(patch_vector: np.ndarray) -> np.ndarray:
    """Prepend the always-positive class-token entry."""
    pv = np.asarray(patch_vector, dtype=np.uint8)
    ones = np.ones((*pv.shape[:-1], 1), dtype=np.uint8)
    return np.concatenate([ones, pv], axis=-1)
