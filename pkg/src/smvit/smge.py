"""Salient mask-guided encoder.

Pre-norm transformer layers whose multi-head self-attention boosts the
class-token score row on salient tokens before the softmax. For every head,
``x_max`` is the largest class-to-patch score (the class-self entry is not
scanned) and ``x_max * d_theta`` is added to each row-0 entry whose mask bit
is set. Mask bit 0 belongs to the class token and is always 1.

Arrays are batched over any leading axes: tokens are ``(..., T, D)``, masks
``(..., T)``, scores ``(..., heads, T, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx

LAYER_KEYS = (
    "ln1.gamma",
    "ln1.beta",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.gamma",
    "ln2.beta",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
)


def layer_shapes(d: int) -> dict[str, tuple[int, ...]]:
    return {
        "ln1.gamma": (d,),
        "ln1.beta": (d,),
        "attn.qkv.weight": (d, 3 * d),
        "attn.qkv.bias": (3 * d,),
        "attn.proj.weight": (d, d),
        "attn.proj.bias": (d,),
        "ln2.gamma": (d,),
        "ln2.beta": (d,),
        "mlp.fc1.weight": (d, 4 * d),
        "mlp.fc1.bias": (4 * d,),
        "mlp.fc2.weight": (4 * d, d),
        "mlp.fc2.bias": (d,),
    }


def attention_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Pre-softmax scores ``q k^T / sqrt(d_k)``. Values are applied after the softmax."""
    return nx.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])


def class_row_max(scores: np.ndarray):
    """Per-head maximum of the class-to-patch scores and its token index.

    Ties resolve to the lowest index.
    """
    patch_row = scores[..., 0, 1:]
    idx = np.argmax(patch_row, axis=-1)
    x_max = np.take_along_axis(patch_row, idx[..., None], axis=-1)[..., 0]
    return x_max, idx + 1


def _mask_row(m, scores):
    # (..., T) -> broadcastable against the (..., heads, T) row-0 slab;
    # a bare (T, T) score matrix has no head axis
    m = np.asarray(m, dtype=np.float64)
    return m if scores.ndim == 2 else np.expand_dims(m, -2)


def augment_class_row(scores: np.ndarray, m: np.ndarray, d_theta: float) -> np.ndarray:
    """Add ``x_max * d_theta`` to the masked entries of each head's row 0."""
    out, _ = _augment(scores.copy(), m, d_theta)
    return out


def _augment(scores, m, d_theta):
    # modifies ``scores`` in place
    if np.shape(m)[-1] != scores.shape[-1]:
        raise nx.DimensionError(f"mask length {np.shape(m)[-1]} vs {scores.shape[-1]} tokens")
    x_max, arg = class_row_max(scores)
    mrow = _mask_row(m, scores)
    scores[..., 0, :] += (x_max * d_theta)[..., None] * mrow
    return scores, (arg, mrow, d_theta)


def _augment_backward(dout, cache):
    # modifies ``dout`` in place
    arg, mrow, d_theta = cache
    dscores = dout
    dx_max = d_theta * (dout[..., 0, :] * mrow).sum(axis=-1)
    row0 = dscores[..., 0, :]  # view
    picked = np.take_along_axis(row0, arg[..., None], -1)
    np.put_along_axis(row0, arg[..., None], picked + dx_max[..., None], -1)
    return dscores


def _split_heads(x, heads):
    *lead, t, d = x.shape
    return np.swapaxes(x.reshape(*lead, t, heads, d // heads), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, t, h, dk = x.shape
    return x.reshape(*lead, t, h * dk)


@dataclass
class AttentionCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray
    aug: tuple | None


def guided_attention(x, m, d_theta, params, heads, guided=True):
    """Multi-head self-attention with class-row augmentation.

    ``params`` holds ``attn.qkv.*`` and ``attn.proj.*``. When ``guided`` is
    false, or ``m`` is None, this is plain attention and ``m`` is ignored.
    Returns ``(out, cache)``; ``cache.probs`` is (..., heads, T, T).
    """
    d = x.shape[-1]
    qkv = nx.linear(x, params["attn.qkv.weight"], params["attn.qkv.bias"])
    q = _split_heads(qkv[..., :d], heads)
    k = _split_heads(qkv[..., d : 2 * d], heads)
    v = _split_heads(qkv[..., 2 * d :], heads)
    scores = attention_scores(q, k)
    aug = None
    if guided and m is not None:
        scores, aug = _augment(scores, m, d_theta)
    probs = nx.softmax_rows(scores)
    ctx = _merge_heads(np.matmul(probs, v))
    out = nx.linear(ctx, params["attn.proj.weight"], params["attn.proj.bias"])
    return out, AttentionCache(x, q, k, v, probs, ctx, aug)


def guided_attention_backward(dout, cache: AttentionCache, params):
    """Returns ``(dx, grads)`` with grads keyed like ``params``."""
    if cache is None:
        raise nx.BackwardStateError("attention backward called before forward")
    grads = {}
    dctx, grads["attn.proj.weight"], grads["attn.proj.bias"] = nx.linear_backward(
        dout, cache.ctx, params["attn.proj.weight"]
    )
    dheads = _split_heads(dctx, cache.q.shape[-3])
    dprobs = np.matmul(dheads, np.swapaxes(cache.v, -1, -2))
    dv = np.matmul(np.swapaxes(cache.probs, -1, -2), dheads)
    dscores = nx.softmax_rows_backward(dprobs, cache.probs)
    if cache.aug is not None:
        dscores = _augment_backward(dscores, cache.aug)
    scale = 1.0 / np.sqrt(cache.q.shape[-1])
    dq = np.matmul(dscores, cache.k) * scale
    dk = np.matmul(np.swapaxes(dscores, -1, -2), cache.q) * scale
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
    dx, grads["attn.qkv.weight"], grads["attn.qkv.bias"] = nx.linear_backward(
        dqkv, cache.x, params["attn.qkv.weight"]
    )
    return dx, grads


@dataclass
class LayerCache:
    ln1: tuple
    attn: AttentionCache
    ln2: tuple
    h2: np.ndarray
    f1: np.ndarray
    g: np.ndarray


def encoder_layer(x, m, d_theta, params, heads, guided=True, eps=1e-6):
    """``x + MSA(LN(x))`` then ``+ MLP(LN(.))``. Returns ``(out, cache)``."""
    h1, ln1 = nx.layer_norm(x, params["ln1.gamma"], params["ln1.beta"], eps)
    a, attn = guided_attention(h1, m, d_theta, params, heads, guided)
    x1 = x + a
    h2, ln2 = nx.layer_norm(x1, params["ln2.gamma"], params["ln2.beta"], eps)
    f1 = nx.linear(h2, params["mlp.fc1.weight"], params["mlp.fc1.bias"])
    g = nx.gelu(f1)
    f2 = nx.linear(g, params["mlp.fc2.weight"], params["mlp.fc2.bias"])
    return x1 + f2, LayerCache(ln1, attn, ln2, h2, f1, g)


def encoder_layer_backward(dout, cache: LayerCache, params):
    if cache is None:
        raise nx.BackwardStateError("encoder layer backward called before forward")
    grads = {}
    dg, grads["mlp.fc2.weight"], grads["mlp.fc2.bias"] = nx.linear_backward(
        dout, cache.g, params["mlp.fc2.weight"]
    )
    df1 = nx.gelu_backward(dg, cache.f1)
    dh2, grads["mlp.fc1.weight"], grads["mlp.fc1.bias"] = nx.linear_backward(
        df1, cache.h2, params["mlp.fc1.weight"]
    )
    dx1, grads["ln2.gamma"], grads["ln2.beta"] = nx.layer_norm_backward(dh2, cache.ln2)
    dx1 = dx1 + dout
    dh1, attn_grads = guided_attention_backward(dx1, cache.attn, params)
    grads.update(attn_grads)
    dx, grads["ln1.gamma"], grads["ln1.beta"] = nx.layer_norm_backward(dh1, cache.ln1)
    return dx + dx1, grads


def encoder_forward(x, m, d_theta, layer_params, heads, guided=True, eps=1e-6):
    """Apply every layer with the same mask.

    Returns ``(out, caches, class_rows)`` where ``class_rows[l]`` is the
    post-softmax row-0 attention of layer ``l``, shape (..., heads, T).
    """
    caches = []
    rows = []
    for params in layer_params:
        x, cache = encoder_layer(x, m, d_theta, params, heads, guided, eps)
        caches.append(cache)
        rows.append(cache.attn.probs[..., 0, :])
    return x, caches, rows


def encoder_backward(dout, caches, layer_params):
    grads = [None] * len(caches)
    for i in reversed(range(len(caches))):
        dout, grads[i] = encoder_layer_backward(dout, caches[i], layer_params[i])
    return dout, grads
