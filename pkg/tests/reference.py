"""Plain vanilla ViT written without the package's numerics, used as an oracle.

Works on one image at a time with explicit per-head loops. Optionally adds a
class-row boost so guided-attention identities can be checked independently.
"""

import math

import numpy as np


def _ln(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def _gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def patches_of(image, p):
    h, w, c = image.shape
    out = []
    for gr in range(h // p):
        for gc in range(w // p):
            block = image[gr * p : (gr + 1) * p, gc * p : (gc + 1) * p, :]
            out.append(block.reshape(-1))
    return np.array(out)


def layer(x, prm, heads, eps, mask=None, d_theta=0.0):
    t, d = x.shape
    dk = d // heads
    h = _ln(x, prm["ln1.gamma"], prm["ln1.beta"], eps)
    qkv = h @ prm["attn.qkv.weight"] + prm["attn.qkv.bias"]
    ctx = np.zeros((t, d))
    probs = np.zeros((heads, t, t))
    for a in range(heads):
        q = qkv[:, a * dk : (a + 1) * dk]
        k = qkv[:, d + a * dk : d + (a + 1) * dk]
        v = qkv[:, 2 * d + a * dk : 2 * d + (a + 1) * dk]
        s = q @ k.T / math.sqrt(dk)
        if mask is not None:
            x_max = max(s[0, 1:])
            for i in range(t):
                if mask[i]:
                    s[0, i] += x_max * d_theta
        for r in range(t):
            probs[a, r] = _softmax(s[r])
        ctx[:, a * dk : (a + 1) * dk] = probs[a] @ v
    x = x + ctx @ prm["attn.proj.weight"] + prm["attn.proj.bias"]
    h = _ln(x, prm["ln2.gamma"], prm["ln2.beta"], eps)
    f = _gelu(h @ prm["mlp.fc1.weight"] + prm["mlp.fc1.bias"])
    return x + f @ prm["mlp.fc2.weight"] + prm["mlp.fc2.bias"], probs


def forward(image, config, params, mask=None, d_theta=0.0):
    """Returns (logits, [per-layer probs (heads, T, T)])."""
    pt = patches_of(image, config.patch_side)
    x = np.vstack([params["cls_token"][None, :], pt @ params["patch_embed.weight"]])
    x = x + params["pos_embed"]
    all_probs = []
    for i in range(config.layers):
        prm = {k[len(f"layers.{i}.") :]: v for k, v in params.items() if k.startswith(f"layers.{i}.")}
        x, probs = layer(x, prm, config.heads, config.ln_eps, mask, d_theta)
        all_probs.append(probs)
    z = _ln(x, params["norm.gamma"], params["norm.beta"], config.ln_eps)[0]
    hdn = _gelu(z @ params["head.fc1.weight"] + params["head.fc1.bias"])
    return hdn @ params["head.fc2.weight"] + params["head.fc2.bias"], all_probs


def random_params(config, rng, std=0.5):
    from smvit.model import param_shapes

    out = {}
    for name, shape in param_shapes(config).items():
        base = 1.0 if name.endswith("gamma") else 0.0
        out[name] = base + std * rng.standard_normal(shape)
    return out
