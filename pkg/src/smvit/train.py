"""Toy planted-feature dataset, SGD training loop and gradient verification."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import numerics as nx
from .smge import attention_scores
from .saliency import bounding_box, crop_and_resize, extract_mask, normalize_map, toy_saliency
from .tokenizer import ConfigError, ViTConfig

log = logging.getLogger(__name__)

# Saturated class colours; background clutter and the object fill stay grey-ish.
PALETTE = np.array(
    [
        [0.95, 0.10, 0.10],
        [0.10, 0.85, 0.10],
        [0.15, 0.25, 0.95],
        [0.95, 0.90, 0.05],
        [0.90, 0.10, 0.90],
        [0.05, 0.90, 0.90],
        [0.98, 0.55, 0.05],
        [0.55, 0.10, 0.95],
        [0.05, 0.45, 0.20],
        [0.55, 0.30, 0.05],
        [0.95, 0.55, 0.70],
        [0.45, 0.75, 0.98],
    ]
)

TEST_OFFSET = 1_000_000


@dataclass(frozen=True)
class ToySpec:
    image_side: int = 24
    num_classes: int = 10
    glyph_size: int = 4
    area_min: float = 0.15
    area_max: float = 0.3
    aspect_min: float = 1.4
    aspect_max: float = 2.2
    distractors: int = 2
    distractor_contrast: float = 0.5
    blur: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(PALETTE):
            raise ConfigError(f"num_classes must be in [2, {len(PALETTE)}]")
        if not 0 < self.area_min <= self.area_max < 0.6:
            raise ConfigError("need 0 < area_min <= area_max < 0.6")
        if not 1 <= self.aspect_min <= self.aspect_max:
            raise ConfigError("need 1 <= aspect_min <= aspect_max")
        if self.distractors < 0 or not 0 <= self.distractor_contrast <= 1:
            raise ConfigError("bad distractor settings")
        if self.blur < 0 or self.noise < 0:
            raise ConfigError("blur and noise must be >= 0")
        # the thinnest, smallest ellipse must still hold the glyph across its minor axis
        minor = 2 * math.sqrt(self.area_min * self.image_side**2 / (math.pi * self.aspect_max))
        if self.glyph_size < 1 or self.glyph_size * math.sqrt(2) + 1 > minor:
            raise ConfigError(f"glyph of side {self.glyph_size} does not fit the smallest ellipse")
        # and the largest, most elongated one must fit inside the image at any angle
        major = math.sqrt(self.area_max * self.image_side**2 * self.aspect_max / math.pi)
        if major > self.image_side / 2 - 0.5:
            raise ConfigError("largest ellipse does not fit the image")


@dataclass
class Sample:
    image: np.ndarray  # (S, S, 3) float64 in [0, 1]
    label: int
    foreground: np.ndarray  # (S, S) uint8 ellipse indicator
    glyph_box: tuple[int, int, int]  # row, col, side
    index: int


def _ellipse(rng, spec: ToySpec):
    """Rotated ellipse indicator; elongation leaves the bbox corners empty."""
    s = spec.image_side
    area = rng.uniform(spec.area_min, spec.area_max) * s * s
    aspect = rng.uniform(spec.aspect_min, spec.aspect_max)
    minor = math.sqrt(area / (math.pi * aspect))
    major = aspect * minor
    theta = rng.uniform(0.0, math.pi)
    ct, st = math.cos(theta), math.sin(theta)
    ex = math.sqrt((major * ct) ** 2 + (minor * st) ** 2)
    ey = math.sqrt((major * st) ** 2 + (minor * ct) ** 2)
    cx = rng.uniform(ex + 0.5, s - ex - 0.5)
    cy = rng.uniform(ey + 0.5, s - ey - 0.5)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    return ((u / major) ** 2 + (v / minor) ** 2 <= 1.0).astype(np.uint8)


def _place(rng, allowed: np.ndarray, g: int):
    """Random top-left corner of a g x g square lying entirely in ``allowed``."""
    s = allowed.shape[0]
    integral = np.pad(allowed.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    full = integral[g:, g:] - integral[:-g, g:] - integral[g:, :-g] + integral[:-g, :-g]
    rows, cols = np.nonzero(full[: s - g + 1, : s - g + 1] == g * g)
    if rows.size == 0:
        return None
    k = rng.integers(rows.size)
    return int(rows[k]), int(cols[k])


def generate_sample(spec: ToySpec, index: int) -> Sample:
    """One image: grey clutter, a light ellipse holding the class glyph, and
    glyphs of other classes planted off the object, preferably inside its
    bounding box so they survive a saliency crop."""
    rng = np.random.default_rng([spec.seed, index])
    s, g = spec.image_side, spec.glyph_size
    label = int(rng.integers(spec.num_classes))

    img = np.empty((s, s, 3))
    img[:] = rng.uniform(0.25, 0.5)
    for _ in range(6):
        h, w = rng.integers(3, s // 2, size=2)
        r, c = rng.integers(0, s - 3, size=2)
        img[r : r + h, c : c + w] = rng.uniform(0.15, 0.6) + rng.uniform(-0.04, 0.04, size=3)
    img += rng.normal(0.0, 0.03, size=img.shape)

    fg = _ellipse(rng, spec)
    fill = rng.uniform(0.75, 0.9) + rng.uniform(-0.03, 0.03, size=3)
    img[fg == 1] = fill + rng.normal(0.0, 0.03, size=(int(fg.sum()), 3))

    r, c = _place(rng, fg, g)
    img[r : r + g, c : c + g] = PALETTE[label]

    others = [k for k in range(spec.num_classes) if k != label]
    free = np.ones_like(fg, dtype=bool)
    rows, cols = np.nonzero(fg)
    halo = np.zeros_like(free)
    halo[1:-1, 1:-1] = fg[:-2, 1:-1] | fg[2:, 1:-1] | fg[1:-1, :-2] | fg[1:-1, 2:] | fg[1:-1, 1:-1]
    free &= ~halo.astype(bool) & (fg == 0)
    in_box = np.zeros_like(free)
    in_box[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1] = True
    for _ in range(spec.distractors):
        spot = _place(rng, free & in_box, g) or _place(rng, free, g)
        if spot is None:
            break
        dr, dc = spot
        k = others[rng.integers(len(others))]
        a = spec.distractor_contrast
        img[dr : dr + g, dc : dc + g] = a * PALETTE[k] + (1 - a) * img[dr : dr + g, dc : dc + g]
        free[max(dr - 1, 0) : dr + g + 1, max(dc - 1, 0) : dc + g + 1] = False

    return Sample(np.clip(img, 0.0, 1.0), label, fg, (r, c, g), index)


def generate_dataset(spec: ToySpec, n: int, start: int = 0) -> list[Sample]:
    if n <= 0:
        raise ValueError("n must be positive")
    return [generate_sample(spec, i) for i in range(start, start + n)]


def sample_saliency(spec: ToySpec, sample: Sample) -> np.ndarray:
    """Degraded foreground map standing in for a detector's output."""
    return toy_saliency(
        sample.foreground, spec.blur, spec.noise, seed=[spec.seed, sample.index, 7]
    )


def prepare(image, saliency, config: ViTConfig, crop=True):
    """Saliency map -> mask -> (optional) crop. Returns (image, pixel mask, provenance)."""
    mask, provenance = extract_mask(normalize_map(saliency))
    side = config.image_side
    if crop:
        image, mask = crop_and_resize(image, mask, bounding_box(mask), side)
    elif image.shape[0] != side or image.shape[1] != side:
        raise ConfigError(f"uncropped image {image.shape[:2]} must be {side}x{side}")
    return image, mask, provenance


@dataclass
class PreparedSet:
    images: np.ndarray
    masks: np.ndarray  # pixel masks, (n, H, W)
    labels: np.ndarray
    foreground: np.ndarray  # ground-truth object in the prepared frame


def prepare_set(spec: ToySpec, config: ViTConfig, n: int, start: int, crop: bool) -> PreparedSet:
    images, masks, labels, fgs = [], [], [], []
    for sample in generate_dataset(spec, n, start):
        img, mask, _ = prepare(sample.image, sample_saliency(spec, sample), config, crop)
        if crop:
            box = bounding_box(extract_mask(normalize_map(sample_saliency(spec, sample)))[0])
            _, fg = crop_and_resize(sample.image, sample.foreground, box, config.image_side)
        else:
            fg = sample.foreground
        images.append(img)
        masks.append(mask)
        labels.append(sample.label)
        fgs.append(fg)
    return PreparedSet(np.stack(images), np.stack(masks), np.array(labels), np.stack(fgs))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 16
    steps: int = 3000
    seed: int = 0
    smge_train: bool = True
    smge_infer: bool = True
    crop: bool = True
    flip: bool = True
    color_jitter: bool = False
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    init_std: float = 0.2
    eval_every: int = 0  # 0: once per epoch

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size <= 0 or self.steps < 0 or self.eval_every < 0:
            raise ConfigError("batch_size must be positive, steps and eval_every >= 0")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ConfigError("dataset sizes must be positive")

    @property
    def flags(self) -> str:
        b = lambda v: str(v).lower()  # noqa: E731
        return f"smge_train={b(self.smge_train)} smge_infer={b(self.smge_infer)} crop={b(self.crop)}"


def cosine_lr(step: int, total: int, base: float) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """Heavy-ball SGD, in place: ``v = mu * v + g``; ``p -= lr * v``."""
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        params[name] -= lr * v
    return params


def _flip(images, masks):
    return images[:, :, ::-1], masks[:, :, ::-1]


def _jitter(rng, images):
    scale = rng.uniform(0.8, 1.2, size=(len(images), 1, 1, 1))
    shift = rng.uniform(-0.1, 0.1, size=(len(images), 1, 1, 1))
    return np.clip(images * scale + shift, 0.0, 1.0)


def evaluate(config: ViTConfig, params, data: PreparedSet, guided: bool, batch=250):
    """Returns (mean loss, accuracy)."""
    losses, correct = 0.0, 0
    n = len(data.labels)
    for i in range(0, n, batch):
        sl = slice(i, i + batch)
        masks = M.mask_vector(data.masks[sl], config)
        logits, _, _ = M.forward(data.images[sl], masks, config, params, guided)
        losses += nx.cross_entropy(logits, data.labels[sl]) * len(logits)
        correct += int((M.predict(logits) == data.labels[sl]).sum())
    return losses / n, correct / n


@dataclass
class TrainResult:
    params: dict
    log: list[str] = field(default_factory=list)
    val_accuracy: float | None = None


def _log_line(step, split, loss, acc, lr, cfg: TrainConfig, config: ViTConfig, guided):
    return (
        f"step={step} split={split} loss={loss:.6f} acc={acc:.4f} lr={lr:.6g} "
        f"{cfg.flags} guided={str(guided).lower()} d_theta={config.d_theta}"
    )


def train_loop(
    config: ViTConfig,
    cfg: TrainConfig,
    spec: ToySpec,
    checkpoint=None,
    val: PreparedSet | None = None,
    train_set: PreparedSet | None = None,
) -> TrainResult:
    """Cross-entropy training with momentum SGD and a cosine schedule.

    Training uses guidance iff ``cfg.smge_train``; the logged validation
    accuracy uses guidance iff ``cfg.smge_infer``.
    """
    if spec.num_classes != config.num_classes:
        raise ConfigError("toy num_classes differs from model num_classes")
    params = M.init_params(config, seed=[cfg.seed, 11], std=cfg.init_std)
    train_set = train_set or prepare_set(spec, config, cfg.n_train, 0, cfg.crop)
    val = val or prepare_set(spec, config, cfg.n_val, cfg.n_train, cfg.crop)
    rng = np.random.default_rng([cfg.seed, 23])
    velocity: dict = {}
    steps_per_epoch = max(cfg.n_train // cfg.batch_size, 1)
    every = cfg.eval_every or steps_per_epoch
    result = TrainResult(params)
    order = np.empty(0, dtype=np.int64)
    seen_loss, seen_correct, seen = 0.0, 0, 0

    for step in range(1, cfg.steps + 1):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(cfg.n_train)])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        images, masks = train_set.images[idx], train_set.masks[idx]
        if cfg.flip:
            flip = rng.random(len(idx)) < 0.5
            fi, fm = _flip(images[flip], masks[flip])
            images, masks = images.copy(), masks.copy()
            images[flip], masks[flip] = fi, fm
        if cfg.color_jitter:
            images = _jitter(rng, images)
        labels = train_set.labels[idx]
        lr = cosine_lr(step - 1, cfg.steps, cfg.lr)
        loss, grads, logits = M.loss_and_grads(
            images, M.mask_vector(masks, config), labels, config, params, cfg.smge_train
        )
        sgd_step(params, grads, velocity, lr, cfg.momentum)
        seen_loss += loss * len(idx)
        seen_correct += int((M.predict(logits) == labels).sum())
        seen += len(idx)

        if step % every == 0 or step == cfg.steps:
            result.log.append(
                _log_line(step, "train", seen_loss / seen, seen_correct / seen, lr, cfg, config, cfg.smge_train)
            )
            seen_loss, seen_correct, seen = 0.0, 0, 0
            vloss, vacc = evaluate(config, params, val, cfg.smge_infer)
            result.log.append(_log_line(step, "val", vloss, vacc, lr, cfg, config, cfg.smge_infer))
            result.val_accuracy = vacc
            log.info(result.log[-1])

    if checkpoint is not None:
        M.save_checkpoint(checkpoint, config, params)
    return result


def test_set(spec: ToySpec, config: ViTConfig, cfg: TrainConfig) -> PreparedSet:
    return prepare_set(spec, config, cfg.n_test, TEST_OFFSET, cfg.crop)


# --- ablation grid -----------------------------------------------------------

VARIANTS = {
    # name: (smge_train, smge_infer, crop)
    "vanilla": (False, False, False),
    "crop_only": (False, False, True),
    "smge_train_only": (True, False, True),
    "sm_vit": (True, True, True),
}


def run_variant(config, cfg, spec, variant: str, seed: int):
    smge_train, smge_infer, crop = VARIANTS[variant]
    cfg = replace(cfg, seed=seed, smge_train=smge_train, smge_infer=smge_infer, crop=crop)
    spec = replace(spec, seed=seed)
    res = train_loop(config, cfg, spec)
    test = test_set(spec, config, cfg)
    _, acc = evaluate(config, res.params, test, cfg.smge_infer)
    return acc, res, test


def run_grid(config, cfg, spec, seeds, variants=("vanilla", "smge_train_only", "sm_vit")):
    """Test accuracy per variant per seed: {variant: [acc, ...]}."""
    out = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            out[v].append(run_variant(config, cfg, spec, v, seed)[0])
    return out


# --- gradient verification -------------------------------------------------


class GradCheckError(AssertionError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: str
    worst_index: tuple
    per_tensor: dict
    failures: list

    @property
    def ok(self):
        return not self.failures


def rel_error(a, n, floor=1e-4):
    return abs(a - n) / max(abs(a), abs(n), floor)


def _argmax_margin(config, params, images, masks, guided):
    _, _, cache = M.forward(images, masks, config, params, guided)
    worst = np.inf
    for lc in cache.layers:
        row = attention_scores(lc.attn.q, lc.attn.k)[..., 0, 1:]
        top = np.sort(row, axis=-1)
        worst = min(worst, float((top[..., -1] - top[..., -2]).min()))
    return worst


def grad_check(
    config: ViTConfig,
    seed=0,
    mask="mixed",
    step=1e-5,
    tol=1e-4,
    batch=2,
    param_std=0.5,
    backward=None,
    raise_on_failure=True,
) -> GradCheckReport:
    """Compare analytic gradients of the cross-entropy loss with central
    differences for every parameter entry.

    The point is resampled until every head's class-to-patch maximum is
    unique by a clear margin, so the max subgradient is well defined under
    the finite-difference perturbation.
    """
    backward = backward or M.backward
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        params = {}
        for name, shape in M.param_shapes(config).items():
            base = 1.0 if name.endswith("gamma") else 0.0
            params[name] = base + param_std * rng.standard_normal(shape)
        images = rng.random((batch, config.image_side, config.image_side, config.channels))
        labels = rng.integers(config.num_classes, size=batch)
        t = config.num_tokens
        if mask == "mixed":
            masks = (rng.random((batch, t)) < 0.5).astype(np.uint8)
            masks[:, 1], masks[:, 2] = 1, 0
        elif mask == "ones":
            masks = np.ones((batch, t), dtype=np.uint8)
        else:
            masks = np.zeros((batch, t), dtype=np.uint8)
        masks[:, 0] = 1
        if _argmax_margin(config, params, images, masks, True) > 1e-3:
            break
    else:
        raise RuntimeError("could not find a point with unique attention maxima")

    def loss_at():
        logits, _, _ = M.forward(images, masks, config, params, True)
        return nx.cross_entropy(logits, labels)

    logits, _, cache = M.forward(images, masks, config, params, True)
    grads = backward(nx.cross_entropy_backward(logits, labels), cache, config, params)

    per_tensor, failures = {}, []
    worst = (0.0, "", ())
    for name, arr in params.items():
        tensor_worst = 0.0
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            lp = loss_at()
            arr[idx] = old - step
            lm = loss_at()
            arr[idx] = old
            err = rel_error(grads[name][idx], (lp - lm) / (2 * step))
            tensor_worst = max(tensor_worst, err)
            if err > worst[0]:
                worst = (err, name, idx)
            if err > tol:
                failures.append((name, idx, err))
        per_tensor[name] = tensor_worst
    report = GradCheckReport(worst[0], worst[1], worst[2], per_tensor, failures)
    if failures and raise_on_failure:
        listed = ", ".join(f"{n}{list(i)} rel={e:.2e}" for n, i, e in failures[:10])
        raise GradCheckError(f"{len(failures)} gradient entries exceed {tol:g}: {listed}")
    return report
