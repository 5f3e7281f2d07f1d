"""Command-line entry point: ``smvit <command> [options] [--key=value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import model as M
from . import netpbm
from . import train as T
from .saliency import bounding_box, crop_and_resize, extract_mask, normalize_map
from .tokenizer import ConfigError, ViTConfig

log = logging.getLogger("smvit")


class UsageError(Exception):
    pass


# --- run configuration -------------------------------------------------------

IO_KEYS = {"checkpoint": str, "seeds": str, "variants": str}
_SECTIONS = (ViTConfig, T.TrainConfig, T.ToySpec)


def _field_types():
    types = {}
    for cls in _SECTIONS:
        for f in fields(cls):
            types[f.name] = type(f.default)
    types.update(IO_KEYS)
    return types


FIELD_TYPES = _field_types()


def _convert(key, raw, typ):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() not in ("true", "false"):
            raise ConfigError(f"{key}: expected true or false, got {raw!r}")
        return raw.lower() == "true"
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_kv(text: str, source="config") -> dict:
    """Flat ``key:value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source} line {n}: expected key:value")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source} line {n}: unknown key {key!r}")
        out[key] = _convert(key, value, FIELD_TYPES[key])
    return out


def parse_overrides(tokens) -> dict:
    out = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok:
            raise UsageError(f"unexpected argument {tok!r} (overrides take the form --key=value)")
        key, value = tok[2:].split("=", 1)
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise UsageError(f"unknown option --{key}")
        out[key] = _convert(key, value, FIELD_TYPES[key])
    return out


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    toy: T.ToySpec = field(default_factory=T.ToySpec)
    io: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values: dict, base: ViTConfig | None = None) -> "RunConfig":
        """``image_side`` and ``num_classes`` are shared by the model and the
        toy data; ``seed`` by training and the toy data."""
        sections = []
        for sec in _SECTIONS:
            names = {f.name for f in fields(sec)}
            sections.append({k: v for k, v in values.items() if k in names})
        vit = replace(base, **sections[0]) if base else ViTConfig(**sections[0])
        toy = sections[2]
        toy.setdefault("image_side", vit.image_side)
        toy.setdefault("num_classes", vit.num_classes)
        io = {k: v for k, v in values.items() if k in IO_KEYS}
        return cls(vit, T.TrainConfig(**sections[1]), T.ToySpec(**toy), io)

    def to_text(self) -> str:
        lines = []
        seen = set()
        for obj in (self.vit, self.train, self.toy):
            for f in fields(obj):
                if f.name in seen:
                    continue
                seen.add(f.name)
                v = getattr(obj, f.name)
                lines.append(f"{f.name}:{str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def load_run(path, overrides, base=None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_kv(Path(path).read_text(), str(path)))
    values.update(overrides)
    return RunConfig.from_values(values, base)


# --- generator manifests -----------------------------------------------------


def manifest_path(image_path) -> Path:
    return Path(image_path).with_suffix(".manifest")


def write_manifest(path, spec: T.ToySpec, sample: T.Sample):
    lines = [f"index:{sample.index}", f"label:{sample.label}"]
    lines += [f"{f.name}:{getattr(spec, f.name)}" for f in fields(spec)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """Returns ``(spec, index)``."""
    values = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            values[key.strip()] = value.strip()
    try:
        index = int(values.pop("index"))
        values.pop("label", None)
        kinds = {f.name: type(f.default) for f in fields(T.ToySpec)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ConfigError(f"manifest {path}: unknown keys {sorted(unknown)}")
        spec = T.ToySpec(**{k: kinds[k](v) for k, v in values.items()})
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"manifest {path}: {exc}") from exc
    return spec, index


def saliency_for(image_path, image, saliency_path):
    """Explicit saliency map, or one regenerated from the image's manifest."""
    if saliency_path is not None:
        sal = netpbm.read_map(saliency_path)
        if sal.shape != image.shape[:2]:
            raise ConfigError(f"saliency {sal.shape} does not match image {image.shape[:2]}")
        return sal
    mpath = manifest_path(image_path)
    if not mpath.exists():
        raise UsageError(f"no --saliency given and no generator manifest at {mpath}")
    spec, index = read_manifest(mpath)
    sample = T.generate_sample(spec, index)
    if not np.array_equal(netpbm.to_bytes(sample.image), netpbm.to_bytes(image)):
        raise ConfigError(f"manifest {mpath} does not describe {image_path}")
    return T.sample_saliency(spec, sample)


# --- commands ----------------------------------------------------------------


def cmd_mask(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    if (args.crop is None) != (args.size is None):
        raise UsageError("--crop and --size go together")
    image = netpbm.read_image(args.inp)
    sal = saliency_for(args.inp, image, args.saliency)
    mask, prov = extract_mask(normalize_map(sal))
    box = bounding_box(mask)
    netpbm.write_mask(args.out_mask, mask)
    Path(args.out_bbox).write_text(box.to_text())
    if args.crop is not None:
        if args.size <= 0:
            raise UsageError("--size must be positive")
        cropped, _ = crop_and_resize(image, mask, box, args.size)
        netpbm.write_image(args.crop, cropped)
    print(f"source={prov.source.value} threshold={prov.threshold_used} positives={int(mask.sum())}")
    return 0


def _checkpoint_arg(args, run):
    path = args.ckpt or run.io.get("checkpoint")
    if path is None:
        raise UsageError("no checkpoint given (--ckpt or checkpoint: in the config)")
    return path


def cmd_train(args, extra):
    run = load_run(args.config, parse_overrides(extra))
    path = args.ckpt or run.io.get("checkpoint")
    res = T.train_loop(run.vit, run.train, run.toy, checkpoint=path)
    for line in res.log:
        print(line)
    return 0


def _check_compatible(config: ViTConfig, run: RunConfig):
    if config.image_side != run.toy.image_side or config.num_classes != run.toy.num_classes:
        raise ConfigError(
            f"checkpoint expects {config.image_side}px images and {config.num_classes} classes, "
            f"data has {run.toy.image_side}px and {run.toy.num_classes}"
        )


def cmd_eval(args, extra):
    overrides = parse_overrides(extra)
    ck_config, params = M.load_checkpoint(_checkpoint_arg(args, load_run(args.config, overrides)))
    run = load_run(args.config, overrides, base=ck_config)
    if M.param_shapes(run.vit) != M.param_shapes(ck_config):
        raise ConfigError("run config architecture differs from the checkpoint's")
    _check_compatible(run.vit, run)
    data = T.test_set(run.toy, run.vit, run.train)
    loss, acc = T.evaluate(run.vit, params, data, run.train.smge_infer)
    print(
        f"accuracy={acc:.4f} loss={loss:.6f} n={len(data.labels)} {run.train.flags} "
        f"d_theta={run.vit.d_theta}"
    )
    return 0


def cmd_attend(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    config, params = M.load_checkpoint(args.ckpt)
    image = netpbm.read_image(args.inp)
    sal = saliency_for(args.inp, image, args.saliency)
    img, mask, _ = T.prepare(image, sal, config, crop=args.crop)
    guided = args.guided
    _, record, _ = M.forward(
        img[None], M.mask_vector(mask[None], config) if guided else None, config, params, guided
    )
    heat = M.attention_heatmap(record, config, index=0)
    netpbm.write_pgm(args.out, np.rint(heat).astype(np.uint8))
    return 0


def cmd_gradcheck(args, extra):
    values = parse_kv(Path(args.config).read_text(), args.config) if args.config else {}
    values.update(parse_overrides(extra))
    vit_keys = {f.name for f in fields(ViTConfig)}
    stray = set(values) - vit_keys - {"seed"}
    if stray:
        raise UsageError(f"gradcheck takes model keys and seed only, got {sorted(stray)}")
    seed = values.pop("seed", 0)
    tiny = ViTConfig(image_side=8, patch_side=4, embed_dim=8, layers=1, heads=2, num_classes=3)
    config = replace(tiny, **values)
    report = T.grad_check(config, seed=seed, mask=args.mask, tol=args.tol, raise_on_failure=False)
    print(
        f"max_rel_error={report.max_rel_error:.3e} worst={report.worst_tensor}"
        f"{list(report.worst_index)} failures={len(report.failures)} d_theta={config.d_theta}"
    )
    return 0 if report.ok else 1


def cmd_sweep(args, extra):
    run = load_run(args.config, parse_overrides(extra))
    seeds = [int(s) for s in str(run.io.get("seeds", "0,1,2,3,4")).split(",")]
    variants = run.io.get("variants", "vanilla,smge_train_only,sm_vit").split(",")
    unknown = set(variants) - set(T.VARIANTS)
    if unknown:
        raise UsageError(f"unknown variants {sorted(unknown)}")
    grid = T.run_grid(run.vit, run.train, run.toy, seeds, variants)
    for v, accs in grid.items():
        a = np.asarray(accs)
        se = a.std(ddof=1) / np.sqrt(a.size) if a.size > 1 else 0.0
        per = " ".join(f"{x:.4f}" for x in a)
        print(f"variant={v} mean={a.mean():.4f} se={se:.4f} seeds={per}")
    return 0


def cmd_dataset(args, extra):
    run = load_run(args.config, parse_overrides(extra))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["# index label image object saliency"]
    for sample in T.generate_dataset(run.toy, args.n, args.start):
        stem = f"sample_{sample.index:07d}"
        names = (f"{stem}.ppm", f"{stem}_object.pgm", f"{stem}_saliency.pgm")
        netpbm.write_image(out / names[0], sample.image)
        netpbm.write_mask(out / names[1], sample.foreground)
        netpbm.write_map(out / names[2], T.sample_saliency(run.toy, sample))
        write_manifest(out / f"{stem}.manifest", run.toy, sample)
        rows.append(f"{sample.index} {sample.label} " + " ".join(names))
    (out / "manifest.txt").write_text("\n".join(rows) + "\n")
    print(f"wrote {args.n} samples to {out}")
    return 0


# --- argument parsing ----------------------------------------------------------


def _bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="smvit", description=__doc__, allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mask", help="saliency map -> binary mask, bbox, optional crop", allow_abbrev=False)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--saliency")
    s.add_argument("--out-mask", required=True)
    s.add_argument("--out-bbox", required=True)
    s.add_argument("--crop")
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_mask)

    for name, func, helptext in [
        ("train", cmd_train, "train on the toy dataset"),
        ("eval", cmd_eval, "test accuracy of a checkpoint"),
        ("sweep", cmd_sweep, "ablation grid over seeds"),
        ("gradcheck", cmd_gradcheck, "finite-difference gradient check"),
        ("dataset", cmd_dataset, "export toy samples with generator manifests"),
    ]:
        s = sub.add_parser(name, help=helptext, allow_abbrev=False)
        s.add_argument("--config")
        s.set_defaults(func=func)
        if name in ("train", "eval"):
            s.add_argument("--ckpt")
        if name == "gradcheck":
            s.add_argument("--mask", choices=["mixed", "ones", "zeros"], default="mixed")
            s.add_argument("--tol", type=float, default=1e-4)
        if name == "dataset":
            s.add_argument("--out", required=True)
            s.add_argument("--n", type=int, default=10)
            s.add_argument("--start", type=int, default=0)

    s = sub.add_parser("attend", help="class-token attention heatmap", allow_abbrev=False)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--saliency")
    s.add_argument("--out", required=True)
    s.add_argument("--guided", type=_bool, default=True)
    s.add_argument("--crop", type=_bool, default=True)
    s.set_defaults(func=cmd_attend)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, extra)
    except (UsageError, ConfigError, netpbm.NetpbmParseError, M.CheckpointFormatError) as exc:
        print(f"smvit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"smvit {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
