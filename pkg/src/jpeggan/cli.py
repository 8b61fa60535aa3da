"""Command-line front end.

Subcommands: pretrain, train, generate, encode, decode, fid, sweep.
Settings resolve in order default < config file < environment < flag, the
last writer winning. Every run writes a manifest (the fully resolved
settings plus versions) next to its outputs, and touches nothing outside
the --out directory.

Exit codes: 0 success, 1 usage or configuration, 2 unreadable or malformed
data, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import configparser
import copy
import json
import os
import sys

import numpy as np

from . import __version__, codec, datasets, fid, jfif, networks, training
from . import tensor as T
from .rng import RngStreams
from .tensor import NonFiniteError, Tensor

ENV_PREFIX = "JPEGGAN_"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    """Bad flags or configuration; carries one message per problem."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


class DataError(Exception):
    pass


# Defaults double as the type schema: config and environment values are
# coerced to the type of the default they override.
DEFAULTS = {
    "run": {"seed": 0, "precision": "f64"},
    "data": {"count": 1000, "size": 32},
    "train": {
        "steps": 2000,
        "batch_size": 64,
        "anchor_weight": 100.0,
        "gp_weight": 10.0,
        "lr_discriminator": 3e-4,
        "lr_generator": 1e-4,
        "critic_updates_per_gen": 1,
        "beta1": 0.0,
        "beta2": 0.9,
        "adam_eps": 1e-8,
        "checkpoint_every": 0,
    },
    "generator": {
        "latent_dim": 128,
        "resolution": 32,
        "base_channels": 128,
        "path_channels": 4,
        "quality_factor": 75,
        "mode": "4:2:0",
    },
    "discriminator": {"base_channels": 128},
}

# flag/environment name -> config location
_FLAG_KEYS = {
    "seed": ("run", "seed"),
    "precision": ("run", "precision"),
    "steps": ("train", "steps"),
    "qf": ("generator", "quality_factor"),
    "mode": ("generator", "mode"),
}


def _coerce(raw: str, like, where: str, issues: list):
    kind = type(like)
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        issues.append(f"{where}: cannot read {raw!r} as {kind.__name__}")
        return like


def _load_config_file(path, cfg, issues):
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as e:
        issues.append(f"--config: {e}")
        return
    except configparser.Error as e:
        issues.append(f"--config: {e}")
        return
    for section in parser.sections():
        if section not in cfg:
            issues.append(f"config section [{section}] is not recognized")
            continue
        for key, raw in parser.items(section):
            if key not in cfg[section]:
                issues.append(f"config key [{section}] {key} is not recognized")
                continue
            cfg[section][key] = _coerce(raw, cfg[section][key], f"[{section}] {key}", issues)


def _apply_env(cfg, issues):
    for name, (section, key) in _FLAG_KEYS.items():
        raw = os.environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            cfg[section][key] = _coerce(raw, cfg[section][key], ENV_PREFIX + name.upper(), issues)


def _apply_flags(args, cfg, issues):
    for name, (section, key) in _FLAG_KEYS.items():
        raw = getattr(args, name, None)
        if raw is not None:
            cfg[section][key] = _coerce(str(raw), cfg[section][key], f"--{name}", issues)


def _validate(cfg, issues):
    if cfg["run"]["precision"] not in ("f32", "f64"):
        issues.append("precision must be f32 or f64")
    if not 1 <= cfg["generator"]["quality_factor"] <= 100:
        issues.append("quality factor must lie in 1..100")
    if cfg["generator"]["mode"] not in ("4:4:4", "4:2:2", "4:2:0"):
        issues.append("mode must be one of 4:4:4, 4:2:2, 4:2:0")
    if cfg["data"]["count"] < 1:
        issues.append("data count must be >= 1")
    if cfg["data"]["size"] % 16 or cfg["data"]["size"] < 16:
        issues.append("data size must be a positive multiple of 16")
    tc = _train_config(cfg)
    try:
        tc.validate()
    except ValueError as e:
        issues.append(str(e))


def resolve_config(args) -> dict:
    """default < config file < environment < flags; all problems at once."""
    issues: list[str] = []
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        _load_config_file(args.config, cfg, issues)
    _apply_env(cfg, issues)
    _apply_flags(args, cfg, issues)
    _validate(cfg, issues)
    if issues:
        raise UsageError(issues)
    return cfg


def _train_config(cfg) -> training.TrainConfig:
    return training.TrainConfig(**cfg["train"])


def _dtype(cfg):
    return np.float32 if cfg["run"]["precision"] == "f32" else np.float64


def _build_networks(cfg, dtype):
    gen_spec = networks.GeneratorSpec(**cfg["generator"])
    disc_spec = networks.DiscriminatorSpec(
        resolution=cfg["generator"]["resolution"],
        base_channels=cfg["discriminator"]["base_channels"],
    )
    rng = np.random.default_rng(cfg["run"]["seed"])
    gen = networks.Generator(gen_spec, rng)
    disc = networks.Discriminator(disc_spec, rng)
    networks.cast_params(gen, dtype)
    networks.cast_params(disc, dtype)
    return gen, disc


def _load_data(source, cfg, dtype) -> np.ndarray:
    try:
        data = datasets.load_dataset(
            source, count=cfg["data"]["count"], size=cfg["data"]["size"], seed=cfg["run"]["seed"]
        )
    except (OSError, ValueError) as e:
        raise DataError(f"dataset {source}: {e}") from None
    return data.astype(dtype)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_manifest(out_dir, command, cfg, extra=None):
    doc = {
        "command": command,
        "config": cfg,
        "versions": {"jpeggan": __version__, "numpy": np.__version__},
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands -----------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    dtype = _dtype(cfg)
    out = _out_dir(args)
    gen, disc = _build_networks(cfg, dtype)
    data = _load_data(args.data, cfg, dtype)
    _write_manifest(out, "pretrain", cfg)
    training.pretrain_baseline(
        gen,
        disc,
        data,
        _train_config(cfg),
        RngStreams(cfg["run"]["seed"]),
        csv_path=os.path.join(out, "loss.csv"),
        checkpoint_path=os.path.join(out, "checkpoint.params"),
        resume_from=args.resume,
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if (args.pretrained is None) == (args.resume is None):
        raise UsageError(["exactly one of --pretrained and --resume is required"])
    dtype = _dtype(cfg)
    out = _out_dir(args)
    gen, disc = _build_networks(cfg, dtype)
    data = _load_data(args.data, cfg, dtype)

    if args.pretrained is not None:
        trunk = {f"trunk.{k}": v for k, v in gen.trunk.params().items()}
        try:
            training.load_checkpoint(args.pretrained, {"gen": trunk, "disc": disc.params()}, {})
        except (OSError, ValueError) as e:
            raise DataError(f"pretrained checkpoint: {e}") from None
    anchor = networks.extract_anchor(gen)
    anchor.freeze()

    _write_manifest(out, "train", cfg)
    training.train(
        gen,
        anchor,
        disc,
        data,
        _train_config(cfg),
        RngStreams(cfg["run"]["seed"]),
        csv_path=os.path.join(out, "loss.csv"),
        checkpoint_path=os.path.join(out, "checkpoint.params"),
        resume_from=args.resume,
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    if args.count < 0:
        raise UsageError(["--count must be >= 0"])
    dtype = _dtype(cfg)
    out = _out_dir(args)
    gen, _ = _build_networks(cfg, dtype)
    groups = {"gen": gen.params()}
    try:
        training.load_checkpoint(args.checkpoint, groups, {})
    except (OSError, ValueError) as e:
        raise DataError(f"checkpoint: {e}") from None
    _write_manifest(out, "generate", cfg, {"count": args.count})

    streams = RngStreams(cfg["run"]["seed"])
    previews = []
    written = 0
    while written < args.count:
        n = min(64, args.count - written)
        z = streams.spawn("generate-z", written).standard_normal((n, gen.spec.latent_dim))
        with T.no_grad():
            batch = gen.forward(Tensor(z.astype(dtype)))
            pixels = codec.decode_planes(
                batch.y, batch.cb, batch.cr, batch.quality_factor, batch.mode
            ).data
        for i, enc in enumerate(networks.to_encoded_images(batch)):
            enc.validate()
            path = os.path.join(out, f"sample_{written + i:05d}.jpg")
            jfif.write_jfif(enc, path)
            back = jfif.read_jfif(path)  # self-check: the file must decode to
            ok = (  # exactly the coefficients we just emitted
                np.array_equal(back.y, enc.y)
                and np.array_equal(back.cb, enc.cb)
                and np.array_equal(back.cr, enc.cr)
            )
            if not ok:
                raise DataError(f"{path}: re-read coefficients differ")
        previews.append(pixels)
        written += n
    if written:
        grid_path = os.path.join(out, "grid.ppm")
        datasets.write_sample_grid(grid_path, np.concatenate(previews), cols=args.grid_cols)
    return EXIT_OK


def _read_image(path) -> np.ndarray:
    try:
        return datasets.read_ppm(path)
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def cmd_encode(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    qf = cfg["generator"]["quality_factor"]
    mode = cfg["generator"]["mode"]
    _write_manifest(out, "encode", cfg, {"inputs": list(args.inputs)})
    for path in args.inputs:
        image = _read_image(path)
        try:
            enc = codec.encode_image(image, qf, mode)
        except ValueError as e:
            raise DataError(f"{path}: {e}") from None
        stem = os.path.splitext(os.path.basename(path))[0]
        jfif.write_jfif(enc, os.path.join(out, stem + ".jpg"))
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    _write_manifest(out, "decode", cfg, {"inputs": list(args.inputs)})
    for path in args.inputs:
        try:
            enc = jfif.read_jfif(path)
        except (OSError, ValueError) as e:
            raise DataError(f"{path}: {e}") from None
        stem = os.path.splitext(os.path.basename(path))[0]
        datasets.write_ppm(os.path.join(out, stem + ".ppm"), codec.decode_image(enc))
    return EXIT_OK


def cmd_fid(args) -> int:
    cfg = resolve_config(args)
    dtype = _dtype(cfg)
    out = _out_dir(args)
    _write_manifest(out, "fid", cfg, {"set_a": args.set_a, "set_b": args.set_b})
    feats = []
    for source in (args.set_a, args.set_b):
        images = _load_data(source, cfg, dtype)
        feats.append(fid.pixel_features(images))
    if feats[0].shape[1] != feats[1].shape[1]:
        raise DataError(
            f"feature dimensions differ: {feats[0].shape[1]} vs {feats[1].shape[1]}"
        )
    value = fid.frechet_distance(
        fid.FidStats.from_features(feats[0]), fid.FidStats.from_features(feats[1])
    )
    with open(os.path.join(out, "fid.csv"), "w") as fh:
        fh.write("set_a,set_b,fid\n")
        fh.write(f"{args.set_a},{args.set_b},{value:.10g}\n")
    print(f"{value:.10g}")
    return EXIT_OK


def _parse_int_list(raw: str, what: str) -> list[int]:
    try:
        return [int(tok) for tok in raw.split(",") if tok]
    except ValueError:
        raise UsageError([f"{what}: cannot read {raw!r} as a comma-separated integer list"])


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    dtype = _dtype(cfg)
    qfs = _parse_int_list(args.qf_list or "100,75,50,25", "--qf")
    modes = (args.mode_list or "4:4:4,4:2:2,4:2:0").split(",")
    issues = [f"quality factor {q} outside 1..100" for q in qfs if not 1 <= q <= 100]
    issues += [f"unknown mode {m!r}" for m in modes if m not in ("4:4:4", "4:2:2", "4:2:0")]
    if issues:
        raise UsageError(issues)
    out = _out_dir(args)
    _write_manifest(out, "sweep", cfg, {"quality_factors": qfs, "modes": modes})
    images = _load_data(args.data, cfg, dtype)
    rows = fid.compression_sweep(images, qfs, modes)
    fid.write_sweep_csv(rows, os.path.join(out, "sweep.csv"))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # list the problem instead of exiting with 2
        raise UsageError([message])


def _add_common(p: _Parser, with_steps: bool = False, with_codec: bool = False):
    p.add_argument("--config", help="INI settings file")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--precision", choices=("f32", "f64"), help="arithmetic width")
    if with_steps:
        p.add_argument("--steps", type=int, help="training steps")
    if with_codec:
        p.add_argument("--qf", type=int, help="quality factor")
        p.add_argument("--mode", help="chroma mode")


def build_parser() -> _Parser:
    parser = _Parser(prog="jpeggan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the pixel baseline that seeds the anchor")
    p.add_argument("data", help="dataset: 'synthetic', a .bin batch, or a PPM directory")
    p.add_argument("--resume", help="continue from this checkpoint")
    _add_common(p, with_steps=True, with_codec=True)
    p.set_defaults(run=cmd_pretrain)

    p = sub.add_parser("train", help="joint-train the coefficient generator and critic")
    p.add_argument("data", help="dataset: 'synthetic', a .bin batch, or a PPM directory")
    p.add_argument("--pretrained", help="pretrain checkpoint that seeds trunk and critic")
    p.add_argument("--resume", help="continue from this joint checkpoint")
    _add_common(p, with_steps=True, with_codec=True)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("generate", help="sample JFIF files from a trained generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=64, help="number of images")
    p.add_argument("--grid-cols", type=int, default=8)
    _add_common(p, with_codec=True)
    p.set_defaults(run=cmd_generate)

    p = sub.add_parser("encode", help="compress PPM images with the reference codec")
    p.add_argument("inputs", nargs="+", help="PPM files")
    _add_common(p, with_codec=True)
    p.set_defaults(run=cmd_encode)

    p = sub.add_parser("decode", help="decompress JFIF files to PPM")
    p.add_argument("inputs", nargs="+", help="JFIF files")
    _add_common(p)
    p.set_defaults(run=cmd_decode)

    p = sub.add_parser("fid", help="Frechet distance between two image sets")
    p.add_argument("set_a")
    p.add_argument("set_b")
    _add_common(p)
    p.set_defaults(run=cmd_fid)

    p = sub.add_parser("sweep", help="FID of re-encoded images per quality and mode")
    p.add_argument("data")
    p.add_argument("--qf", dest="qf_list", help="comma-separated quality factors")
    p.add_argument("--mode", dest="mode_list", help="comma-separated chroma modes")
    _add_common(p)
    p.set_defaults(run=cmd_sweep)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.run(args)
    except UsageError as e:
        for issue in e.issues:
            print(f"error: {issue}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except training.DivergenceError as e:
        print(f"error: training diverged at {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonFiniteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
