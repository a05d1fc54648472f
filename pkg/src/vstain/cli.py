"""Command-line entry point: generate-data, train, infer, evaluate, report.

Structured settings live in a YAML/JSON config file; flags override the
file, which overrides built-in defaults. Failures print one line of the
form ``error: <kind>: <message>`` to stderr and exit with status 1; usage
errors (unknown subcommand or flag) exit with status 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import yaml

from . import __version__

log = logging.getLogger("vstain")

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(message)


# -- helpers ------------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _hash_obj(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CLIError("config", f"config file {path} does not exist")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise CLIError("config", f"cannot parse {path}: {exc}".replace("\n", " ")) from None
    if not isinstance(data, dict):
        raise CLIError("config", f"{path} must contain a mapping at the top level")
    return data


def _require(args, *flags):
    for flag in flags:
        if getattr(args, flag.lstrip("-").replace("-", "_")) is None:
            raise CLIError("missing_flag", f"{flag} is required")


def _list_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise CLIError("input", f"{path} is neither an image nor a directory")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CLIError("input", f"no PNG/TIFF images in {path}")
    return files


def _provenance(command: str, **fields) -> dict:
    return {"tool": "vstain", "version": __version__, "command": command, **fields}


# -- subcommands --------------------------------------------------------------


def cmd_generate_data(args) -> int:
    from .synthbench import SynthSpec, generate_dataset

    _require(args, "--out", "--n")
    cfg = load_config(args.config)
    spec_dict = dict(cfg.get("synth", cfg))
    if args.spec:
        spec_dict.update(load_config(args.spec))
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    for key in ("mapping", "size"):
        if getattr(args, key) is not None:
            spec_dict[key] = getattr(args, key)
    try:
        spec = SynthSpec(**spec_dict)
    except (TypeError, ValueError) as exc:
        raise CLIError("spec", str(exc)) from None
    out = Path(args.out)
    try:
        manifest = generate_dataset(spec, args.n, out)
    except OSError as exc:
        raise CLIError("io", f"cannot write to {out}: {exc}") from None
    _write_json(
        out / "provenance.json",
        _provenance("generate-data", spec=spec.to_dict(), config_hash=_hash_obj(spec.to_dict()), seed=spec.seed, n=args.n),
    )
    print(f"wrote {len(manifest['pairs'])} pairs to {out}")
    return 0


def _train_configs(cfg: dict, args):
    from .encoders import AttnEncoderConfig, ConvEncoderConfig
    from .implicit_head import ModelConfig
    from .training import TrainConfig

    train = dict(cfg.get("train") or {})
    loss = cfg.get("loss") or {}
    if "lambdas" in loss:
        train["lambdas"] = list(loss["lambdas"])
    if "perceptual_networks" in loss:
        train["perceptual_networks"] = list(loss["perceptual_networks"])
    if "seed" in cfg:
        train["seed"] = cfg["seed"]
    if args.seed is not None:
        train["seed"] = args.seed
    if args.steps is not None:
        train["max_steps"] = args.steps
    try:
        tcfg = TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise CLIError("config", f"train: {exc}") from None
    model = cfg.get("model")
    if model is None:
        return tcfg, None
    model = dict(model)
    try:
        for key, cls in (("conv", ConvEncoderConfig), ("attn", AttnEncoderConfig)):
            if key in model and model[key] is not None:
                model[key] = cls(**model[key])
        return tcfg, model
    except (TypeError, ValueError) as exc:
        raise CLIError("config", f"model: {exc}") from None


def cmd_train(args) -> int:
    from .implicit_head import ModelConfig
    from .synthbench import load_dataset
    from .checkpoint import file_hash
    from .training import TrainingDivergedError, train_model

    cfg = load_config(args.config)
    _require(args, "--data", "--out")
    tcfg, model_kwargs = _train_configs(cfg, args)
    try:
        dataset = load_dataset(args.data)
    except (FileNotFoundError, ValueError, OSError) as exc:
        raise CLIError("data", str(exc)) from None
    if not dataset:
        raise CLIError("data", f"{args.data} contains no pairs")
    c_in, c_out = dataset[0].source.channels, dataset[0].target.channels
    model_cfg = None
    if model_kwargs is not None:
        model_kwargs.setdefault("in_channels", c_in)
        model_kwargs.setdefault("out_channels", c_out)
        for key in ("conv", "attn"):
            sub = model_kwargs.get(key)
            if sub is not None:
                sub.in_channels = model_kwargs["in_channels"]
        try:
            model_cfg = ModelConfig(**model_kwargs)
        except (TypeError, ValueError) as exc:
            raise CLIError("config", f"model: {exc}") from None
    out = Path(args.out)
    try:
        result = train_model(dataset, tcfg, model_cfg, out_dir=out)
    except TrainingDivergedError as exc:
        raise CLIError("diverged", str(exc)) from None
    except ValueError as exc:
        raise CLIError("config", str(exc)) from None
    merged = {"train": tcfg.to_dict(), "model": result.model.cfg.to_dict()}
    manifest = Path(args.data) / "manifest.json"
    _write_json(
        out / "provenance.json",
        _provenance(
            "train",
            config=merged,
            config_hash=_hash_obj(merged),
            seed=tcfg.seed,
            data_manifest_hash=_hash_files([manifest]),
            checkpoint_hash=file_hash(out / "checkpoint.zip"),
            steps=len(result.history),
        ),
    )
    last = result.history[-1]
    print(f"trained {len(result.history)} steps, final total loss {last['total']:.6f}; checkpoint at {out / 'checkpoint.zip'}")
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import CheckpointError, file_hash, load_checkpoint
    from .imagecore import read_image, write_image
    from .inference import DEFAULT_OVERLAP, translate

    cfg = load_config(args.config).get("infer", {})
    _require(args, "--checkpoint", "--input", "--out")
    scale = args.scale if args.scale is not None else cfg.get("scale", "1")
    tile = args.tile if args.tile is not None else cfg.get("tile")
    overlap = args.overlap if args.overlap is not None else cfg.get("overlap", DEFAULT_OVERLAP)
    try:
        model, ckpt_cfg = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CLIError("checkpoint", str(exc)) from None
    ckpt_hash = file_hash(args.checkpoint)
    out = Path(args.out)
    suffix = f".{args.format}"
    for path in _list_images(Path(args.input)):
        image = read_image(path)
        if image.channels != model.cfg.in_channels:
            raise CLIError(
                "input", f"{path.name} has {image.channels} channels; checkpoint expects {model.cfg.in_channels}"
            )
        try:
            result = translate(image, model, scale=scale, tile=tile, overlap=overlap)
        except ValueError as exc:
            raise CLIError("scale", str(exc)) from None
        target = write_image(out / f"{path.stem}{suffix}", result, bit_depth=args.bit_depth)
        _write_json(
            target.with_suffix(".json"),
            _provenance(
                "infer",
                checkpoint_hash=ckpt_hash,
                scale=str(scale),
                tile=tile,
                overlap=overlap,
                input=path.name,
                input_hash=_hash_files([path]),
                output_size=[result.height, result.width],
                config=ckpt_cfg["model"],
                seed=args.seed,
            ),
        )
    print(f"translated images written to {out}")
    return 0


def _paired_files(pred_dir: Path, ref_dir: Path):
    preds = {p.stem: p for p in _list_images(pred_dir)}
    refs = {p.stem: p for p in _list_images(ref_dir)}
    common = sorted(set(preds) & set(refs))
    if not common:
        raise CLIError("input", f"no matching file names between {pred_dir} and {ref_dir}")
    missing = sorted(set(refs) - set(preds))
    if missing:
        raise CLIError("input", f"prediction missing for reference {missing[0]}")
    return [(k, preds[k], refs[k]) for k in common]


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_sets
    from .imagecore import RasterImage, read_image, write_image

    cfg = load_config(args.config).get("evaluate", {})
    _require(args, "--pred", "--ref", "--out")
    mode = args.mode or cfg.get("mode", "all")
    pairs = _paired_files(Path(args.pred), Path(args.ref))
    preds, refs = [], []
    for name, p, r in pairs:
        pi, ri = read_image(p), read_image(r)
        if pi.shape != ri.shape:
            raise CLIError("input", f"{name}: prediction {pi.shape} and reference {ri.shape} differ in shape")
        preds.append(pi)
        refs.append(ri)
    if mode in ("mif", "ihc", "all") and any(im.channels != 3 for im in preds):
        raise CLIError("input", f"mode {mode} needs RGB images")

    sink = None
    if args.dump_masks:
        dump = Path(args.dump_masks)

        def sink(name, stain, pm, rm):
            write_image(dump / f"{name}_{stain}_pred.png", RasterImage(pm.astype(float)))
            write_image(dump / f"{name}_{stain}_ref.png", RasterImage(rm.astype(float)))

    report = evaluate_sets(preds, refs, mode=mode, names=[n for n, _, _ in pairs], mask_sink=sink)
    report.model = args.name or Path(args.pred).name
    report.provenance = _provenance(
        "evaluate",
        mode=mode,
        pred_hash=_hash_files([p for _, p, _ in pairs]),
        ref_hash=_hash_files([r for _, _, r in pairs]),
        seed=args.seed,
    )
    report.save(args.out)
    print(f"report written to {args.out}")
    return 0


def cmd_report(args) -> int:
    from .evaluation import MetricReport, render_table

    _require(args, "--out")
    if not args.reports:
        raise CLIError("missing_flag", "at least one report JSON is required")
    reports = []
    for path in args.reports:
        try:
            reports.append(MetricReport.load(path))
        except (OSError, ValueError) as exc:
            raise CLIError("input", f"{path}: {exc}") from None
    names = [r.model or Path(p).stem for r, p in zip(reports, args.reports)]
    fmt = args.format or ("csv" if str(args.out).endswith(".csv") else "md")
    table = render_table(reports, fmt=fmt, names=names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    _write_json(
        out.with_name(out.name + ".provenance.json"),
        _provenance("report", inputs=[Path(p).name for p in args.reports], input_hash=_hash_files(args.reports), seed=args.seed),
    )
    print(table, end="")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vstain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vstain {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{generate-data,train,infer,evaluate,report}")
    sub.required = True

    def common(p):
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("generate-data", help="write a synthetic paired dataset")
    common(p)
    p.add_argument("--spec", help="YAML/JSON synthetic spec")
    p.add_argument("--n", type=int)
    p.add_argument("--mapping", choices=("pointwise", "contextual", "longrange"))
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="fit a model on a paired dataset")
    common(p)
    p.add_argument("--data", help="dataset directory with manifest.json")
    p.add_argument("--steps", type=int, help="override the step budget")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="translate images with a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="image file or directory")
    p.add_argument("--scale", help="output scale, e.g. 1, 4 or 1/2")
    p.add_argument("--tile", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--format", choices=("png", "tif"), default="png")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against references")
    common(p)
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--mode", choices=("mif", "ihc", "texture", "all"))
    p.add_argument("--dump-masks")
    p.add_argument("--name", help="model name recorded in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render report JSONs as a table")
    common(p)
    p.add_argument("reports", nargs="*")
    p.add_argument("--format", choices=("md", "csv"))
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
