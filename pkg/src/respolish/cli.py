"""Command-line entry point: prepare-data, train-cpn, train-fpn, inpaint, evaluate.

Exit codes: 0 success, 1 usage error, 2 data/checkpoint error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, load_network
from .config import ConfigError, RunConfig
from .evaluation import evaluate_pipeline, export_curves, format_table, panel, predict
from .nets import SpecError
from .objectives import fixed_random_cnn, vgg16_relu2_1
from .optim import NumericError
from .trainer import FreezeViolation, set_deterministic, train_cpn, train_fpn

log = logging.getLogger("respolish")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (override --config values)")
    for f in RunConfig.keys():
        flag = "--" + f.name.replace("_", "-")
        if flag in ("--seed", "--deterministic"):
            continue
        g.add_argument(flag, dest=f.name, default=None, metavar="V", help=f.metadata.get("help"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", default=None, help="global seed")
    common.add_argument("--deterministic", default=None, help="true/false (default true)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="respolish", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", parents=[common], help="resize a raw corpus or synthesize one")
    p.add_argument("--root", help="raw corpus directory with one sub-directory per partition")
    p.add_argument("--synthetic", metavar="N,SIZE,SEED", help="generate a synthetic corpus")
    p.add_argument("--partitions", type=int, default=1, help="synthetic partitions")
    p.add_argument("--out", help="output corpus directory")
    _add_config_flags(p)

    for name, what in (("train-cpn", "coarse painter"), ("train-fpn", "fine painter")):
        p = sub.add_parser(name, parents=[common], help=f"train the {what}")
        p.add_argument("--data", required=True, help="prepared corpus directory")
        p.add_argument("--out", help="checkpoint directory")
        p.add_argument("--resume", action="store_true", help="continue from LATEST in --out")
        if name == "train-fpn":
            p.add_argument("--cpn-ckpt", required=True, help="frozen coarse painter checkpoint")
        _add_config_flags(p)

    p = sub.add_parser("inpaint", parents=[common], help="fill the center of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--cpn-ckpt", required=True)
    p.add_argument("--fpn-ckpt")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--panel", action="store_true",
                   help="also write input | coarse | polished | ground truth strip")

    p = sub.add_parser("evaluate", parents=[common], help="metrics table on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--cpn-ckpt", required=True)
    p.add_argument("--fpn-ckpt")
    p.add_argument("--out", help="report directory")
    _add_config_flags(p)
    return parser


def _resolve(args) -> RunConfig:
    file_values = RunConfig.read_file(args.config) if args.config else {}
    flags = {
        f.name: getattr(args, f.name)
        for f in RunConfig.keys()
        if getattr(args, f.name, None) is not None
    }
    return RunConfig.resolve(file_values, flags)


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return D.env_root() / "runs" / command


def _dataset(cfg: RunConfig, root, split: str, required: bool = True):
    corpus = D.load_corpus(root, cfg.split_spec())
    records = corpus.splits[split]
    if not records:
        if required:
            raise D.DataError(f"split {split!r} of {root} is empty")
        return None
    return D.InpaintingSet.from_records(records, cfg.image_size, workers=cfg.workers)


def _extractor(cfg: RunConfig):
    if cfg.feature_extractor == "vgg16":
        return vgg16_relu2_1(cfg.vgg_weights or None)
    if cfg.feature_extractor != "random":
        raise ConfigError(f"feature_extractor must be 'random' or 'vgg16', got {cfg.feature_extractor!r}")
    return fixed_random_cnn(cfg.seed)


# --------------------------------------------------------------------------- commands


def cmd_prepare_data(args, cfg: RunConfig) -> int:
    if bool(args.root) == bool(args.synthetic):
        raise UsageError("give exactly one of --root or --synthetic")
    out = _out_dir(args, "data")
    if args.synthetic:
        try:
            n, size, seed = (int(v) for v in args.synthetic.split(","))
        except ValueError:
            raise UsageError("--synthetic expects N,SIZE,SEED") from None
        paths = D.synthetic_corpus(n, size, seed, out, args.partitions)
        print(f"wrote {len(paths)} synthetic images to {out}")
    else:
        spec = cfg.split_spec()
        root = Path(args.root)
        parts = spec.train + spec.validation + spec.test
        corpus = D.load_corpus(root, D.SplitSpec(parts, [], []))
        for rec in corpus.splits["train"]:
            target = out / Path(rec.source_id).with_suffix(".png")
            target.parent.mkdir(parents=True, exist_ok=True)
            img = D.ImageTensor(D.read_image(rec.path).astype(np.float32), D.Space.STORAGE)
            D.write_png(target, D.quantize(D.resize_image(img, cfg.image_size).data[0]))
        D.write_manifests(out, parts)
        if corpus.skipped:
            print(f"skipped {len(corpus.skipped)} undecodable files")
        for split, n in D.load_corpus(out, cfg.split_spec(), verify=False).counts().items():
            print(f"{split}: {n}")
    cfg.write(out)
    return 0


def cmd_train(args, cfg: RunConfig, phase: str) -> int:
    out = _out_dir(args, f"train-{phase}")
    set_deterministic(cfg.seed, cfg.deterministic)
    train = _dataset(cfg, args.data, "train")
    val = _dataset(cfg, args.data, "validation", required=False)
    tcfg = cfg.train_config(phase, out)
    cfg.write(out)
    if phase == "cpn":
        result = train_cpn(tcfg, train, val, cfg.cpn_spec(), cfg.disc_spec(), _extractor(cfg),
                           resume=args.resume)
    else:
        result = train_fpn(tcfg, train, val, args.cpn_ckpt, cfg.fpn_spec(), resume=args.resume)
    export_curves(result.curve, out / "curve")
    print(f"{phase}: {result.steps} steps, {result.epochs_run} epochs, "
          f"checkpoint {result.checkpoint}, best {result.best_checkpoint}")
    return 0


def cmd_inpaint(args, cfg: RunConfig) -> int:
    cpn, manifest = load_network(args.cpn_ckpt, "cpn")
    fpn = load_network(args.fpn_ckpt, "fpn")[0] if args.fpn_ckpt else None
    extra = manifest.get("extra", {})
    size = cpn.spec.input_size
    mask = extra.get("mask_size", cpn.spec.patch_size)
    fill = extra.get("fill", 0.0)
    if fpn is not None and fpn.spec.patch_size != mask:
        raise SpecError(f"fine painter patch {fpn.spec.patch_size} != coarse patch {mask}")
    image, _ = D.load_images([D.ImageRecord(Path(args.image), "", Path(args.image).name)], size)
    pred = predict(cpn, fpn, D.InpaintingSet(image, [Path(args.image).name]), mask, fill, 1)
    geom = D.MaskGeometry.centered(size, mask)
    masked = pred.masked[0]
    coarse = masked.copy()
    coarse[geom.rows, geom.cols] = pred.coarse[0]
    result = coarse
    if fpn is not None:
        result = masked.copy()
        result[geom.rows, geom.cols] = pred.polished[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_png(out, result)
    print(f"wrote {out}")
    if args.panel:
        strip = panel(masked, coarse, result, pred.originals[0])
        panel_path = out.with_name(out.stem + "_panel.png")
        D.write_png(panel_path, strip)
        print(f"wrote {panel_path}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "evaluate")
    test = _dataset(cfg, args.data, "test")
    meta = {"config": cfg.digest()}
    reports = evaluate_pipeline(args.cpn_ckpt, args.fpn_ckpt, test, metadata=meta)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    for rep, name in zip(reports, ("coarse", "polished")):
        rep.to_csv(out / f"{name}.csv")
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "prepare-data":
            return cmd_prepare_data(args, cfg)
        if args.command == "train-cpn":
            return cmd_train(args, cfg, "cpn")
        if args.command == "train-fpn":
            return cmd_train(args, cfg, "fpn")
        if args.command == "inpaint":
            return cmd_inpaint(args, cfg)
        return cmd_evaluate(args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"respolish: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"respolish: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, CheckpointError, SpecError, FreezeViolation, OSError) as e:
        print(f"respolish: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
