"""``drpc`` command line: gen-data, stylize-preview, train, eval, ablate.

Exit codes: 0 ok, 1 usage or configuration error, 2 non-finite loss,
3 file or data error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import pyramid as P
from . import sceneforge as sf
from . import segnet
from . import stylizer as st
from . import trainer as tr
from .errors import ConfigError, DataError, NonFiniteLossError
from .metrics import evaluate_domains
from .tensorio import write_ppm, write_tensor

log = logging.getLogger("drpc")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty; pass --force to write into it")
    os.makedirs(path, exist_ok=True)


def _load_config(args):
    cfg = config_mod.load(args.config)
    if getattr(args, "workers", None):
        cfg = cfg.with_values(eval__workers=args.workers)
    return cfg


def _dataset_for(cfg, path):
    """Load a dataset from ``path`` or render the configured one in memory."""
    if path:
        ds = sf.load_dataset(path, cfg.get("scene", "num_classes"), cfg.get("loss", "ignore_index"))
        if ds.spec is not None and ds.spec.num_classes != cfg.get("scene", "num_classes"):
            raise ConfigError(f"dataset {path} has {ds.spec.num_classes} classes, "
                              f"config expects {cfg.get('scene', 'num_classes')}")
        return ds
    s = cfg.values["scene"]
    return sf.build_dataset(cfg.scene_spec(), cfg.registry(), s["n_train"], s["n_val"], s["n_test"])


def _write_snapshot(out, cfg):
    with open(os.path.join(out, "config.snapshot"), "w", encoding="utf-8") as fh:
        fh.write(f"# config hash {cfg.hash()}\n")
        fh.write(cfg.canonical())


def _print_report(report):
    for domain, entry in report.per_domain.items():
        print(f"  {domain:<16s} mIoU {entry['miou']:.4f}")
    print(f"  {'gPerf':<16s}      {report.g_perf:.4f}")


# subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_config(args)
    if args.samples is not None:
        cfg = cfg.with_values(scene__n_train=args.samples, scene__n_val=args.samples, scene__n_test=args.samples)
    if args.seed is not None:
        cfg = cfg.with_values(scene__layout_seed=args.seed)
    _prepare_out(args.out, args.force)
    ds = _dataset_for(cfg, None)
    sf.write_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples to {args.out} (config {cfg.hash()})")
    hist = ds.class_histogram()
    total = sum(hist.values())
    for cls, count in hist.items():
        name = sf.CLASS_NAMES[cls] if cls < len(sf.CLASS_NAMES) else str(cls)
        print(f"  {name:<11s} {count:>9d}  {count / total:6.2%}")
    return EXIT_OK


def cmd_stylize_preview(args):
    cfg = _load_config(args)
    registry = cfg.registry()
    _prepare_out(args.out, args.force)
    if args.dataset:
        source = sf.load_dataset(args.dataset).split("train", st.IDENTITY.id)
        if not source:
            raise DataError(f"{args.dataset} has no source-domain training samples")
        image = source[args.index % len(source)].float_image()
    else:
        image = sf.render_scene(cfg.scene_spec(), args.index)[0]
    styles = registry.train[:args.count] if args.count else registry.train
    write_tensor(os.path.join(args.out, "source.drpc"), image)
    if args.ppm:
        write_ppm(os.path.join(args.out, "source.ppm"), image)
    for s in styles:
        out = st.apply(s, image)
        write_tensor(os.path.join(args.out, f"{s.id}.drpc"), out)
        if args.ppm:
            write_ppm(os.path.join(args.out, f"{s.id}.ppm"), np.concatenate([image, out], axis=2))
        print(f"  {s.id:<10s} mean |delta| {np.abs(out - image).mean():.4f}")
    print(f"wrote {len(styles)} before/after pairs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    mode = args.mode or cfg.get("trainer", "mode")
    cfg = cfg.with_values(trainer__mode=mode)
    if args.steps is not None:
        cfg = cfg.with_values(trainer__steps=args.steps)
    train_cfg = cfg.train_config()
    registry = cfg.registry()
    ds = _dataset_for(cfg, args.dataset)
    _prepare_out(args.out, args.force)
    _write_snapshot(args.out, cfg)
    print(f"training mode={mode} steps={train_cfg.steps} config {cfg.hash()}")
    result = tr.train(train_cfg, ds, registry, run_dir=args.out, config_hash=cfg.hash())
    report = tr.evaluate(result.net, ds, "test", list(cfg.get("eval", "domains")) or None,
                         cfg.get("loss", "ignore_index"))
    report.write(os.path.join(args.out, "reports", "metrics.json"), os.path.join(args.out, "reports", "metrics.csv"),
                 sf.CLASS_NAMES)
    last = result.losses[-1]
    print(f"final segLoss {last.seg:.4f} total {last.total:.4f}; checkpoint {result.checkpoint}")
    _print_report(report)
    return EXIT_OK


def cmd_eval(args):
    net = segnet.load_checkpoint(args.checkpoint)
    ds = sf.load_dataset(args.dataset)
    if ds.spec is not None and ds.spec.num_classes != net.num_classes:
        raise ConfigError(f"checkpoint predicts {net.num_classes} classes but dataset {args.dataset} "
                          f"has {ds.spec.num_classes}")
    labelled = [s.label for s in ds.samples]
    top = max((int(l[l != args.ignore_index].max(initial=0)) for l in labelled), default=0)
    if top >= net.num_classes:
        raise ConfigError(f"dataset label id {top} exceeds checkpoint class count {net.num_classes}")
    domains = [d for d in (args.domains or "").split(",") if d] or ds.domains("test")
    known = set(ds.domains("train")) | set(ds.domains("val")) | set(ds.domains("test"))
    missing = [d for d in domains if d not in known]
    if missing:
        raise ConfigError(f"domains not in dataset: {missing}")
    by_domain = {d: [s for s in ds.samples if s.domain_id == d] for d in domains}
    report = evaluate_domains(lambda x: segnet.predict(net, x), by_domain, net.num_classes, args.ignore_index)
    os.makedirs(args.out, exist_ok=True)
    report.write(os.path.join(args.out, "metrics.json"), os.path.join(args.out, "metrics.csv"), sf.CLASS_NAMES)
    if args.dump_pyramids:
        _dump_pyramids(net, by_domain, os.path.join(args.out, "pyramids"))
    print(f"evaluated {args.checkpoint} on {len(domains)} domain(s)")
    _print_report(report)
    return EXIT_OK


def _dump_pyramids(net, by_domain, directory):
    """Write the tapped pyramid vectors of each domain's first sample."""
    os.makedirs(directory, exist_ok=True)
    for domain, samples in by_domain.items():
        image = samples[0].float_image()[None]
        _, acts = segnet.forward(net, image)
        for name, act in acts.items():
            write_tensor(os.path.join(directory, f"{domain}__{name}.drpc"), P.spp(act.detach()).values.data[0])


def cmd_ablate(args):
    cfg = _load_config(args)
    if args.seeds:
        cfg = cfg.with_values(eval__seeds=tuple(int(s) for s in args.seeds.split(",")))
    if args.steps is not None:
        cfg = cfg.with_values(trainer__steps=args.steps)
    registry = cfg.registry()
    ds = _dataset_for(cfg, args.dataset)
    _prepare_out(args.out, args.force)
    _write_snapshot(args.out, cfg)
    seeds = cfg.get("eval", "seeds")
    workers = cfg.get("eval", "workers")
    print(f"ablation: {len(tr.ARMS)} arms x {len(seeds)} seeds, {workers} worker(s), config {cfg.hash()}")
    base = cfg.train_config()
    report = tr.ablate(base, ds, registry, seeds=seeds, workers=workers,
                       domains=list(cfg.get("eval", "domains")) or None)
    report.write(args.out)
    print(report.format())
    return EXIT_OK


# parser ----------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="drpc", description="Domain-randomized segmentation with pyramid consistency.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="experiment config (INI); defaults apply when omitted")
        if out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        p.add_argument("--workers", type=int, help="parallel worker cap")

    p = sub.add_parser("gen-data", help="render and write a procedural dataset")
    common(p)
    p.add_argument("--samples", type=int, help="scenes per split (train, each val and each test domain)")
    p.add_argument("--seed", type=int, help="layout seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stylize-preview", help="dump before/after pairs for the training stylizers")
    common(p)
    p.add_argument("--dataset", help="take the source image from this dataset instead of rendering one")
    p.add_argument("--index", type=int, default=0, help="scene index")
    p.add_argument("--count", type=int, default=0, help="number of stylizers (0 = all)")
    p.add_argument("--ppm", action="store_true", help="also write side-by-side P6 images")
    p.set_defaults(func=cmd_stylize_preview)

    p = sub.add_parser("train", help="train one model and evaluate it on the held-out domains")
    common(p)
    p.add_argument("--mode", choices=tr.MODES, help="ablation arm (overrides trainer.mode)")
    p.add_argument("--dataset", help="dataset directory; rendered from the config when omitted")
    p.add_argument("--steps", type=int, help="override trainer.steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on dataset domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--domains", help="comma-separated domain ids (default: all test domains)")
    p.add_argument("--out", required=True)
    p.add_argument("--ignore-index", type=int, default=255)
    p.add_argument("--dump-pyramids", action="store_true", help="also write tapped pyramid vectors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every ablation arm over several seeds")
    common(p)
    p.add_argument("--seeds", help="comma-separated seeds (overrides eval.seeds)")
    p.add_argument("--dataset", help="dataset directory; rendered from the config when omitted")
    p.add_argument("--steps", type=int, help="override trainer.steps")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("config", help="print the config schema or a resolved config")
    p.add_argument("--config")
    p.add_argument("--schema", action="store_true")
    p.set_defaults(func=cmd_config)
    return parser


def cmd_config(args):
    if args.schema:
        print(config_mod.describe_schema())
    else:
        cfg = config_mod.load(args.config)
        print(f"# config hash {cfg.hash()}")
        print(cfg.canonical())
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"diagnostic dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
