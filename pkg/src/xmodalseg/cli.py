"""Command-line entry points: data generation, training, evaluation, ablation.

Every command that takes ``--out`` writes its resolved ``config.json`` there
plus a ``manifest.txt`` of content hashes covering every file it produced.
Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import evalkit, selftest, synthdata
from .config import ConfigError, load_config
from .micronet import MicroNetParams, Toggles
from .projection import project_points, project_labels
from .tensor_io import export_ppm, read_tensor, write_tensor
from .training import evaluate, train
from .treefilter import GuideSource, guided_filter

log = logging.getLogger("xmodalseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ABLATION_COLUMNS = ["seed", "filter", "cross", "miou_2d", "miou_empty", "miou_3d", "coverage_3d"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p, out_required=True):
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="base seed (non-negative integer)")
    if out_required is not None:
        p.add_argument("--out", metavar="DIR", required=out_required, help="output directory")


def _overrides(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau-start", type=float)
    p.add_argument("--tau-end", type=float)
    p.add_argument("--no-filter", action="store_true", default=None)
    p.add_argument("--no-dycross", action="store_true", default=None)
    p.add_argument("--guide", choices=[g.value for g in GuideSource])


def build_parser():
    parser = _Parser(prog="xmodalseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic camera+LiDAR dataset")
    _common(p)
    p.add_argument("--n-scenes", type=int, help="number of scenes (default: data.n_train)")

    p = sub.add_parser("project", help="project a stored sample's point cloud")
    _common(p)
    p.add_argument("--sample", metavar="DIR", required=True, help="sample directory")

    p = sub.add_parser("filter", help="tree-filter a stored signal with a stored guide")
    _common(p)
    p.add_argument("--signal", metavar="PATH", required=True, help="C x H x W tensor")
    p.add_argument("--guide-tensor", metavar="PATH", required=True, help="K x H x W tensor")

    p = sub.add_parser("train", help="train the network")
    _common(p)
    _overrides(p)
    p.add_argument("--data", metavar="DIR", help="training set (default: data.train_dir)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", metavar="DIR", required=True)
    p.add_argument("--data", metavar="DIR", help="test set (default: data.test_dir)")
    p.add_argument("--no-filter", action="store_true", default=None)
    p.add_argument("--guide", choices=[g.value for g in GuideSource])

    p = sub.add_parser("ablate", help="filter x cross-supervision grid over several seeds")
    _common(p)
    _overrides(p)
    p.add_argument("--seeds", type=int, help="number of seeds (default: ablation.seeds)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")

    p = sub.add_parser("selftest", help="run the oracle suites")
    _common(p, out_required=None)
    return parser


def resolve_config(args):
    """Load ``--config`` (or defaults) and apply the command-line overrides."""
    cfg = load_config(getattr(args, "config", None))
    train_kw, dy_kw, data_kw, abl_kw = {}, {}, {}, {}
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        train_kw["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_kw["epochs"] = args.epochs
    if getattr(args, "no_filter", None):
        train_kw["use_filter"] = False
    if getattr(args, "no_dycross", None):
        train_kw["use_dycross"] = False
    if getattr(args, "guide", None):
        train_kw["guide_source"] = GuideSource(args.guide)
    for flag, key in (("alpha", "alpha"), ("tau_start", "tau_start"), ("tau_end", "tau_end")):
        if getattr(args, flag, None) is not None:
            dy_kw[key] = getattr(args, flag)
    for flag in ("n_train", "n_test"):
        if getattr(args, flag, None) is not None:
            data_kw[flag] = getattr(args, flag)
    if getattr(args, "seeds", None) is not None:
        abl_kw["seeds"] = args.seeds
    try:
        return cfg.replace(
            train=dataclasses.replace(cfg.train, **train_kw),
            dycross=dataclasses.replace(cfg.dycross, **dy_kw),
            data=dataclasses.replace(cfg.data, **data_kw),
            ablation=dataclasses.replace(cfg.ablation, **abl_kw),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def write_run_manifest(out_dir):
    """Hash every file under ``out_dir`` into ``out_dir/manifest.txt``."""
    entries = []
    for root, _, files in os.walk(out_dir):
        for name in files:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir).replace(os.sep, "/")
            if rel == "manifest.txt":
                continue
            with open(path, "rb") as f:
                entries.append((rel, synthdata.content_hash(f.read())))
    synthdata.write_manifest(out_dir, entries)
    return sorted(entries)


def _begin(out_dir, cfg, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    doc = cfg.to_dict()
    if extra:
        doc["command"] = extra
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _need_dir(path, what):
    if not path:
        raise UsageError(f"no {what} given (use --data or the config's data section)")
    return path


def cmd_gen_data(args, cfg):
    n = args.n_scenes if args.n_scenes is not None else cfg.data.n_train
    if n < 1:
        raise UsageError("--n-scenes must be positive")
    seed = cfg.train.seed
    _begin(args.out, cfg, {"name": "gen-data", "n_scenes": n, "seed": seed})
    synthdata.make_dataset(n, seed, args.out)
    print(f"wrote {n} scenes to {args.out}")


def cmd_project(args, cfg):
    sample = synthdata.load_sample(args.sample)
    _begin(args.out, cfg, {"name": "project"})
    lidar_map, index = project_points(sample.cloud, sample.camera)
    labels = project_labels(sample.labels3d, index)
    write_tensor(lidar_map, os.path.join(args.out, "lidar_map.mmtf"))
    write_tensor(labels, os.path.join(args.out, "label_p3d.mmtf"))
    export_ppm(labels, os.path.join(args.out, "label_p3d.ppm"))
    print(f"{int(index.valid.sum())} of {len(sample.cloud)} points own a pixel, "
          f"{int((labels != 65535).sum())} labeled pixels")


def cmd_filter(args, cfg):
    y = read_tensor(args.signal)
    guide = read_tensor(args.guide_tensor)
    if y.ndim != 3 or guide.ndim != 3:
        raise ValueError("signal and guide must be C x H x W tensors")
    out = guided_filter(y, guide.astype(np.float64), cfg.train.guide_source)
    _begin(args.out, cfg, {"name": "filter"})
    write_tensor(out.astype(y.dtype) if y.dtype.kind == "f" else out,
                 os.path.join(args.out, "filtered.mmtf"))
    if out.shape[0] <= 16:
        export_ppm(np.argmax(out, axis=0), os.path.join(args.out, "filtered.ppm"))
    print(f"filtered {out.shape[0]} x {out.shape[1]} x {out.shape[2]} signal")


def cmd_train(args, cfg):
    data_dir = _need_dir(args.data or cfg.data.train_dir, "training set")
    dataset = synthdata.load_dataset(data_dir)
    _begin(args.out, cfg, {"name": "train", "data": data_dir})
    params, rows = train(dataset, cfg.train, cfg.dycross, n_cls=synthdata.N_CLASSES,
                         log_path=os.path.join(args.out, "metrics.csv"))
    ckpt = os.path.join(args.out, "checkpoint")
    params.save(ckpt)
    with open(os.path.join(ckpt, "toggles.json"), "w") as f:
        json.dump({"use_filter": cfg.train.use_filter,
                   "guide_source": cfg.train.guide_source.value}, f, sort_keys=True)
        f.write("\n")
    if rows:
        print(f"trained {cfg.train.epochs} epochs, final loss {rows[-1][-1]:.4f}")


def cmd_eval(args, cfg):
    data_dir = _need_dir(args.data or cfg.data.test_dir, "test set")
    params = MicroNetParams.load(args.checkpoint)
    use_filter, guide = cfg.train.use_filter, cfg.train.guide_source
    saved = os.path.join(args.checkpoint, "toggles.json")
    if os.path.exists(saved):
        with open(saved) as f:
            t = json.load(f)
        use_filter, guide = t["use_filter"], GuideSource(t["guide_source"])
    if args.no_filter:
        use_filter = False
    if args.guide:
        guide = GuideSource(args.guide)
    toggles = Toggles(use_filter, False, guide)
    dataset = synthdata.load_dataset(data_dir)
    _begin(args.out, cfg, {"name": "eval", "data": data_dir, "use_filter": use_filter,
                           "guide_source": guide.value})
    res = evaluate(params, dataset, toggles, n_cls=params.n_cls)
    evalkit.write_results(os.path.join(args.out, "results.csv"), res.rows())
    print(f"2D mIoU {100 * res.miou_2d:.2f}  empty-region mIoU {100 * res.miou_empty:.2f}  "
          f"3D mIoU {100 * res.miou_3d:.2f}  coverage {100 * res.coverage_3d:.2f}")


def _ablation_data(cfg, seed):
    if cfg.data.train_dir and cfg.data.test_dir:
        return synthdata.load_dataset(cfg.data.train_dir), synthdata.load_dataset(cfg.data.test_dir)
    train_set = [synthdata.make_sample(1000 + seed, i) for i in range(cfg.data.n_train)]
    test_set = [synthdata.make_sample(2000 + seed, i) for i in range(cfg.data.n_test)]
    return train_set, test_set


def ablation_run(cfg, seed):
    """Train and evaluate every grid variant for one seed.

    The variants share the datasets and the initial parameters; only the
    toggles differ.
    """
    train_set, test_set = _ablation_data(cfg, seed)
    rows = []
    for use_filter, use_dycross in cfg.ablation.grid:
        tcfg = dataclasses.replace(cfg.train, seed=seed, use_filter=use_filter,
                                   use_dycross=use_dycross)
        params, _ = train(train_set, tcfg, cfg.dycross, n_cls=synthdata.N_CLASSES)
        r = evaluate(params, test_set, tcfg.toggles)
        rows.append([seed, int(use_filter), int(use_dycross), r.miou_2d, r.miou_empty,
                     r.miou_3d, r.coverage_3d])
        log.info("seed %d filter %d cross %d: 2D %.3f 3D %.3f", seed, use_filter, use_dycross,
                 r.miou_2d, r.miou_3d)
    return rows


def summarize(rows, grid):
    """Per-variant mean over seeds; returns ``[(filter, cross, 2d, empty, 3d, cov)]``."""
    arr = np.array(rows, dtype=np.float64)
    out = []
    for use_filter, use_dycross in grid:
        sel = arr[(arr[:, 1] == use_filter) & (arr[:, 2] == use_dycross)]
        out.append((use_filter, use_dycross, *sel[:, 3:].mean(axis=0)))
    return out


def format_table(summary):
    mark = {True: "x", False: ""}
    lines = [f"{'filter':>6} {'cross':>5} {'2D mIoU':>8} {'3D mIoU':>8} {'empty 2D':>9} {'cover':>6}"]
    for f, c, m2, me, m3, cov in summary:
        lines.append(f"{mark[bool(f)]:>6} {mark[bool(c)]:>5} {100 * m2:8.2f} {100 * m3:8.2f} "
                     f"{100 * me:9.2f} {100 * cov:6.2f}")
    return "\n".join(lines)


def cmd_ablate(args, cfg):
    if cfg.ablation.seeds < 1 or args.jobs < 1:
        raise UsageError("--seeds and --jobs must be positive")
    seeds = [cfg.train.seed + k for k in range(cfg.ablation.seeds)]
    _begin(args.out, cfg, {"name": "ablate", "seeds": seeds})
    if args.jobs == 1:
        per_seed = [ablation_run(cfg, s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            per_seed = list(pool.map(ablation_run, [cfg] * len(seeds), seeds))
    rows = [r for block in per_seed for r in block]
    with open(os.path.join(args.out, "ablation.csv"), "w") as f:
        f.write(",".join(ABLATION_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join([str(r[0]), str(r[1]), str(r[2])] + [f"{v:.6f}" for v in r[3:]]) + "\n")
    table = format_table(summarize(rows, cfg.ablation.grid))
    with open(os.path.join(args.out, "table.txt"), "w") as f:
        f.write(table + "\n")
    print(table)


def cmd_selftest(args, cfg):
    ok = selftest.run(cfg.train.seed, sys.stdout)
    if not ok:
        raise RuntimeError("selftest failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "project": cmd_project,
    "filter": cmd_filter,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def run(argv=None):
    """Parse ``argv`` and run the command; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except SystemExit as exc:  # --help
        return exc.code or EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"xmodalseg: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"xmodalseg: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        COMMANDS[args.command](args, cfg)
        if getattr(args, "out", None):
            write_run_manifest(args.out)
    except UsageError as exc:
        print(f"xmodalseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any failure while running is a runtime error
        print(f"xmodalseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
