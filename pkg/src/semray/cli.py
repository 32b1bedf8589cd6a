"""Command-line entry point.

Subcommands: gen-data, train, finetune, render, eval, profile, gradcheck,
version.  Exit codes: 0 success, 1 usage error, 2 runtime error.  All knobs
come from defaults < ``--config`` file < flags; SEMRAY_THREADS caps worker
threads.
"""

from __future__ import annotations

import argparse
import difflib
import sys

from . import __version__
from .runtime import apply_thread_cap, tune_allocator

apply_thread_cap()


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors and flag suggestions."""

    def _all_option_strings(self):
        options = []
        for action in self._actions:
            options.extend(action.option_strings)
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    for sub_action in sub._actions:
                        options.extend(sub_action.option_strings)
        return options

    def error(self, message):
        if "unrecognized arguments" in message:
            bad = message.split(":", 1)[1].strip().split()[0]
            close = difflib.get_close_matches(bad, self._all_option_strings(), n=1)
            if close:
                message += f" (did you mean {close[0]!r}?)"
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir", help="output directory")


_CONFIG_FLAGS = (
    ("--manifest", str, "manifest"), ("--steps", int, "steps"),
    ("--batch-rays", int, "batch_rays"), ("--lr-init", float, "lr_init"),
    ("--lr-final", float, "lr_final"), ("--lambda-sem", float, "lambda_sem"),
    ("--lambda-photo", float, "lambda_photo"), ("--channels", int, "channels"),
    ("--heads", int, "heads"), ("--base-channels", int, "base_channels"),
    ("--tau", float, "tau"), ("--variant", str, "variant"),
    ("--n-coarse", int, "n_coarse"), ("--n-fine", int, "n_fine"),
    ("--num-res-blocks", int, "num_res_blocks"),
    ("--source-views", int, "source_views"), ("--dtype", str, "dtype"),
    ("--ckpt-interval", int, "ckpt_interval"), ("--val-interval", int, "val_interval"),
    ("--density-min", int, "density_min"), ("--density-max", int, "density_max"),
)


def _add_train_flags(p):
    for flag, kind, dest in _CONFIG_FLAGS:
        p.add_argument(flag, type=kind, dest=dest)
    p.add_argument("--no-hierarchical", dest="hierarchical", action="store_false",
                   default=None)
    p.add_argument("--no-position-embedding", dest="position_embedding",
                   action="store_false", default=None)
    p.add_argument("--dry-run", action="store_true",
                   help="validate config and dataset without training")


def build_parser():
    parser = _Parser(prog="semray", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset",
                       add_help=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--res", type=int, nargs=2, default=(48, 48), metavar=("H", "W"))
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--template", default="room", choices=("room", "clutter"))
    p.add_argument("--n-test", type=int, default=-1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="finetune a checkpoint on one scene")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene-id", required=True)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--view-id", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--mode", default="generalization",
                   choices=("generalization", "finetuned"))
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("profile", help="attention FLOPs/memory cost table")
    p.add_argument("--rays", type=int, default=1024)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--csv", help="also write the table as CSV to this path")

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)

    sub.add_parser("version", help="print version and exit")
    return parser


def _runconfig_from_args(args):
    from .config import load_config_file, merge_config, RunConfig
    file_updates = load_config_file(args.config) if getattr(args, "config", None) else {}
    keys = set(RunConfig.__dataclass_fields__)
    flag_updates = {k: v for k, v in vars(args).items() if k in keys and v is not None}
    return merge_config(file_updates, flag_updates)


def _cmd_gen_data(args):
    from .scene import make_dataset
    n_test = None if args.n_test < 0 else args.n_test
    manifest = make_dataset(args.scenes, args.views, args.res[0], args.res[1],
                            args.seed, args.out, args.classes, args.template, n_test)
    print(f"wrote dataset manifest {manifest}")
    return 0


def _cmd_train(args):
    from .scene import load_dataset
    from .train import run_training
    cfg = _runconfig_from_args(args)
    dataset = load_dataset(cfg.manifest)
    if args.dry_run:
        print(f"config ok; dataset: {len(dataset.train)} train / "
              f"{len(dataset.test)} test scenes")
        return 0
    result = run_training(cfg, dataset=dataset)
    print(f"trained {result.steps} steps, final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}\nlog: {result.log_path}")
    return 0


def _cmd_finetune(args):
    from .scene import load_dataset
    from .train import finetune
    cfg = _runconfig_from_args(args)
    dataset = load_dataset(cfg.manifest)
    result, _model = finetune(cfg, args.ckpt, args.scene_id, dataset=dataset)
    print(f"finetuned on {args.scene_id}: checkpoint {result.checkpoint_path}")
    return 0


def _cmd_render(args):
    import numpy as np
    from .pipeline import render_view
    from .scene import holdout_split, load_scene_dir, write_pgm, write_ppm
    from .train import load_model
    from .geometry import select_source_views
    model, _header = load_model(args.ckpt)
    scene = load_scene_dir(args.scene, args.scene)
    train_ids, _ = holdout_split(scene.n_views)
    pool = [i for i in train_ids if i != args.view_id]
    picked = select_source_views([scene.cameras[i] for i in pool],
                                 scene.cameras[args.view_id],
                                 model.cfg.num_source_views)
    class_map, probs, rgb = render_view(model, scene, args.view_id,
                                        [pool[i] for i in picked])
    write_pgm(f"{args.out}_sem.pgm", class_map)
    write_ppm(f"{args.out}_rgb.ppm", rgb)
    with open(f"{args.out}_prob.bin", "wb") as fh:
        fh.write(probs.astype("<f4").tobytes())
    print(f"wrote {args.out}_sem.pgm, {args.out}_rgb.ppm, {args.out}_prob.bin")
    return 0


def _cmd_eval(args):
    from .scene import load_dataset
    from .train import evaluate_scenes, load_model
    dataset = load_dataset(args.manifest)
    if args.dry_run:
        print(f"dataset ok: {len(dataset.train)} train / {len(dataset.test)} test scenes")
        return 0
    model, _header = load_model(args.ckpt)
    scenes = dataset.test if args.split == "test" else dataset.train
    report = evaluate_scenes(model, scenes)
    print(f"[{args.mode}] {report.summary()}")
    for cls, iou in enumerate(report.per_class_iou):
        print(f"  class {cls}: IoU {iou:.4f}")
    return 0


def _cmd_profile(args):
    from .cra import cost_csv, format_cost_table, full_cost_report
    report = full_cost_report(args.rays, args.samples, args.views, args.channels,
                              args.heads)
    print(format_cost_table(report))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(cost_csv(report))
        print(f"wrote {args.csv}")
    return 0


def _cmd_gradcheck(args):
    from .verification import gradient_suite
    failed = 0
    for name, report in gradient_suite(seeds=args.seeds, tol=args.tol):
        print(f"{name:<28} {report.summary()}")
        failed += 0 if report.passed else 1
    if failed:
        print(f"{failed} check(s) failed")
        return 2
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "profile": _cmd_profile,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "version":
        print(f"semray {__version__}")
        return 0
    if args.command is None:
        parser.print_help()
        return 1
    tune_allocator()
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures exit 2 with a one-line reason
        print(f"semray {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
