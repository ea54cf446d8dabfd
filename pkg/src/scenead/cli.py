"""``scenead`` command line: fixture -> augment -> train/grid -> eval -> erf -> report.

Every command writes a JSON manifest holding its resolved arguments (including the
argv needed to rerun it); ``scenead replay MANIFEST`` reruns a command from it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import VARIANTS, load_dataset, read_manifest, write_json

log = logging.getLogger("scenead")

SEED_ENV = "SCENEAD_SEED"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class InvariantError(RuntimeError):
    """A post-condition check on a command's output failed."""


def resolve_seed(flag: int | None, default: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else default


def _manifest_path(out: Path) -> Path:
    out = Path(out)
    return out / "command_manifest.json" if out.suffix == "" else out.with_name(out.stem + ".manifest.json")


def write_command_manifest(out: Path, command: str, argv: list[str], resolved: dict, outputs: dict) -> Path:
    path = _manifest_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, {
        "command": command,
        "version": __version__,
        "argv": argv,
        "resolved": resolved,
        "outputs": outputs,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    return path


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise InvariantError(msg)


def _seed_argv(argv: list[str], seed: int) -> list[str]:
    # pin the seed so a replay does not depend on the environment
    return argv if "--seed" in argv else argv + ["--seed", str(seed)]


# subcommands ------------------------------------------------------------------

def cmd_fixture(args, argv) -> dict:
    from .fixture import make_fixture

    seed = resolve_seed(args.seed, 7)
    anomaly_spec = json.loads(Path(args.anomaly_spec).read_text()) if args.anomaly_spec else None
    stats = make_fixture(Path(args.out), seed, args.n_train, args.n_query, anomaly_spec, args.image_size)
    ds = load_dataset(Path(args.out), "none")  # round trip through the loader's validation
    _check(len(ds.train_images) == args.n_train and len(ds.test_images) == args.n_query,
           "fixture counts do not match the request")
    resolved = {"seed": seed, "n_train": args.n_train, "n_query": args.n_query, "image_size": args.image_size,
                "anomaly_spec": anomaly_spec}
    write_command_manifest(Path(args.out), "fixture", _seed_argv(argv, seed), resolved, stats)
    return stats


def _renderer(args, root: Path):
    from .render import ExternalRenderer
    from .synthesis import renderer_from_manifest

    if args.renderer == "external":
        if not args.renderer_cmd:
            raise SystemExit("--renderer external needs --renderer-cmd")
        return ExternalRenderer(args.renderer_cmd)
    return renderer_from_manifest(root)


def _localizer(args, ds, seed: int):
    from .render import ExternalLocalizer, GroundTruthLocalizer, NoisyLocalizer, scene_from_dict

    if args.localizer == "external":
        if not args.localizer_poses:
            raise SystemExit("--localizer external needs --localizer-poses")
        return ExternalLocalizer(Path(args.localizer_poses), ds.intrinsics)
    if ds.poses is None:
        raise SystemExit(f"{ds.root_path} has no poses.json")
    if args.localizer == "noisy":
        diameter = scene_from_dict(ds.manifest["scene"]).diameter if "scene" in ds.manifest else 10.0
        return NoisyLocalizer(ds.poses, diameter, seed=seed)
    return GroundTruthLocalizer(ds.poses)


def cmd_augment(args, argv) -> dict:
    from .synthesis import build_inv_augmentation, build_qanv_augmentation

    root = Path(args.dataset)
    seed = resolve_seed(args.seed, 0)
    ds = load_dataset(root, "none")
    renderer = _renderer(args, root)
    out = {}
    if args.variant in ("inv", "both"):
        imgs, _ = build_inv_augmentation(ds, renderer, args.k, args.start)
        n_pairs = len(ds.captured_train) - 1
        _check(len(imgs) == args.k * max(n_pairs, 0), "INV render count != k * (n - 1)")
        out["inv"] = len(imgs)
    if args.variant in ("qanv", "both"):
        imgs, _ = build_qanv_augmentation(ds, renderer, _localizer(args, ds, seed))
        out["qanv"] = len(imgs)
    load_dataset(root, args.variant)  # the new folders must validate
    resolved = {"variant": args.variant, "k": args.k, "start": args.start, "renderer": args.renderer,
                "localizer": args.localizer, "seed": seed}
    write_command_manifest(root / f"augment_{args.variant}", "augment", _seed_argv(argv, seed), resolved, out)
    return out


def cmd_poses(args, argv) -> dict:
    from .poses import build_greedy_trajectory, densify_trajectory, save_poses

    ds = load_dataset(Path(args.dataset), "none")
    refs = ds.captured_train
    if ds.poses is None:
        raise SystemExit("dataset has no poses.json")
    poses = [ds.poses[r] for r in refs]
    tour = build_greedy_trajectory(poses, args.start)
    dense = densify_trajectory(poses, tour, args.k)
    _check(len(dense) == args.k * (len(poses) - 1), "densified pose count != k * (n - 1)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_poses(out, {f"inv_{i // args.k:04d}_{i % args.k:02d}": p for i, p in enumerate(dense)})
    result = {"n_poses": len(dense), "trajectory": [refs[i] for i in tour]}
    write_command_manifest(out, "poses densify", argv, {"k": args.k, "start": args.start}, result)
    return result


def _train_config_from_file(path: Path) -> dict:
    d = json.loads(Path(path).read_text())
    return d.get("resolved_config", d)  # accept a run manifest as well as a config


def cmd_train(args, argv) -> dict:
    from .model import ModelConfig
    from .training import TrainConfig, train

    resolved = _train_config_from_file(Path(args.config))
    if args.dataset:
        resolved["dataset"] = args.dataset
    if args.seed is not None or os.environ.get(SEED_ENV):
        resolved["train"]["seed"] = resolve_seed(args.seed, resolved["train"].get("seed", 0))
    if args.epochs is not None:
        resolved["train"]["max_epochs"] = args.epochs
    mc = ModelConfig.from_dict(resolved["model"])
    tc = TrainConfig(**resolved["train"])
    out = Path(args.out) if args.out else Path(args.config).with_suffix("").parent / "run"
    man = train(mc, tc, resolved["dataset"], out, progress=True)
    _check(not set(man.val_refs) & set(man.test_refs), "validation refs leaked into the test set")
    _check(man.best_epoch == int(np.argmax(man.val_f1)), "best epoch is not the first argmax of val F1")
    rep = man.test_report or {}
    result = {"run_manifest": str(out / "run_manifest.json"), "best_epoch": man.best_epoch,
              "pixel_f1": rep.get("pixel_f1"), "pixel_auroc": rep.get("pixel_auroc")}
    argv = argv if "--out" in argv else argv + ["--out", str(out)]
    write_command_manifest(out, "train", _seed_argv(argv, tc.seed), resolved, result)
    return result


def cmd_grid(args, argv) -> dict:
    from .training import METHODS, ablation_grid

    seed = resolve_seed(args.seed, 0)
    out = Path(args.out)
    model_overrides = {"input_size": [args.input_size, args.input_size]} if args.input_size else {}
    train_overrides = {"seed": seed}
    if args.epochs is not None:
        train_overrides["max_epochs"] = args.epochs
    methods = args.methods or list(METHODS)
    variants = args.variants or list(VARIANTS)
    runs = out.with_suffix("").parent / (out.stem + "_runs")
    report = ablation_grid(Path(args.dataset), runs, args.scale, model_overrides, train_overrides,
                           methods, variants, report_path=out)
    n_cells = sum(len(r) for r in report["cells"].values())
    _check(n_cells == len(methods) * len(variants), "grid is missing cells")
    resolved = {"dataset": args.dataset, "scale": args.scale, "seed": seed, "epochs": args.epochs,
                "input_size": args.input_size, "methods": methods, "variants": variants}
    write_command_manifest(out, "grid", _seed_argv(argv, seed), resolved, {"report": str(out)})
    return {"report": str(out), "errors": sum("error" in c for r in report["cells"].values() for c in r.values())}


def _dump_maps(out_dir: Path, refs, maps, threshold: float) -> None:
    from PIL import Image

    from .erf import heatmap_rgb

    out_dir.mkdir(parents=True, exist_ok=True)
    for ref, m in zip(refs, maps):
        stem = Path(ref).stem
        Image.fromarray(heatmap_rgb(m - m.min(), gamma=1.0)).save(out_dir / f"{stem}_heatmap.png")
        Image.fromarray(((m >= threshold) * 255).astype(np.uint8)).save(out_dir / f"{stem}_segmentation.png")


def cmd_eval(args, argv) -> dict:
    from .metrics import imbalance_demo
    from .model import load_checkpoint
    from .training import evaluate_model

    model, payload = load_checkpoint(Path(args.checkpoint))
    ds = load_dataset(Path(args.dataset), "none")
    val_refs = set(payload.get("extra", {}).get("val_refs", []))
    refs = [r for r in ds.test_images if args.include_val or r not in val_refs]
    report, maps = evaluate_model(model, ds, refs, args.batch_size)
    _check(args.include_val or not set(report.image_refs) & val_refs, "validation refs in eval set")
    _check(report.tp + report.fp + report.fn + report.tn == sum(m.size for m in maps), "confusion counts")
    out = report.to_dict()
    out["imbalance"] = imbalance_demo(report)
    out["excluded_val_refs"] = sorted(val_refs) if not args.include_val else []
    out["checkpoint"] = str(args.checkpoint)
    write_json(Path(args.out), out)
    if args.dump_maps:
        _dump_maps(Path(args.dump_maps), refs, maps, report.optimal_threshold)
    write_command_manifest(Path(args.out), "eval", argv, vars_clean(args), {"report": str(args.out)})
    return {"pixel_f1": report.pixel_f1, "pixel_auroc": report.pixel_auroc}


def cmd_erf(args, argv) -> dict:
    import torch

    from .data import ImageTensor
    from .erf import compare_erf, compute_erf, random_locations, save_erf_heatmap
    from .model import OmniAD, load_checkpoint

    seed = resolve_seed(args.seed, 0)
    model, _ = load_checkpoint(Path(args.checkpoint))
    model = model.double()
    h, w = model.config.input_size
    images = [ImageTensor(np.full((3, h, w), 0.5, dtype=np.float32), ref="mid-gray")]
    if args.dataset:
        ds = load_dataset(Path(args.dataset), "none")
        for ref in ds.test_images[:args.images]:
            im = ds.load(ref)
            if im.data.shape[-2:] != (h, w):
                t = torch.nn.functional.interpolate(torch.from_numpy(im.data)[None], size=(h, w),
                                                    mode="bilinear", align_corners=False)[0]
                im = ImageTensor(t.numpy(), ref=ref)
            images.append(im)
    rng = np.random.default_rng(seed)
    heat_dir = Path(args.heatmaps) if args.heatmaps else Path(args.out).with_suffix("").parent / "erf_heatmaps"
    if isinstance(model, OmniAD) and args.gates is not None:
        model.set_gates(args.gates)
    levels = {}
    for level, stride in enumerate((4, 8, 16)):
        grid = (h // stride, w // stride)
        locs = random_locations(grid, args.locations, rng)
        if isinstance(model, OmniAD):
            res = compare_erf(model, model.without_attention(), images, locs, level, args.tau)
        else:
            areas = [compute_erf(model, im, loc, level, args.tau).area for im in images for loc in locs]
            res = {"level": level, "tau": args.tau, "area": float(np.mean(areas)), "areas": areas}
        levels[f"level{level}"] = res
        centre = (grid[0] // 2, grid[1] // 2)
        save_erf_heatmap(heat_dir / f"erf_level{level}.png", compute_erf(model, images[0], centre, level, args.tau))
        if isinstance(model, OmniAD):
            save_erf_heatmap(heat_dir / f"erf_level{level}_no_attention.png",
                             compute_erf(model.without_attention(), images[0], centre, level, args.tau))
    out = {"checkpoint": str(args.checkpoint), "tau": args.tau, "n_images": len(images),
           "locations_per_level": args.locations, "levels": levels, "heatmaps": str(heat_dir)}
    write_json(Path(args.out), out)
    write_command_manifest(Path(args.out), "erf", _seed_argv(argv, seed), vars_clean(args), {"report": args.out})
    return {k: {kk: v[kk] for kk in ("area_with", "area_without", "ratio", "area") if kk in v}
            for k, v in levels.items()}


def cmd_report(args, argv) -> dict:
    from .report import build_report, render_markdown

    reports = [json.loads(Path(p).read_text()) for p in args.grid]
    rep = build_report(reports, args.names)
    text = render_markdown(rep)
    print(text)
    out = Path(args.out)
    write_json(out, rep)
    out.with_suffix(".md").write_text(text)
    write_command_manifest(out, "report", argv, vars_clean(args), {"report": str(out)})
    return {"tables": str(out.with_suffix(".md"))}


def cmd_replay(args, argv) -> dict:
    man = json.loads(Path(args.manifest).read_text())
    if "argv" not in man:
        raise SystemExit(f"{args.manifest} does not record an argv")
    code = main(man["argv"])
    if code != EXIT_OK:
        raise InvariantError(f"replayed command exited with {code}")
    return {"replayed": man["command"]}


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenead", description="Multi-object scene anomaly detection toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fixture", help="render the synthetic scene dataset")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--n-train", type=int, default=64)
    f.add_argument("--n-query", type=int, default=32)
    f.add_argument("--image-size", type=int, default=128)
    f.add_argument("--anomaly-spec", help="JSON list of {kind, params} anomalies")
    f.set_defaults(func=cmd_fixture)

    a = sub.add_parser("augment", help="render INV and/or QANV training views")
    a.add_argument("--dataset", required=True)
    a.add_argument("--variant", choices=("inv", "qanv", "both"), required=True)
    a.add_argument("--k", type=int, default=12)
    a.add_argument("--start", type=int, default=0)
    a.add_argument("--renderer", choices=("procedural", "external"), default="procedural")
    a.add_argument("--renderer-cmd", help="external renderer command; called as CMD REQUEST_DIR")
    a.add_argument("--localizer", choices=("gt", "noisy", "external"), default="gt")
    a.add_argument("--localizer-poses", help="poses.json written by an external localizer")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_augment)

    po = sub.add_parser("poses", help="pose utilities")
    psub = po.add_subparsers(dest="poses_command", required=True)
    d = psub.add_parser("densify", help="greedy tour + slerp densification of the training poses")
    d.add_argument("--dataset", required=True)
    d.add_argument("--k", type=int, default=12)
    d.add_argument("--start", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_poses)

    t = sub.add_parser("train", help="train one model from a JSON run config or run manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--dataset")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("grid", help="train the method x augmentation ablation grid")
    g.add_argument("--dataset", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--scale", choices=("tiny", "full"), default="tiny")
    g.add_argument("--epochs", type=int)
    g.add_argument("--input-size", type=int)
    g.add_argument("--methods", nargs="+")
    g.add_argument("--variants", nargs="+", choices=VARIANTS)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_grid)

    e = sub.add_parser("eval", help="pixel F1/AUROC of a checkpoint on a dataset's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--include-val", action="store_true", help="also score the validation queries")
    e.add_argument("--dump-maps", help="directory for heatmap / segmentation PNGs")
    e.add_argument("--batch-size", type=int, default=16)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("erf", help="effective receptive fields of a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--locations", type=int, default=16)
    r.add_argument("--tau", type=float, default=0.025)
    r.add_argument("--out", required=True)
    r.add_argument("--dataset", help="add query images to the mid-gray probe")
    r.add_argument("--images", type=int, default=4)
    r.add_argument("--gates", type=float, help="overwrite every attention gate with this value")
    r.add_argument("--heatmaps")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_erf)

    rp = sub.add_parser("report", help="render ablation tables from grid reports")
    rp.add_argument("--grid", nargs="+", required=True)
    rp.add_argument("--names", nargs="+")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    rr = sub.add_parser("replay", help="rerun a command from its manifest")
    rr.add_argument("manifest")
    rr.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args, argv)
    except InvariantError as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_FAIL
    except SystemExit as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_FAIL
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
