"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ContractViolation, InfeasibleSceneError, NonFiniteLossError

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hybridpose")


class InputError(Exception):
    """Bad flags or input files."""


def _fail(msg: str) -> InputError:
    return InputError(msg)


def _config(args):
    from .fileformats import parse_config
    from .trainer import TrainConfig

    text = ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise _fail(f"config file not found: {path}")
        text = path.read_text()
    overrides = "\n".join(args.set or [])
    cfg = parse_config(text + "\n" + overrides)
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.steps is not None:
        d["steps"] = args.steps
    return TrainConfig.from_dict(d)


# -------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .fileformats import format_config
    from .trainer import train

    cfg = _config(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise _fail(f"cannot create output directory {out}: {e}") from None
    result = train(cfg, out, progress=not args.quiet)
    (out / "config.txt").write_text(format_config(cfg))
    if result.final_eval is not None:
        e = result.final_eval
        print(f"AP@.50 {e.ap50:.3f}  visibility AUC {e.auc:.3f}  occluded removed {e.occluded_removed:.3f}  "
              f"visible removed {e.visible_removed:.3f}  alignment {e.alignment:.3f}")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'log.csv'}")
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    from .fileformats import scene_record, write_scenes
    from .synthetic import gen_scene

    recs = [scene_record(gen_scene(args.seed + i, args.persons, (args.height, args.width),
                                   args.occlusion, args.keypoints))
            for i in range(args.count)]
    write_scenes(args.out, recs, embed_image=not args.no_image)
    return EXIT_OK


def cmd_decode(args) -> int:
    from .fileformats import read_scenes, write_predictions
    from .postprocess import decode_predictions
    from .trainer import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    preds = {}
    for rec in read_scenes(args.scene):
        if tuple(rec.image_size) != cfg.image_size:
            raise _fail(f"scene {rec.id!r} is {rec.image_size}, checkpoint expects {cfg.image_size}")
        if rec.persons and rec.num_keypoints != cfg.num_keypoints:
            raise _fail(f"scene {rec.id!r} has {rec.num_keypoints} keypoints, checkpoint {cfg.num_keypoints}")
        image = rec.feature_image(cfg.num_keypoints)
        if image.shape[0] != cfg.in_channels:
            raise _fail(f"scene {rec.id!r} image has {image.shape[0]} channels, expected {cfg.in_channels}")
        outs = _scale_outputs(model, image)
        preds[rec.id] = decode_predictions(
            outs, cfg.anchors,
            cfg.conf_threshold if args.conf is None else args.conf,
            cfg.nms_iou if args.nms_iou is None else args.nms_iou,
            cfg.vis_threshold if args.vis_threshold is None else args.vis_threshold)
    write_predictions(args.out, preds)
    return EXIT_OK


def _scale_outputs(model, image):
    from . import autodiff as ad
    from .postprocess import ScaleOutput
    from .trainer import forward

    with ad.no_grad():
        outs = forward(model, image[None])
    return [ScaleOutput(s, g.data[0], v.data[0]) for s, (g, v) in zip(model.config.scales, outs)]


def cmd_eval(args) -> int:
    from .evalkit import OksConfig, evaluate
    from .fileformats import read_predictions, read_scenes

    scenes = read_scenes(args.annotations)
    preds = read_predictions(args.predictions)
    gts = {r.id: r.persons for r in scenes}
    ks = {r.num_keypoints for r in scenes if r.persons}
    if len(ks) > 1:
        raise _fail("annotations mix keypoint counts")
    k = ks.pop() if ks else 1
    cfg = OksConfig((args.kappa,) * k) if args.kappa else OksConfig.for_keypoints(k)
    report = evaluate(preds, gts, cfg)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_loss_gradchecks

    if not args.tol > 0:
        raise _fail("tolerance must be positive")
    if args.seeds < 1:
        raise _fail("need at least one seed")
    rows = run_loss_gradchecks(range(args.seed, args.seed + args.seeds), args.tol)
    print(f"{'term':<6} {'max rel. error':>14}  result")
    for r in rows:
        print(f"{r.term:<6} {r.max_rel_error:>14.3e}  {'pass' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_CHECK


def cmd_render(args) -> int:
    from .fileformats import read_predictions, read_scenes
    from .render import render_svg

    scenes = {r.id: r for r in read_scenes(args.scene)}
    preds = read_predictions(args.predictions)
    scene_id = args.image_id or next(iter(scenes))
    if scene_id not in scenes:
        raise _fail(f"unknown scene id {scene_id!r}")
    rec = scenes[scene_id]
    vis_outputs = ()
    if args.checkpoint:
        from .trainer import load_checkpoint

        model = load_checkpoint(args.checkpoint)
        vis_outputs = _scale_outputs(model, rec.feature_image(model.config.num_keypoints))
    svg = render_svg(rec.image_size, preds.get(scene_id, []), vis_outputs, args.level)
    Path(args.out).write_text(svg)
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridpose", description="Single-stage multi-person pose toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy model on synthetic scenes")
    t.add_argument("--config", help="flat key = value file mirroring the training config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gen-scene", help="write synthetic scenes as JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--persons", type=int, default=2)
    g.add_argument("--occlusion", type=float, default=0.3)
    g.add_argument("--keypoints", type=int, default=5)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--no-image", action="store_true", help="omit the embedded feature image")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    d = sub.add_parser("decode", help="run a checkpoint on scenes and write predictions")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--scene", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--conf", type=float)
    d.add_argument("--nms-iou", type=float)
    d.add_argument("--vis-threshold", type=float)
    d.add_argument("--seed", type=int, help="accepted for uniformity; decoding is deterministic")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="keypoint AP/AR of predictions against annotations")
    e.add_argument("--predictions", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--kappa", type=float, help="uniform OKS constant instead of the defaults")
    e.add_argument("--csv", help="write the metric report as CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("render", help="SVG overlay of predictions")
    r.add_argument("--scene", required=True)
    r.add_argument("--predictions", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--image-id")
    r.add_argument("--checkpoint", help="draw visibility isocontours from this model")
    r.add_argument("--level", type=float, default=0.5)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ContractViolation, InfeasibleSceneError, FileNotFoundError, IsADirectoryError,
            KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
