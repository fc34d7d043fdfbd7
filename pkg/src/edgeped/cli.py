"""Single `edgeped` executable exposing the whole stack as subcommands.

Every failure prints one machine-parseable `error: ...` line on stderr and
exits nonzero; exit status 0 means no error line was emitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import bench as bench_mod
from . import events as events_mod
from . import evaluate as eval_mod
from .camera import CameraSite, SiteValidationError, plan_camera
from .config import load_model_config
from .detect import Detection, run_detection
from .model import (
    block_param_count_exact,
    block_param_count_paper,
    build_model,
    count_flops,
    count_params,
    load_weights_file,
)
from .mqtt.broker import run_broker
from .mqtt.client import connect
from .ppm import read_ppm

# Published figures for the comparable compact detector, shown alongside our
# counts for qualitative comparison only.
PUBLISHED_REFERENCE_GFLOPS = 42.24
PUBLISHED_REFERENCE_PARAMS_M = 7.39


class CliError(Exception):
    pass


def _load_model(config_path: str, weights_path: str | None):
    try:
        config = load_model_config(config_path)
    except OSError as exc:
        raise CliError(f"cannot read model config: {exc}") from exc
    except ValueError as exc:
        raise CliError(f"invalid model config: {exc}") from exc
    model = build_model(config)
    if weights_path is not None:
        try:
            model = load_weights_file(model, weights_path)
        except OSError as exc:
            raise CliError(f"cannot read weights: {exc}") from exc
        except ValueError as exc:
            raise CliError(f"invalid weights: {exc}") from exc
    return model


def _detection_to_dict(det: Detection) -> dict:
    return {
        "class_id": det.class_id,
        "confidence": det.confidence,
        "x1": det.bbox.x1,
        "y1": det.bbox.y1,
        "x2": det.bbox.x2,
        "y2": det.bbox.y2,
    }


def cmd_detect(args) -> int:
    model = _load_model(args.model, args.weights)
    try:
        names = sorted(n for n in os.listdir(args.input) if n.lower().endswith(".ppm"))
    except OSError as exc:
        raise CliError(f"cannot list input directory: {exc}") from exc
    results: dict[str, list[dict]] = {}
    for name in names:
        image = read_ppm(os.path.join(args.input, name))
        frame = bench_mod.preprocess(image, model.config.input_size)
        dets = run_detection(model, frame, args.conf, args.iou)
        results[name] = [_detection_to_dict(d) for d in dets]
    payload = json.dumps(results, indent=2, sort_keys=True) + "\n"
    if args.out == "-":
        sys.stdout.write(payload)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    return 0


def cmd_bench(args) -> int:
    model = _load_model(args.model, args.weights)
    if args.frames.isdigit():
        source = bench_mod.FrameSource.synthetic(
            int(args.frames), width=args.native_width, height=args.native_height,
            seed=args.seed,
        )
    else:
        source = bench_mod.FrameSource.from_directory(args.frames)
    publisher = None
    if args.publish:
        publisher = connect(args.publish, client_id=f"edgeped-bench-{os.getpid()}")
    options = bench_mod.PipelineOptions(
        conf_threshold=args.conf,
        iou_threshold=args.iou,
        intersection_id=args.intersection,
        pipelined=args.pipelined,
    )
    try:
        report = bench_mod.run_pipeline(source, model, publisher, options)
    finally:
        if publisher is not None:
            publisher.disconnect()
    sys.stdout.buffer.write(bench_mod.emit_report(report, args.report))
    return 1 if report.errors else 0


def cmd_broker(args) -> int:
    broker = run_broker(args.bind)
    print(f"broker listening on {broker.address}", flush=True)
    try:
        while True:
            import time

            time.sleep(3600)
    except KeyboardInterrupt:
        return 0
    finally:
        broker.stop()


def cmd_listen(args) -> int:
    session = connect(args.broker, client_id=f"edgeped-listen-{os.getpid()}")
    session.subscribe(args.topic)
    print(f"subscribed to {args.topic}", flush=True)
    try:
        while True:
            message = session.poll_message(timeout=1.0)
            if message is None:
                continue
            topic, payload = message
            try:
                event = events_mod.decode_event(payload)
            except events_mod.EventDecodeError as exc:
                print(f"{topic}  <undecodable: {exc}>", flush=True)
                continue
            boxes = " ".join(
                f"{b.class_id}:{b.confidence:.3f}@[{b.x1},{b.y1},{b.x2},{b.y2}]"
                for b in event.detections
            )
            print(
                f"{topic}  frame={event.frame_index} ts={event.timestamp_ms} "
                f"n={len(event.detections)} {boxes}",
                flush=True,
            )
    except KeyboardInterrupt:
        return 0
    finally:
        session.disconnect()


def cmd_params(args) -> int:
    model = _load_model(args.model, None)
    cfg = model.config
    print(f"model: {cfg.name}")
    print("blocks (exact = enumerated weight floats, closed-form shown for comparison):")
    print(f"  {'#':>3} {'in':>5} {'out':>5} {'t':>2} {'s':>2} {'exact':>10} {'closed-form':>12}")
    for i, blk in enumerate(cfg.blocks):
        print(
            f"  {i:>3} {blk.c_in:>5} {blk.c_out:>5} {blk.expansion:>2} {blk.stride:>2} "
            f"{block_param_count_exact(blk):>10} {block_param_count_paper(blk):>12}"
        )
    total = count_params(model)
    weights_only = count_params(model, include_bias=False)
    print(f"total parameters (weights only): {weights_only}")
    print(f"total parameters (with biases):  {total} ({total / 1e6:.2f} M)")
    print(
        f"published reference model:       {PUBLISHED_REFERENCE_PARAMS_M:.2f} M "
        f"(qualitative comparison)"
    )
    return 0


def cmd_flops(args) -> int:
    model = _load_model(args.model, None)
    flops = count_flops(model, args.input_size)
    print(f"model: {model.config.name}")
    print(f"input size: {args.input_size}")
    print(f"flops: {flops} ({flops / 1e9:.2f} GFLOPs)")
    print(
        f"published reference model: {PUBLISHED_REFERENCE_GFLOPS:.2f} GFLOPs "
        f"(qualitative comparison)"
    )
    return 0


def cmd_eval(args) -> int:
    try:
        with open(args.detections, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read detections: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"detections file is not JSON: {exc}") from exc
    from .detect import BBox

    dets = {
        image_id: [
            Detection(
                bbox=BBox.from_corners(d["x1"], d["y1"], d["x2"], d["y2"]),
                class_id=int(d["class_id"]),
                confidence=float(d["confidence"]),
            )
            for d in entries
        ]
        for image_id, entries in raw.items()
    }
    try:
        gts = eval_mod.load_ground_truth(args.ground_truth)
    except OSError as exc:
        raise CliError(f"cannot read ground truth: {exc}") from exc
    try:
        report = eval_mod.evaluate(dets, gts, args.iou)
    except eval_mod.EvalInputError as exc:
        raise CliError(str(exc)) from exc
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_plan_camera(args) -> int:
    try:
        site = CameraSite(
            pole_height=args.height,
            pole_arm_width=args.width,
            crossing_length=args.crossing_length,
            far_lane_offset=args.far_offset,
        )
    except SiteValidationError as exc:
        raise CliError(str(exc)) from exc
    near, far = plan_camera(site)
    print(f"near distance: {near:.2f} m")
    print(f"far distance:  {far:.2f} m")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeped",
        description="Edge pedestrian detection: inference, events, MQTT, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run detection over a directory of PPM frames")
    p.add_argument("--model", required=True, help="model config file")
    p.add_argument("--weights", help="EPW1 weight file (zero weights if omitted)")
    p.add_argument("--input", required=True, help="directory of .ppm frames")
    p.add_argument("--conf", type=float, default=0.3, help="confidence threshold")
    p.add_argument("--iou", type=float, default=0.5, help="NMS IoU threshold")
    p.add_argument("--out", default="detections.json", help="output JSON ('-' for stdout)")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("bench", help="run the timed end-to-end pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--weights")
    p.add_argument("--frames", required=True, help="frame count (synthetic) or directory")
    p.add_argument("--publish", help="broker HOST:PORT to publish events to")
    p.add_argument("--pipelined", action="store_true", help="run stages concurrently")
    p.add_argument("--report", choices=("json", "table"), default="table")
    p.add_argument("--conf", type=float, default=0.3)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0, help="synthetic frame seed")
    p.add_argument("--native-width", type=int, default=1280)
    p.add_argument("--native-height", type=int, default=720)
    p.add_argument("--intersection", default="0", help="intersection id for event topics")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("broker", help="run the MQTT broker until interrupted")
    p.add_argument("--bind", default="127.0.0.1:1883", help="HOST:PORT to listen on")
    p.set_defaults(fn=cmd_broker)

    p = sub.add_parser("listen", help="print decoded detection events from a broker")
    p.add_argument("--broker", required=True, help="broker HOST:PORT")
    p.add_argument("--topic", default="intersection/+/detections", help="topic filter")
    p.set_defaults(fn=cmd_listen)

    p = sub.add_parser("params", help="parameter counts per block and total")
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("flops", help="FLOP count at a given input size")
    p.add_argument("--model", required=True)
    p.add_argument("--input-size", type=int, default=416)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True, help="detect output JSON")
    p.add_argument("--ground-truth", required=True, help="ground truth JSON")
    p.add_argument("--iou", type=float, default=0.5, help="matching IoU threshold")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plan-camera", help="near/far camera distances for a site")
    p.add_argument("--height", type=float, required=True, help="pole height (m)")
    p.add_argument("--width", type=float, required=True, help="pole arm width (m)")
    p.add_argument("--far-offset", type=float, required=True, help="camera to far lane (m)")
    p.add_argument("--crossing-length", type=float, default=9.2, help="crossing length (m)")
    p.set_defaults(fn=cmd_plan_camera)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
