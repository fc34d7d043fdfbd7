"""End-to-end pipeline harness with per-stage timing, FPS, and latency.

Every frame traverses preprocess -> inference -> postprocess -> encode ->
publish, each stage timed with a monotonic clock. Serial mode (default)
finishes one frame before starting the next, so fps x mean latency is
interpretable; pipelined mode runs the stages concurrently connected by
bounded in-order queues (depth 2) with back-pressure.

Latency is measured from preprocess start to completion of the last stage
that ran (publish when a publisher is attached). Seeded synthetic runs are
bit-deterministic in everything except the timings, including event
timestamps, which default to a synthetic 30 fps clock.
"""

from __future__ import annotations

import json
import queue
import resource
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .detect import Detection, decode_head, nms
from .events import DEFAULT_PAYLOAD_BUDGET, detection_topic, encode_event, events_from_detections
from .model import Model, count_flops, count_params, forward
from .mqtt.client import Session
from .ppm import read_ppm
from .tensor import Tensor

STAGES = ("preprocess", "inference", "postprocess", "encode", "publish")
SYNTHETIC_FRAME_PERIOD_MS = 33  # 30 fps source clock


class FrameSourceError(ValueError):
    pass


@dataclass(frozen=True)
class FrameSource:
    """Ordered frame supply: a directory of PPM images or a seeded generator."""

    mode: str  # "directory" | "synthetic"
    count: int
    width: int
    height: int
    paths: tuple[str, ...] = ()
    seed: int = 0

    @classmethod
    def from_directory(cls, path: str) -> "FrameSource":
        import os

        try:
            names = sorted(n for n in os.listdir(path) if n.lower().endswith(".ppm"))
        except OSError as exc:
            raise FrameSourceError(f"cannot list {path}: {exc}") from exc
        if not names:
            raise FrameSourceError(f"no .ppm frames in {path}")
        paths = tuple(os.path.join(path, n) for n in names)
        first = read_ppm(paths[0])
        return cls(
            mode="directory",
            count=len(paths),
            width=first.shape[1],
            height=first.shape[0],
            paths=paths,
        )

    @classmethod
    def synthetic(
        cls, count: int, width: int = 1280, height: int = 720, seed: int = 0
    ) -> "FrameSource":
        if count < 0:
            raise FrameSourceError(f"frame count must be >= 0, got {count}")
        return cls(mode="synthetic", count=count, width=width, height=height, seed=seed)

    def frames(self) -> Iterator[tuple[int, np.ndarray]]:
        if self.mode == "directory":
            for i, path in enumerate(self.paths):
                yield i, read_ppm(path)
        else:
            for i in range(self.count):
                rng = np.random.default_rng([self.seed, i])
                yield i, rng.integers(0, 256, (self.height, self.width, 3), dtype=np.uint8)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resample to (out_h, out_w); float32 result."""
    src = np.asarray(image, dtype=np.float64)
    src_h, src_w = src.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (src_h / out_h) - 0.5, 0, src_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (src_w / out_w) - 0.5, 0, src_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = (ys - y0).reshape(-1, 1, 1)
    fx = (xs - x0).reshape(1, -1, 1)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(np.float32)


def preprocess(image: np.ndarray, input_size: int) -> Tensor:
    """Resize to input_size x input_size, keep RGB order, scale to [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise FrameSourceError(f"frame must be (h, w, 3), got shape {image.shape}")
    resized = bilinear_resize(image, input_size, input_size) / np.float32(255.0)
    chw = np.ascontiguousarray(resized.transpose(2, 0, 1), dtype=np.float32)
    return Tensor(chw.reshape(1, 3, input_size, input_size))


@dataclass(frozen=True)
class StageStats:
    mean: float
    median: float
    p95: float

    @classmethod
    def from_samples(cls, samples: list[float]) -> "StageStats | None":
        if not samples:
            return None
        arr = np.asarray(samples, dtype=np.float64)
        return cls(
            mean=float(arr.mean()),
            median=float(np.median(arr)),
            p95=float(np.percentile(arr, 95)),
        )

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "p95": self.p95}


@dataclass
class MetricsReport:
    frames: int
    errors: int
    detections: int
    fps: float | None
    end_to_end_latency_ms: StageStats | None
    stage_ms: dict[str, StageStats | None]
    publish_enabled: bool
    published_events: int
    payload_bytes_mean: float
    payload_bytes_total: int
    peak_rss_mb: float
    pipelined: bool
    input_size: int
    model_params: int
    model_gflops: float
    map: float | None = None

    def to_dict(self) -> dict:
        out = {
            "frames": self.frames,
            "errors": self.errors,
            "detections": self.detections,
            "end_to_end_latency_ms": (
                self.end_to_end_latency_ms.to_dict() if self.end_to_end_latency_ms else None
            ),
            "stage_ms": {
                name: (stats.to_dict() if stats else None)
                for name, stats in self.stage_ms.items()
            },
            "publish_enabled": self.publish_enabled,
            "published_events": self.published_events,
            "payload_bytes": {
                "mean": self.payload_bytes_mean,
                "total": self.payload_bytes_total,
            },
            "peak_rss_mb": self.peak_rss_mb,
            "pipelined": self.pipelined,
            "input_size": self.input_size,
            "model_params": self.model_params,
            "model_gflops": self.model_gflops,
        }
        if self.fps is not None:
            out["fps"] = self.fps
        if self.map is not None:
            out["map"] = self.map
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        def stats(entry) -> StageStats | None:
            return StageStats(**entry) if entry else None

        return cls(
            frames=data["frames"],
            errors=data["errors"],
            detections=data["detections"],
            fps=data.get("fps"),
            end_to_end_latency_ms=stats(data["end_to_end_latency_ms"]),
            stage_ms={name: stats(entry) for name, entry in data["stage_ms"].items()},
            publish_enabled=data["publish_enabled"],
            published_events=data["published_events"],
            payload_bytes_mean=data["payload_bytes"]["mean"],
            payload_bytes_total=data["payload_bytes"]["total"],
            peak_rss_mb=data["peak_rss_mb"],
            pipelined=data["pipelined"],
            input_size=data["input_size"],
            model_params=data["model_params"],
            model_gflops=data["model_gflops"],
            map=data.get("map"),
        )


@dataclass(frozen=True)
class PipelineOptions:
    conf_threshold: float = 0.3
    iou_threshold: float = 0.5
    intersection_id: str = "0"
    camera_id: str = "cam0"
    model_id: str = ""
    budget: int = DEFAULT_PAYLOAD_BUDGET
    pipelined: bool = False
    queue_depth: int = 2
    # Deterministic per-frame timestamps (base + i * period); set to False to
    # stamp events with wall-clock time instead.
    deterministic_timestamps: bool = True
    timestamp_base_ms: int = 0


@dataclass
class _WorkItem:
    index: int
    image: np.ndarray | None
    tensor: Tensor | None = None
    raw: tuple[Tensor, Tensor] | None = None
    detections: list[Detection] = field(default_factory=list)
    payloads: list[bytes] = field(default_factory=list)
    started: float = 0.0
    finished: float = 0.0
    error: Exception | None = None


class _Pipeline:
    def __init__(self, model: Model, publisher: Session | None, options: PipelineOptions):
        self.model = model
        self.publisher = publisher
        self.options = options
        self.topic = detection_topic(options.intersection_id)
        self.timings: dict[str, list[float]] = {name: [] for name in STAGES}
        self.latencies: list[float] = []
        self.payload_sizes: list[int] = []
        self.detection_count = 0
        self.published_events = 0
        self.errors = 0
        self.completed = 0
        self.lock = threading.Lock()

    def stage_names(self) -> list[str]:
        names = ["preprocess", "inference", "postprocess", "encode"]
        if self.publisher is not None:
            names.append("publish")
        return names

    # -- stage bodies ---------------------------------------------------------

    def _preprocess(self, item: _WorkItem) -> None:
        item.tensor = preprocess(item.image, self.model.config.input_size)
        item.image = None

    def _inference(self, item: _WorkItem) -> None:
        item.raw = forward(self.model, item.tensor)
        item.tensor = None

    def _postprocess(self, item: _WorkItem) -> None:
        cfg = self.model.config
        raw32, raw16 = item.raw
        dets = decode_head(raw32, cfg.head32, cfg.input_size, self.options.conf_threshold)
        dets += decode_head(raw16, cfg.head16, cfg.input_size, self.options.conf_threshold)
        item.detections = nms(dets, self.options.iou_threshold)
        item.raw = None

    def _encode(self, item: _WorkItem) -> None:
        opts = self.options
        if opts.deterministic_timestamps:
            timestamp = opts.timestamp_base_ms + item.index * SYNTHETIC_FRAME_PERIOD_MS
        else:
            timestamp = int(time.time() * 1000)
        size = self.model.config.input_size
        events = events_from_detections(
            item.detections,
            frame_w=size,
            frame_h=size,
            intersection_id=opts.intersection_id,
            camera_id=opts.camera_id,
            frame_index=item.index,
            timestamp_ms=timestamp,
            model_id=opts.model_id,
            budget=opts.budget,
        )
        item.payloads = [encode_event(e, budget=opts.budget) for e in events]

    def _publish(self, item: _WorkItem) -> None:
        for payload in item.payloads:
            self.publisher.publish_qos0(self.topic, payload)

    def stage_fn(self, name: str):
        return {
            "preprocess": self._preprocess,
            "inference": self._inference,
            "postprocess": self._postprocess,
            "encode": self._encode,
            "publish": self._publish,
        }[name]

    # -- bookkeeping ----------------------------------------------------------

    def run_stage(self, name: str, item: _WorkItem) -> None:
        if item.error is not None:
            return
        if name == "preprocess":
            item.started = time.perf_counter()
        t0 = time.perf_counter()
        try:
            self.stage_fn(name)(item)
        except Exception as exc:
            item.error = exc
            return
        t1 = time.perf_counter()
        with self.lock:
            self.timings[name].append((t1 - t0) * 1000.0)
        item.finished = t1

    def finish_item(self, item: _WorkItem) -> None:
        with self.lock:
            if item.error is not None:
                self.errors += 1
                return
            self.completed += 1
            self.latencies.append((item.finished - item.started) * 1000.0)
            self.detection_count += len(item.detections)
            self.payload_sizes.extend(len(p) for p in item.payloads)
            if self.publisher is not None:
                self.published_events += len(item.payloads)


def _peak_rss_mb() -> float:
    # ru_maxrss is KiB on Linux.
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_pipeline(
    source: FrameSource,
    model: Model,
    publisher: Session | None = None,
    options: PipelineOptions = PipelineOptions(),
) -> MetricsReport:
    """Drive every frame through the stages and aggregate a MetricsReport."""
    pipe = _Pipeline(model, publisher, options)
    stage_names = pipe.stage_names()
    wall_start = time.perf_counter()

    if not options.pipelined:
        for index, image in source.frames():
            item = _WorkItem(index, image)
            for name in stage_names:
                pipe.run_stage(name, item)
            pipe.finish_item(item)
    else:
        depth = max(1, options.queue_depth)
        queues = [queue.Queue(maxsize=depth) for _ in range(len(stage_names) + 1)]

        def worker(stage_index: int) -> None:
            name = stage_names[stage_index]
            while True:
                item = queues[stage_index].get()
                if item is None:
                    queues[stage_index + 1].put(None)
                    return
                pipe.run_stage(name, item)
                queues[stage_index + 1].put(item)

        threads = [
            threading.Thread(target=worker, args=(i,), name=f"bench-{stage_names[i]}")
            for i in range(len(stage_names))
        ]
        collector_done = threading.Event()

        def collector() -> None:
            while True:
                item = queues[-1].get()
                if item is None:
                    collector_done.set()
                    return
                pipe.finish_item(item)

        collect_thread = threading.Thread(target=collector, name="bench-collect")
        for t in threads:
            t.start()
        collect_thread.start()
        for index, image in source.frames():
            queues[0].put(_WorkItem(index, image))
        queues[0].put(None)
        for t in threads:
            t.join()
        collect_thread.join()

    wall_seconds = time.perf_counter() - wall_start

    stage_ms: dict[str, StageStats | None] = {
        name: StageStats.from_samples(pipe.timings[name]) for name in STAGES
    }
    if publisher is None:
        stage_ms["publish"] = None

    fps = pipe.completed / wall_seconds if pipe.completed and wall_seconds > 0 else None
    return MetricsReport(
        frames=pipe.completed,
        errors=pipe.errors,
        detections=pipe.detection_count,
        fps=fps,
        end_to_end_latency_ms=StageStats.from_samples(pipe.latencies),
        stage_ms=stage_ms,
        publish_enabled=publisher is not None,
        published_events=pipe.published_events,
        payload_bytes_mean=(
            float(np.mean(pipe.payload_sizes)) if pipe.payload_sizes else 0.0
        ),
        payload_bytes_total=int(np.sum(pipe.payload_sizes)) if pipe.payload_sizes else 0,
        peak_rss_mb=_peak_rss_mb(),
        pipelined=options.pipelined,
        input_size=model.config.input_size,
        model_params=count_params(model),
        model_gflops=count_flops(model) / 1e9,
    )


def emit_report(report: MetricsReport, format: str = "json") -> bytes:
    """Render a report as schema-stable JSON or a fixed-column text table."""
    if format == "json":
        return (json.dumps(report.to_dict(), indent=2, sort_keys=False) + "\n").encode()
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")

    rows: list[tuple[str, str]] = [
        ("frames", str(report.frames)),
        ("errors", str(report.errors)),
        ("detections", str(report.detections)),
        ("fps", f"{report.fps:.3f}" if report.fps is not None else "-"),
    ]
    if report.end_to_end_latency_ms:
        s = report.end_to_end_latency_ms
        rows.append(
            ("latency_ms (mean/median/p95)", f"{s.mean:.2f} / {s.median:.2f} / {s.p95:.2f}")
        )
    for name in STAGES:
        stats = report.stage_ms.get(name)
        if stats is None:
            rows.append((f"{name}_ms", "absent"))
        else:
            rows.append(
                (f"{name}_ms (mean/median/p95)",
                 f"{stats.mean:.2f} / {stats.median:.2f} / {stats.p95:.2f}")
            )
    rows += [
        ("published_events", str(report.published_events)),
        ("payload_bytes_mean", f"{report.payload_bytes_mean:.1f}"),
        ("payload_bytes_total", str(report.payload_bytes_total)),
        ("peak_rss_mb", f"{report.peak_rss_mb:.1f}"),
        ("pipelined", str(report.pipelined).lower()),
        ("input_size", str(report.input_size)),
        ("model_params", str(report.model_params)),
        ("model_gflops", f"{report.model_gflops:.3f}"),
    ]
    if report.map is not None:
        rows.append(("map", f"{report.map:.4f}"))
    width = max(len(k) for k, _ in rows)
    lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
    return ("\n".join(lines) + "\n").encode()
