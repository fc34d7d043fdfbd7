"""edgeped: a self-contained edge pedestrian-detection stack.

CPU reference CNN kernels, a MobileNetV2-backbone two-scale detector,
YOLO-style decoding with NMS, AP/mAP evaluation, compact JSON detection
events, a QoS-0 MQTT client/broker, and a per-stage latency benchmark.
"""

__version__ = "0.1.0"

from .config import ModelConfig, mini_config, parse_model_config, reference_config
from .detect import BBox, Detection, iou, nms, run_detection
from .model import Model, build_model, forward, load_weights, save_weights
from .tensor import ConvParams, Tensor

__all__ = [
    "BBox",
    "ConvParams",
    "Detection",
    "Model",
    "ModelConfig",
    "Tensor",
    "build_model",
    "forward",
    "iou",
    "load_weights",
    "mini_config",
    "nms",
    "parse_model_config",
    "reference_config",
    "run_detection",
    "save_weights",
    "__version__",
]
