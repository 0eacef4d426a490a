"""Reference kit for CSL lightweight detectors: graphs, cost model, anchors and post-processing."""
from .anchors import AnchorSet, BoxWH, generate_anchors, iou_wh, kmeans_iou
from .config import build_network, load_config
from .cost import ConvShapeQuery, CostReport, conv_flops, csl_flops, network_cost, speedup_ratio
from .csl import CslModuleSpec, build_detector
from .graph import GraphBuilder, Network
from .postprocess import Detection, decode_wh, soft_nms
from .tensor import GradTape, MacCounter, Tensor

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "BoxWH", "generate_anchors", "iou_wh", "kmeans_iou", "build_network", "load_config",
    "ConvShapeQuery", "CostReport", "conv_flops", "csl_flops", "network_cost", "speedup_ratio",
    "CslModuleSpec", "build_detector", "GraphBuilder", "Network", "Detection", "decode_wh", "soft_nms",
    "GradTape", "MacCounter", "Tensor", "__version__",
]
