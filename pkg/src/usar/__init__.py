"""Real-time ultrasound streaming and kidney measurement pipeline."""

from .errors import UsarError
from .geometry import (ClassSelector, KidneyMeasurement, Mask,
                       MeasurementSource, OrientedBox, View, box_from_corners,
                       centroid, ellipsoid_volume, extract_dimensions,
                       largest_component, measure_mask, oriented_bounding_box,
                       principal_orientation, scatter, select_region)
from .metrics import ConfusionCounts, confusion, dice, iou, mean_average_precision
from .protocol import (AlignedPair, Aligner, Frame, Reassembler, WirePacket,
                       decode_packet, encode, encode_packet, fragment_frame)
from .providers import (LatencyModel, OracleProvider, PhantomSpec,
                        ResultHub, phantom_next, replay_open)
from .server import MeasurementSession, Phase, ServerConfig, StreamServer
from .evalbench import (ErrorTable, LatencyReport, MetricReport,
                        bench_latency, eval_measurements, eval_segmentation,
                        phantom_eval_samples)

__version__ = "0.1.0"

__all__ = [
    "AlignedPair", "Aligner", "ClassSelector", "ConfusionCounts", "ErrorTable",
    "Frame", "KidneyMeasurement", "LatencyModel", "LatencyReport", "Mask",
    "MeasurementSession", "MeasurementSource", "MetricReport", "OracleProvider",
    "OrientedBox", "PhantomSpec", "Phase", "Reassembler", "ResultHub",
    "ServerConfig", "StreamServer", "UsarError", "View", "WirePacket",
    "bench_latency", "box_from_corners", "centroid", "confusion",
    "decode_packet", "dice", "ellipsoid_volume", "encode", "encode_packet",
    "eval_measurements", "eval_segmentation", "extract_dimensions",
    "fragment_frame", "iou", "largest_component", "mean_average_precision",
    "measure_mask", "oriented_bounding_box", "phantom_eval_samples",
    "phantom_next", "principal_orientation", "replay_open", "scatter",
    "select_region",
]
