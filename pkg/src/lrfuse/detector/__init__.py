from .evaluate import DetectionBox, average_precision, decode_detections, evaluate, match_detections, peak_mask
from .loss import compute_loss, heatmap_target
from .model import (DetectorParams, Mode, PipelineConfig, Sample, forward, head_forward,
                    lidar_stream_forward, prepare_sample, radar_stream_forward)
from .train import Dataset, TrainingAborted, load_dataset, predict, train

__all__ = [
    "DetectionBox", "average_precision", "decode_detections", "evaluate", "match_detections", "peak_mask", "compute_loss", "heatmap_target",
    "DetectorParams", "Mode", "PipelineConfig", "Sample", "forward", "head_forward", "lidar_stream_forward",
    "prepare_sample", "radar_stream_forward", "Dataset", "TrainingAborted", "load_dataset", "predict", "train",
]
