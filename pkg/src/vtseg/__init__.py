"""Heatmap U-Net keypoint labeling and audio-visual trajectory fusion for vocal tract RT-MRI."""
from .core_types import (FRAME_RATE, GRID, N_POINTS, NATIVE_SIZE, SAMPLE_RATE, ArticulatorWeights,
                         AudioClip, Frame, HeatmapStack, KeypointSet, PitchContour, Trajectory)

__version__ = "0.1.0"

__all__ = [
    "FRAME_RATE", "GRID", "N_POINTS", "NATIVE_SIZE", "SAMPLE_RATE", "ArticulatorWeights",
    "AudioClip", "Frame", "HeatmapStack", "KeypointSet", "PitchContour", "Trajectory",
]
