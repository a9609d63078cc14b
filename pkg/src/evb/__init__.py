"""Event-based deblurring and high-frame-rate video toolkit.

Takes a blurry frame plus the events recorded during its exposure and
restores the sharp latent image, then rolls the restored frame forward
through the event stream to produce a high-frame-rate video.  Ships a
threshold-crossing event simulator, a closed-form constant-threshold
baseline, two learned residual networks, and a training/evaluation
harness behind the ``evb`` command line tool.
"""

__version__ = "0.1.0"

from .events import (
    Event,
    EventStream,
    IntensityFrame,
    LogFrame,
    VoxelGrid,
    load_events,
    polarity_counts,
    save_events,
    slice_events,
    voxelize,
)
from .simulate import FrameSequence, ThresholdConfig, simulate, synthesize_blur

__all__ = [
    "Event",
    "EventStream",
    "FrameSequence",
    "IntensityFrame",
    "LogFrame",
    "ThresholdConfig",
    "VoxelGrid",
    "load_events",
    "polarity_counts",
    "save_events",
    "simulate",
    "slice_events",
    "synthesize_blur",
    "voxelize",
]
