from enum import Enum


class ReconEvent(Enum):
    INITIALIZED = 1
    EPOCH_COMPLETED = 2
    FINISHED = 3


class TargetKind(str, Enum):
    USAF_BARS = "usaf_bars"
    TEXT = "text"
    IMAGE_FILE = "image_file"


class FrameOrder(str, Enum):
    SEQUENTIAL = "sequential"
    SHUFFLED = "shuffled"


class AnalysisMode(str, Enum):
    SWEEP = "sweep"
    CROSSTALK = "crosstalk"
