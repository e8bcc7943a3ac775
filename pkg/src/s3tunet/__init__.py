"""S3TU-Net lung-nodule segmentation on a small numpy autodiff engine."""

from .data import SamplePair, SynthConfig, generate_synthetic, load_pgm, preprocess, save_pgm
from .metrics import MetricReport, bce_dice_loss, dsc, metric_report
from .model import ModelConfig, S3TUNet, build, load_checkpoint, save_checkpoint
from .rmsvit import RmSvitConfig
from .blocks import DropBlockParams
from .tensor import Tape, Tensor
from .train import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "DropBlockParams", "MetricReport", "ModelConfig", "RmSvitConfig", "S3TUNet", "SamplePair",
    "SynthConfig", "Tape", "Tensor", "TrainConfig", "bce_dice_loss", "build", "dsc", "evaluate",
    "generate_synthetic", "load_checkpoint", "load_pgm", "metric_report", "predict", "preprocess",
    "save_checkpoint", "save_pgm", "train",
]
