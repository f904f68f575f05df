"""Band- and scale-agnostic hyperspectral/multispectral image fusion in numpy."""

from .errors import (ArgumentError, BandOverflowError, ConfigurationError, DegenerateBandError,
                     FormatError, MKFusionError, NumericError, ShapeError, StateError,
                     UnsupportedScaleError)
from .tensor import Tape, Tensor
from .conv import Kernel4, conv2d_backward, conv2d_forward, conv2d_raw
from .resize import bicubic_resize
from .mk import (MKInputLayer, MKOutputLayer, export_kernel_slabs, mk_input_forward, mk_output_forward,
                 slice_input_kernel, slice_output_kernel)
from .model import (FusionModel, ModelConfig, QueryPoint, decode_residual, fuse, nearest_lr_neighbors,
                    normalize_coords)
from .metrics import MetricsReport, ergas, evaluate, psnr, rmse, sam, ssim, total_loss
from .data import (DatasetBucket, FusionSample, anti_alias_downsample, build_bucket, extract_patches,
                   read_tensor, sample_minibatch, synth_ground_truth, synth_srf, wald_simulate,
                   write_tensor)
from .checkpoint import load_checkpoint, save_checkpoint
from .train import OptimizerState, TrainConfig, cosine_lr, optimizer_step, train

__version__ = "0.1.0"
