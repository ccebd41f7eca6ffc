"""XCAT: lightweight x3 super-resolution with heterogeneous group convolutions,
cross concatenation and full-integer UINT8 inference, built on numpy."""

from .config import PRESETS, XcatConfig, get_preset
from .data import (
    ImagePair,
    InfinitePSNR,
    bicubic_downsample,
    bicubic_upsample,
    challenge_score,
    load_png,
    psnr,
    save_png,
)
from .evaluate import EvalReport, evaluate
from .model import (
    Model,
    build,
    forward,
    load_weights,
    mac_count,
    make_fixed_upsample_kernel,
    param_count,
    save_weights,
)
from .ops import ConvWeights, conv2d, conv2d_direct, depth_to_space, nearest_upsample_reference
from .quant import (
    QModel,
    QuantParams,
    calibrate,
    load_qmodel,
    qforward,
    quantize_model,
    representative_search,
    save_qmodel,
)
from .tensor import channel_concat, channel_rotate, channel_split
from .train import TrainConfig, backward, lr_schedule, train

__version__ = "0.1.0"
