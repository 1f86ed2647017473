from .gradcheck import GradCheckReport, grad_check
from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    Sigmoid,
    Upsample2x,
    bce_with_logits,
    bounded_mask,
    bounded_mask_grad,
)
from .models import (
    ArtifactUNet,
    CnnConfig,
    SegmentCNN,
    UNetConfig,
    cnn_config_from_params,
    load_state,
    unet_config_from_params,
)
from .weights import ModelWeights, load_weights, save_weights

__all__ = [
    "AdaptiveAvgPool2d", "ArtifactUNet", "BatchNorm2d", "CnnConfig", "Conv2d", "GradCheckReport",
    "Linear", "MaxPool2d", "ModelWeights", "Module", "ReLU", "SegmentCNN", "Sigmoid", "UNetConfig",
    "Upsample2x", "bce_with_logits", "bounded_mask", "bounded_mask_grad", "cnn_config_from_params", "grad_check",
    "load_state", "load_weights", "save_weights", "unet_config_from_params",
]
