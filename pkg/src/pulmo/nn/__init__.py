from .classifiers import Classifier, build_classifier
from .config import ModelConfig, TrainHistory, TrainSchedule
from .convlstm import BConvLSTM, ConvLSTMCell, bconvlstm_fuse
from .layers import Module
from .model import Model, count_conv_layers
from .unet import UNet, build_modified_unet, build_unet


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    if config.family == "unet":
        return build_unet(config, seed)
    if config.family == "modified_unet":
        return build_modified_unet(config, seed)
    return build_classifier(config, seed)
