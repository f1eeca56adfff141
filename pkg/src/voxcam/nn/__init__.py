from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import softmax, softmax_cross_entropy
from .model import (
    ActivationCache,
    ModelConfig,
    ModelParams,
    backward,
    class_score_gradient,
    forward,
    init_params,
    predict,
    predict_proba,
    score_gradient_wrt_features,
)
from .optim import AdamState, ReduceLROnPlateau, adam_step
from .train import EpochRecord, History, TrainConfig, evaluate_loss, train
