from srukit.training.loop import (
    ClassifierData,
    TrainConfig,
    TrainMetrics,
    TrainState,
    evaluate_lm,
    synthetic_presence_task,
    train_char_lm,
    train_classifier,
)
from srukit.training.lstm import LstmParams, init_lstm, lstm_backward, lstm_forward, lstm_reference_forward
from srukit.training.models import LstmModel, ModelSpec, SruModel, build_model, count_params
from srukit.training.optim import AdamState, adam_step, clip_grad_norm, global_norm, noam_lr
