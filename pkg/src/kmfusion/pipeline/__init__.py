from .data import DatasetError, Sample, augment, load_dataset, split, synth_dataset, write_dataset, write_mask
from .optim import Adam, RegistryError, adam_step, cosine_lr
from .training import (
    CSV_HEADER,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    evaluate,
    evaluate_model,
    predict,
    read_metrics_csv,
    train,
)
