"""Noisy-label learning laboratory: curriculum fine-tuning of a frozen ViT with
agreement-based sample selection, plus baselines, noise simulation and metrics."""

from .adapters import VPT, AdaptFormer, LoRA, ReinLite, init_adapter, trainable_param_count
from .backbone import Backbone, BackboneConfig, load_pretrained
from .curriculum import agreement_mask, cufit_step, infer, init_cufit, masked_ce_loss, predict
from .datahub import (
    CorruptionMask,
    LabeledDataset,
    NoiseSpec,
    batches,
    inject_symmetric_noise,
    load_image_folder,
    load_packed,
    make_synthetic,
    save_packed,
)
from .metrics import RunLog, label_precision, label_recall, last_k_mean, macro_accuracy
from .runner import ExperimentConfig, LrSchedule, load_config, lr_at, run_experiment, run_suite

__version__ = "0.1.0"
