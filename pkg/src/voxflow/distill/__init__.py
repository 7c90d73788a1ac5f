"""Progressive flow distillation on toy 2D distributions."""

from .autodiff import Tensor, concat, embedding
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NULL_CLASS, NUM_CLASSES, sample_toy_data
from .models import DiscriminatorHeads, FlowModel, sinusoidal_features
from .train import (
    Adam,
    DistillConfig,
    PhaseSchedule,
    adversarial_finetune,
    cfd_loss,
    cfd_train,
    cfg_velocity,
    distill_pipeline,
    ema_update,
    energy_distance,
    grad_check,
    guidance_distill,
    hinge_discriminator_loss,
    ode_solve,
    pseudo_huber,
    sample_student,
    sample_teacher,
    student_predict,
    train_teacher,
)

__all__ = [
    "Tensor", "concat", "embedding", "load_checkpoint", "save_checkpoint",
    "NULL_CLASS", "NUM_CLASSES", "sample_toy_data", "DiscriminatorHeads",
    "FlowModel", "sinusoidal_features", "Adam", "DistillConfig",
    "PhaseSchedule", "adversarial_finetune", "cfd_loss", "cfd_train",
    "cfg_velocity", "distill_pipeline", "ema_update", "energy_distance",
    "grad_check", "guidance_distill", "hinge_discriminator_loss", "ode_solve",
    "pseudo_huber", "sample_student", "sample_teacher", "student_predict",
    "train_teacher",
]
