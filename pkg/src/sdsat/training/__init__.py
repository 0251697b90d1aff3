from .infill import InfillSample, make_infill, reassemble
from .losses import LossReport, loss_basic, loss_improved, position_nll
from .loop import (
    BASIC,
    IMPROVED,
    PLAIN,
    Corpus,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    compute_loss,
    finite_difference_check,
    lr_lambda,
    make_batch,
    train,
    write_curve_csv,
)
from .masking import IGNORE, MaskPlan, MixedSeq, apply_masks, coverage_probability, plan_masks
