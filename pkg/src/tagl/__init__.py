"""Territory-aware gated loss for coupled BG/SG stroke segmentation, with
metrics, ASPECTS scoring, a synthetic phantom generator and a toy trainer."""

from .aspects import AspectsResult, Territory, TerritoryAtlas, aspects_score, territory_involvement
from .gated import TaglConfig, TotalLoss, adaptive_weight, gate, slice_confidence, tagl_grad, tagl_loss, total_loss
from .gridmap import (
    BinaryMask,
    GridShape,
    Image,
    LabelMap,
    LogitStack,
    ProbMap,
    ProbStack,
    ValidationError,
    argmax_labels,
    infarct_probability,
    softmax_pixelwise,
)
from .losses import SegLossSpec, binary_cross_entropy, cross_entropy, seg_loss, soft_dice_loss
from .metrics import bg_sg_consistency, confusion, dice_per_class, iou_per_class, soft_dice_coefficient
from .phantom import PairedCase, PhantomConfig, augment, build_atlas, generate_dataset, sample_case
from .trainer import LinearHead, TrainConfig, extract_features, fit, forward, run_ablation, train_step

__version__ = "0.1.0"
