"""Contrastive pretraining and multi-label fine-tuning for lesion crops."""

from .config import AugmentationPolicy, TrainConfig, load_config
from .contrastive import contrastive_loss, pretrain_backbone
from .classify import gradient_flow_ok, micro_f1, train_classifier
from .models import (
    ContrastiveNet,
    MultiLabelClassifier,
    ProjectionHead,
    SelfAttention2d,
    SmallConvEncoder,
    build_encoder,
)

__version__ = "0.1.0"
