"""Visual-reflection measurement, attention-based rewards, and reasoning-data forging."""

from .metrics import attn_visual, decay_curve, export_curve_csv, hellinger, vdm
from .rewards import (
    LAMBDA_F,
    LAMBDA_V,
    RewardBreakdown,
    accuracy_reward,
    format_reward,
    overall_reward,
    score_rollout,
    visual_attention_reward,
)
from .trace import (
    OTHER_ID,
    AttentionStep,
    AttentionTrace,
    DistributionPair,
    ReasoningSample,
    TokenPartition,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"
