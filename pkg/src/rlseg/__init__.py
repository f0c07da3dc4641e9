"""Joint temporal segmentation and classification with a TRPO-trained agent."""
from ._accel import BACKEND
from .data import Dataset, SynthConfig, load_dataset, louo_splits, synth_generate
from .env import ActionSpace, RewardConfig, SegmentationEnv, rollout
from .lm import DurationLanguageModel
from .metrics import EvalReport, edit_score, evaluate, f1_at_iou, frame_accuracy
from .policy import MlpPolicy
from .trpo import TrpoConfig, trpo_update

__version__ = "0.1.0"
