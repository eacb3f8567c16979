"""Auto-bidding with score-based return-to-go and a value-guided explorer."""
from .score import ScoreConfig, Variant, penalty, rtg_sequence, score_at
from .sim import AuctionEnv, EnvConfig, run_episode
from .model import DecisionModel, ModelConfig, TrainVariant

__all__ = ["ScoreConfig", "Variant", "penalty", "rtg_sequence", "score_at", "AuctionEnv", "EnvConfig",
           "run_episode", "DecisionModel", "ModelConfig", "TrainVariant"]
