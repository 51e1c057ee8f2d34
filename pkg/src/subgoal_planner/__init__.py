"""Sub-goal planning from instructions, observations and histories with mutually attentive fusion."""

from .config import ABLATION_ROWS, ModalityMask, ModelConfig, TrainConfig
from .dataset import CorpusConfig, Episode, generate_corpus, generate_episode, read_episodes, write_episodes
from .heads import SubGoal, decode_subgoal, subgoal_loss
from .model import PlannerModel
from .simulator import FailureInjector, run_agent, run_episode
from .trainer import ablation_grid, evaluate, train

__all__ = [
    "ABLATION_ROWS",
    "CorpusConfig",
    "Episode",
    "FailureInjector",
    "ModalityMask",
    "ModelConfig",
    "PlannerModel",
    "SubGoal",
    "TrainConfig",
    "ablation_grid",
    "decode_subgoal",
    "evaluate",
    "generate_corpus",
    "generate_episode",
    "read_episodes",
    "run_agent",
    "run_episode",
    "subgoal_loss",
    "train",
    "write_episodes",
]
