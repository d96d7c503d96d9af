"""Time-aware inverse propensity scoring for sequential recommendation.

A small numpy library that estimates time-varying item exposure
propensities from counterfactual item-time pairs and reweights a
sequential recommender's pairwise training objective, together with a
biased-exposure simulator whose ground truth verifies the debiasing.
"""

from . import autodiff
from .autodiff import ParamRegistry, Tensor, grad_check, no_grad
from .config import RunConfig
from .counterfactual import CounterfactualConfig, CounterfactualTriple, SimilarityCache, popular_item, similar_item
from .data import GapNormalizer, InteractionLog, LogFormat, PopularityIndex, SplitSpec, load_log, make_splits
from .encoders import DualItemEmbeddings, FusedSequence, TimeEmbedder, fuse_sequence
from .evaluation import EvalCase, EvalProtocol, MetricReport, eval_cases_from_splits, evaluate
from .exposure import AttentionConfig, ExposureEstimator, PropensityScore, exposure_loss
from .model import MODES, ModelConfig, TipsModel
from .recommender import AttentionBackbone, MeanPoolBackbone, rank, score
from .simulator import OracleBundle, WorldSpec, simulate, unbiased_eval_cases, unbiased_testset
from .training import StaticPropensity, TrainConfig, TrainResult, tips_weight, train

__version__ = "0.1.0"
