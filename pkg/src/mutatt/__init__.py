"""Mutual visual-textual guidance matching for referring expression
comprehension, over precomputed region features.

The package is a small stack: a float64 autodiff core (:mod:`mutatt.tensor`),
expression and region encoders, the mutual-guidance scorer, a ranking-loss
training loop with Adam, gt/det evaluation, and a synthetic grounding task
with a verifiable ledger for end-to-end checks.
"""

from .gradcheck import GradCheckReport, finite_difference_check
from .language import Vocabulary, encode_expression, encode_tokens, tokenize
from .matching import Ablation, OverallScore, overall_score
from .params import MODULES, ModelDims, ModelParams
from .synth import SynthSpec, generate_synthetic
from .tensor import Tensor, no_grad

__all__ = [
    "Tensor",
    "no_grad",
    "GradCheckReport",
    "finite_difference_check",
    "Vocabulary",
    "tokenize",
    "encode_tokens",
    "encode_expression",
    "Ablation",
    "OverallScore",
    "overall_score",
    "MODULES",
    "ModelDims",
    "ModelParams",
    "SynthSpec",
    "generate_synthetic",
]

__version__ = "0.1.0"
