"""Dataset distillation in the latent spaces of a frozen generator.

Three matching objectives (gradient, distribution, trajectory) optimize a
small synthetic set either directly in pixels or as intermediate generator
latents, on a self-contained numpy autograd engine.
"""

from .data import Dataset, gen_glyph_dataset, load_dataset, save_dataset
from .engine import DistillConfig, distill
from .evaluation import EvalProtocol, EvalReport, cross_arch_eval
from .generator import Generator, GenSpec
from .nets import NetSpec
from .synset import SynSet, load_synset, save_synset

__all__ = [
    "Dataset", "gen_glyph_dataset", "load_dataset", "save_dataset",
    "DistillConfig", "distill",
    "EvalProtocol", "EvalReport", "cross_arch_eval",
    "Generator", "GenSpec", "NetSpec",
    "SynSet", "load_synset", "save_synset",
]
