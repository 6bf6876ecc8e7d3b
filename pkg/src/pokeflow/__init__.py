"""Poke-conditioned invertible video synthesis on a toy articulated-chain world."""

from .conditioning import ConditionEncoders, Poke, build_poke_map
from .config import RunConfig, from_dict, load_config
from .dataset import EpisodeStore, generate_dataset
from .flows import FlowStack
from .objective import mi_bound_check, nll_loss, sample_prior
from .pipeline import PokeModel
from .seqae import SequenceAE, rec_loss
from .tensor import Tensor, grad_check
from .toyworld import ChainConfig, Episode, simulate_chain

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "ConditionEncoders", "Episode", "EpisodeStore", "FlowStack",
    "Poke", "PokeModel", "RunConfig", "SequenceAE", "Tensor", "build_poke_map",
    "from_dict", "generate_dataset", "grad_check", "load_config", "mi_bound_check",
    "nll_loss", "rec_loss", "sample_prior", "simulate_chain",
]
