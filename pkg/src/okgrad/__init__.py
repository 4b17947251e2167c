"""Online recurrent learning with unbiased Kronecker-Sum gradient approximations."""

from .approximators import make_algo, parse_algo
from .estimator import OnlineRHN
from .kronsum import KronFormat, KroneckerSum, TripleSum, ok_compress
from .lowrank import opt, opt_bias, sample_opt_diag, split_index
from .rnn import RhnParams, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "KronFormat",
    "KroneckerSum",
    "OnlineRHN",
    "RhnParams",
    "TripleSum",
    "init_params",
    "load_checkpoint",
    "make_algo",
    "ok_compress",
    "opt",
    "opt_bias",
    "parse_algo",
    "sample_opt_diag",
    "save_checkpoint",
    "split_index",
]
