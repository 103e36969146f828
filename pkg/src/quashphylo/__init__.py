"""Bayesian phylogenetics with quadratic across-site heterogeneity (QuASH).

Site-specific substitution matrices are quadratic polynomials in a base
rate matrix, ``Q_j = c_j (Q - d_j Q^2)``, with the coefficients drawn from
a discretised gamma (for ``c``) and a shifted, scaled beta (for ``d``) law.
Both stationary TN93 models and non-stationary branch-heterogeneous models
are supported.
"""

__version__ = "0.1.0"

from .likelihood import Alignment, PatternTable, compress_patterns, read_alignment
from .mcmc import ChainTrace, ProposalConfig, multi_chain, run_chain
from .models import FAMILIES, ModelState, PriorConfig, log_likelihood, simulate
from .tree import Tree, majority_rule_consensus, parse_newick, serialize_newick

__all__ = [
    "Alignment",
    "ChainTrace",
    "FAMILIES",
    "ModelState",
    "PatternTable",
    "PriorConfig",
    "ProposalConfig",
    "Tree",
    "compress_patterns",
    "log_likelihood",
    "majority_rule_consensus",
    "multi_chain",
    "parse_newick",
    "read_alignment",
    "run_chain",
    "serialize_newick",
    "simulate",
]
