"""Differentiable sequential Monte Carlo over symbolic Markov models."""

from .diffcore import Tape, Var, backward, grad_check, grads_by_name
from .errors import (ContractError, DegenerateFilterError, DomainError,
                     EnumerationCapError, ImpossibleEvidenceError,
                     UnsupportedDomainError)
from .gradients import (EstimatorBatch, RecursiveBatch, log_derivative_check,
                        recursive_rloo, reinforce_surrogate, rloo_surrogate)
from .inference import (HmmSpec, ParticleBelief, StepInfo, bootstrap_pf_step,
                        effective_sample_size, exact_forward,
                        exact_forward_model, hmm_init_table, hmm_schema,
                        init_belief, query_expectation, rbpf_step)
from .stochastics import (BernoulliDist, CategoricalDist, Deterministic,
                          RngKey, split)
from .symbolic import (ChoicePoint, ClusterModel, ObsFactor, Rule,
                       SymbolicSchema, SymbolicState, VarDecl,
                       enumerate_joint, exact_conditional, merge_groups,
                       validate_clusters)
from . import enemyroom

__version__ = "0.1.0"

__all__ = [
    "Tape", "Var", "backward", "grad_check", "grads_by_name",
    "ContractError", "DegenerateFilterError", "DomainError",
    "EnumerationCapError", "ImpossibleEvidenceError",
    "UnsupportedDomainError",
    "EstimatorBatch", "RecursiveBatch", "log_derivative_check",
    "recursive_rloo", "reinforce_surrogate", "rloo_surrogate",
    "HmmSpec", "ParticleBelief", "StepInfo", "bootstrap_pf_step",
    "effective_sample_size", "exact_forward", "exact_forward_model",
    "hmm_init_table", "hmm_schema", "init_belief", "query_expectation",
    "rbpf_step",
    "BernoulliDist", "CategoricalDist", "Deterministic", "RngKey", "split",
    "ChoicePoint", "ClusterModel", "ObsFactor", "Rule", "SymbolicSchema",
    "SymbolicState", "VarDecl", "enumerate_joint", "exact_conditional",
    "merge_groups", "validate_clusters",
    "enemyroom",
]
