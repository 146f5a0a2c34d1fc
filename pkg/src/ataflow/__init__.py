"""Normalizing-flow variational inference with tail-adaptive Student-t bases."""
from .errors import DomainError, InsufficientDataError, NumericAbort, UsageError
from .flows import FlowStack, build_stack
from .tails import (classify_tail, closure_checks, hill_estimator, ks_test,
                    tail_parameter_function)
from .targets import TARGETS
from .vi import FamilyKind, TrainConfig, make_family, staged_init, train

__version__ = "0.1.0"
