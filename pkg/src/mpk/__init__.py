"""Potential theory of finite Markov processes: excessive functions, quasimartingale
variation, invariant functions and invariant measures, with trajectory cross-checks."""

import os

# MPK_THREADS caps the BLAS thread pools; it must be set before numpy loads.
if os.environ.get("MPK_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MPK_THREADS"])

__version__ = "0.1.0"

from .model_core import (  # noqa: E402
    MarkovModel,
    StateSpace,
    generator_apply,
    load_model,
    resolvent_apply,
    semigroup_apply,
)

__all__ = [
    "MarkovModel",
    "StateSpace",
    "generator_apply",
    "load_model",
    "resolvent_apply",
    "semigroup_apply",
]
