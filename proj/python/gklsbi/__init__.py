"""Posterior surrogates trained from simulator draws (C++ core)."""

from ._gklsbi import (
    Model,
    c2st,
    gkl_grid,
    kl_grid,
    load_samples,
    observation,
    read_results,
    reference_samples,
    run_benchmark,
    set_log_level,
    simulate,
    summarize,
    task_names,
    train,
)

__all__ = [
    "Model",
    "c2st",
    "gkl_grid",
    "kl_grid",
    "load_samples",
    "observation",
    "read_results",
    "reference_samples",
    "run_benchmark",
    "set_log_level",
    "simulate",
    "summarize",
    "task_names",
    "train",
]
