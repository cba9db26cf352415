"""Marked self-exciting spatio-temporal point processes with extreme-value marks.

Subpackages cover the model pipeline end to end: domain types and unit
scaling (:mod:`seppx.core`), the casualty-count mark mixture
(:mod:`seppx.marks`), the low-rank Gaussian-process triggering kernel
(:mod:`seppx.gp_trigger`), the log-linear background intensity
(:mod:`seppx.baseline`), cluster simulation (:mod:`seppx.simulate`),
hybrid MCMC inference (:mod:`seppx.inference`), intensity forecasting
(:mod:`seppx.predict`) and data ingestion plus the command line front end
(:mod:`seppx.dataio`, :mod:`seppx.cli`).
"""

__version__ = "0.1.0"

from . import core, marks, gp_trigger, baseline, simulate, inference, predict, dataio

__all__ = [
    "core",
    "marks",
    "gp_trigger",
    "baseline",
    "simulate",
    "inference",
    "predict",
    "dataio",
    "__version__",
]
