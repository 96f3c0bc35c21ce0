"""Simulation and verification toolkit for critical branching random walks.

Modules
-------
offspring
    Offspring laws, boundary-case diagnostics and normalization.
brw
    Growth of branching random walks and many-to-one checks.
walk
    The associated walk, its renewal function and the conditioned walk.
cascade
    Additive, derivative and truncated martingales and cascade ball masses.
spine
    Size-biased spine sampling and ball masses along the spine.
envelope
    Iterated-logarithm envelopes, the integral test and finite-horizon proxies.
config, runner, cli
    Experiment configuration, deterministic execution and the command line.
"""

__version__ = "0.1.0"

from .errors import CritCascadeError  # noqa: E402
from .rng import Purpose, derive_stream  # noqa: E402

__all__ = ["__version__", "CritCascadeError", "Purpose", "derive_stream"]
