"""Target-specific transformation networks for target-level sentiment classification."""

__version__ = "0.1.0"

from . import autograd, cpt, encoders, head, model, pipeline, synth, trainer  # noqa: F401
