"""Information measures for small neural networks trained from scratch.

Subpackages:
  ndcore      dense float64 arithmetic, MLP reverse-mode gradients, FD probes
  models      model specs, synthetic datasets, the redundant toy regressor
  fisher      Fisher Information estimators and log-determinants
  infoweights complexity, Information in the Weights, PAC-Bayes, MI approximations
  dynamics    SGD/Langevin training, Kramers escape, stability, toy pipeline
  activations effective information in the activations
  cli         experiment harness (`weightinfo run/report`)
"""

__version__ = "0.1.0"

from . import activations, dynamics, fisher, infoweights, models, ndcore  # noqa: F401
