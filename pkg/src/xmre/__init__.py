"""Retrieval-augmented multimodal relation extraction, desk scale.

The package is organized around the stages of the pipeline:

- :mod:`xmre.data_model` parses MNRE-style datasets and applies the
  entity-marker schema.
- :mod:`xmre.retrieval` builds per-instance evidence bundles (object
  detection, textual and visual evidence) backed by a mock or live backend,
  cached in a content-addressed store.
- :mod:`xmre.encoders` turns sentences, evidence texts and images into the
  feature matrices the fusion core consumes, either with toy learned
  encoders or from precomputed feature files.
- :mod:`xmre.fusion` is the differentiable core: cross-modal selection
  attention, pooling, consistency reweighting and the relation classifier,
  with exact gradients via :mod:`xmre.autodiff`.
- :mod:`xmre.training` optimizes the fusion parameters and computes metrics,
  ablations and evidence-count sweeps.
- :mod:`xmre.cli` wires everything into one command-line entry point.
"""

from xmre.errors import ConfigError, ContractViolation, ValidationError, XmreError

__all__ = [
    "ConfigError",
    "ContractViolation",
    "ValidationError",
    "XmreError",
]

__version__ = "0.1.0"
