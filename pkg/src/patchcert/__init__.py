"""patchcert: train small-receptive-field classifiers and certify them
against adversarial patches at every feasible position."""

__version__ = "0.1.0"

from .certify import (CertificationResult, certify_all, certify_cheap,
                      certify_generic, certify_sum, classify)
from .geometry import (DependencyRegion, LayerGeom, PatchRegion,
                       dependency_region, enumerate_regions, r_max,
                       receptive_field)
from .model import NetworkSpec, Parameters, build_model, cifar_spec, forward

__all__ = [
    "__version__",
    "CertificationResult", "certify_all", "certify_cheap", "certify_generic",
    "certify_sum", "classify",
    "DependencyRegion", "LayerGeom", "PatchRegion", "dependency_region",
    "enumerate_regions", "r_max", "receptive_field",
    "NetworkSpec", "Parameters", "build_model", "cifar_spec", "forward",
]
