"""Deep kernel models valued in structured matrix algebras."""

from . import algebra, kernels, model, pfnorm, bounds, training, harness

__version__ = "0.1.0"

__all__ = ["algebra", "kernels", "model", "pfnorm", "bounds", "training",
           "harness", "__version__"]
