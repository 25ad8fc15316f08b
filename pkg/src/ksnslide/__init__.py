"""Channel-steepness covariates and latent Gaussian landslide models.

Subpackages and modules, in pipeline order: :mod:`raster`, :mod:`flow`,
:mod:`channel`, :mod:`steepness`, :mod:`mesh`, :mod:`model`,
:mod:`assess`; :mod:`pipeline` and :mod:`cli` tie them together.
"""

__version__ = "0.1.0"
