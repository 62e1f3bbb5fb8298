"""GhostSR: super-resolution CNNs with learnable zero-FLOP shift layers.

Submodules are imported explicitly (``from ghostsr import tensor``) so that
the CLI can configure BLAS thread counts before numpy is first loaded.
"""

__version__ = "0.1.0"
