"""Desk-scale lab for dynamic residual-stream mixing in byte-level
transformers.

Five interchangeable residual pathways (plain residual, unconstrained
mixing, doubly-stochastic mixing via Sinkhorn, convex permutation mixing,
and spectral-sphere-constrained mixing), a minimal f64 tape autodiff, a
training loop, verification properties, and analysis exports behind one
CLI (``hclab``).
"""

__version__ = "0.1.0"
