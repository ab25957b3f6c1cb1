"""tomoprior: desk-scale CT inverse-problem toolkit.

Parallel-beam acquisition modeling, synthetic phantoms, a small
score-based diffusion prior, coordinate-network reconstruction with
measurement refinement, and classical baselines (FBP, SART, ADMM-TV).
"""

__version__ = "0.1.0"
