"""Latent-space sampling-based MPC for closed-chain kinematic systems.

Plans with MPPI in a learned (or exact) low-dimensional parameterization
of an equality-constraint manifold, then removes the residual constraint
violation of the selected solution with a single-step QP before execution.
"""

__version__ = "0.1.0"
