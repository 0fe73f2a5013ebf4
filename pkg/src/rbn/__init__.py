"""Reachability barrier networks: HJ-based control barrier functions.

Grid dynamic programming for discounted reach-avoid values, sine-network
approximations trained on the PDE residual, conformal safety margins, and
a CBF-QP safety filter with a multi-agent simulator.
"""
__version__ = "0.1.0"
