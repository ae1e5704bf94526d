"""Desk-scale safe RL laboratory: point-mass CMDPs, hand controllers,
learned safe-set MPC with optimistic forgetting, and unsupervised
(SMM/SAC) demonstration collection."""

__version__ = "0.1.0"
