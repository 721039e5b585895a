"""Particle trajectories with history force: a reference solver and neural surrogates."""

__version__ = "0.1.0"
