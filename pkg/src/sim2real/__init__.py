"""Sim-to-real object position detection workbench.

Two procedurally rendered RGB-D domains, paired variational autoencoders with
a shared frozen decoder, position regressors, and two downstream robot-arm
tasks, all on a small from-scratch autodiff engine.
"""

__version__ = "0.1.0"
