"""Simulation and verification tools for McKean-Vlasov SDEs.

Particle clouds stand in for laws (:mod:`mvlab.measures`), exact transport
distances compare them (:mod:`mvlab.transport`), interacting-particle
Euler-Maruyama evolves them (:mod:`mvlab.dynamics`), and
:mod:`mvlab.lyapunov` / :mod:`mvlab.ergodicity` check generator bounds and
long-time behaviour.  :mod:`mvlab.examples` holds the built-in systems.
"""
__version__ = "0.1.0"
