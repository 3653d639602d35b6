"""
Core modules for the optimality-condition verifier of controlled stochastic evolution equations
"""

__version__ = "1.0.0"
