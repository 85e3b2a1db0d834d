"""
MeanFlowActions package.

This package contains the modules for MeanFlow-based one-step action generation:
networks, flow paths, training, sampling, desk-scale tasks and evaluation sweeps.
"""

__version__ = '1.0.0'
