"""emixlab: desk-scale multi-agent value-factorization lab.

EMIX (energy-based surprise minimization plus a multi-target-minimum TD
objective on a monotonic-mixing backbone) alongside QMIX, TwinQMIX, VDN and
IQL baselines, trained and verified on the SpuriousCapture gridworld.
"""

__version__ = "0.1.0"
