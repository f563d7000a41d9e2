"""Link-level simulator of camera-aided preemptive downlink scheduling.

A multi-antenna base station serves mobile users whose line-of-sight paths
get blocked by obstacles.  The simulator couples a synthetic RGB-d sensing
pipeline with pilot-based channel estimation, per-user trajectory/blockage
prediction, and a constrained RB/MCS scheduler, plus reactive baselines for
comparison.
"""

__version__ = "0.1.0"
