"""Desk-scale leaf-spine congestion lab.

Fluid flow-level simulator for DCQCN-style rate control with per-port ECN
marking, plus a message-passing multi-agent Q-learner that tunes the marking
thresholds, two reference policies, and an evaluation harness.
"""

__version__ = "0.1.0"
