"""Delay-Doppler link-level simulator and resource allocator.

Subpackages cover the OTFS/OFDM modem chain (grid), linear time-varying
channel construction (channel), interference/sum-rate analytics
(linkmodel), orthogonal access schemes (access), the penalty-CCP power
and scheduling optimizer (allocator, subproblem), Monte-Carlo detection
chains (rxchain) and the experiment harness (sim, cli).
"""

__version__ = "0.1.0"
