"""Closed-loop depth-of-anesthesia simulation toolkit.

Propofol PK-PD patient models, an extended Kalman filter that handles the
BIS monitor transport delay, constrained MPC dosing controllers, and
scenario drivers for settling-time and delay-robustness studies.
"""

__version__ = "0.1.0"
