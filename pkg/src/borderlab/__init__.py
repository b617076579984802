"""borderlab - invariance and near-viability experiments for smooth domains.

Deterministic flows, controlled diffusions and switched piecewise deterministic
processes, with boundary diagnostics and the phage-lambda border-avoidance model.
"""

__version__ = "0.1.0"
