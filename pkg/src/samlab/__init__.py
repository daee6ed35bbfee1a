"""samlab: a desk-scale laboratory for metric-aware sharpness-aware descent.

Subpackages and modules:

- numkit      small symmetric linear-algebra helpers
- landscapes  analytic test problems (quadratics, a ring-shaped trap, tiny nets)
- metric      preconditioner state and the trajectory-based metric learner
- optimizers  the descent rules under study (sgdm, lqr, sam and combinations)
- analysis    closed-form predictions for quadratic dynamics
- stochsim    counter-based noise and regenerative well-hopping simulation
- harness     experiment configs, runners, verification report, CLI
"""
from __future__ import annotations

__version__ = "0.1.0"

__all__ = [
    "numkit",
    "landscapes",
    "metric",
    "optimizers",
    "analysis",
    "stochsim",
    "harness",
]
