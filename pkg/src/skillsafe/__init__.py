"""Safe hierarchical multi-agent skill learning.

Agents pick interpretable skills through a learned high-level policy;
every skill executes through a parameterized, differentiable quadratic
program whose barrier rows certify pointwise-in-time safety whenever the
program is solved to optimality.
"""

__version__ = "0.1.0"

from . import barriers, dynamics, harness, learn, qp, skills, smdp, worlds

__all__ = ["barriers", "dynamics", "harness", "learn", "qp", "skills",
           "smdp", "worlds", "__version__"]
