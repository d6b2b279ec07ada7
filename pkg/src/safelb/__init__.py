"""safelb: dispatching to parallel exponential queues under access-cost budgets.

The package bundles the analytic single-step model, dispatch policies, a
multiplier-based tuning loop, target-rate solvers, a small exact solver for
truncated instances, an event-driven simulator, and experiment drivers with a
command-line front end.
"""

from safelb.model import SystemConfig

__all__ = ["SystemConfig"]
__version__ = "0.1.0"
