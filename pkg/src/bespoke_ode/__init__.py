"""Learned n-step ODE sampling schemes for flow models on analytic fields.

Submodules load lazily so the command line can cap numeric thread pools
before anything imports numpy.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "bespoke_loss",
    "bespoke_scheme",
    "cli",
    "config",
    "errors",
    "evaluation",
    "flow_fields",
    "gt_cache",
    "ode_solvers",
    "schedulers",
    "training",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
