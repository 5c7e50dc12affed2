"""Data-parallel ConvNet training engine with a C++ core."""

try:
    # Installed wheel layout: the extension lives inside this package.
    from ptrain._core import *  # noqa: F401,F403
except ImportError:
    # In-tree layout: the extension is built next to the package
    # (e.g. build/bindings on PYTHONPATH).
    from _core import *  # noqa: F401,F403
