"""Isolated execution shim for candidate programs.

Reads one JSON request on stdin, runs the program plus its tests in a fresh
subprocess (throwaway working directory, wall-clock timeout, best-effort
memory limit), and writes exactly one JSON verdict line on stdout.  The
protocol is frozen: callers depend on it, not on this package's internals.
"""

from .core import Verdict, execute, parse_request

__all__ = ["Verdict", "execute", "parse_request"]
