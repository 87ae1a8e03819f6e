"""Executable model of transparent checkpoint-restart for message-passing programs."""

from .errors import *  # noqa: F401,F403
from .system import RunOutcome, System, run
from .workloads import WORKLOAD_NAMES, make_workload

__all__ = ["System", "RunOutcome", "run", "make_workload", "WORKLOAD_NAMES"]
