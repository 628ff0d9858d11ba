"""
Instrumentation for wsol: training metrics, operation timing and memory snapshots.
"""

from .memory import MemorySnapshot, memory_snapshot
from .performance import PerformanceTracker, record_epoch

__all__ = [
    "MemorySnapshot",
    "memory_snapshot",
    "PerformanceTracker",
    "record_epoch",
]
