"""
Process memory snapshots (psutil).
"""

from dataclasses import dataclass, field
from datetime import datetime

import psutil
from prometheus_client import Gauge

MEMORY_USAGE_BYTES = Gauge("wsol_memory_usage_bytes", "Memory usage in bytes", ["type"])


@dataclass
class MemorySnapshot:
    """Snapshot of memory usage at a point in time."""
    timestamp: datetime = field(default_factory=datetime.now)
    rss: int = 0
    vms: int = 0
    percent: float = 0.0

    @property
    def rss_mb(self) -> float:
        return self.rss / 1024 / 1024


def memory_snapshot() -> MemorySnapshot:
    process = psutil.Process()
    info = process.memory_info()
    snapshot = MemorySnapshot(rss=info.rss, vms=info.vms, percent=process.memory_percent())
    MEMORY_USAGE_BYTES.labels(type="rss").set(snapshot.rss)
    MEMORY_USAGE_BYTES.labels(type="vms").set(snapshot.vms)
    return snapshot
