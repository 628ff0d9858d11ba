"""
Training metrics and operation timing.
"""

import time
from typing import Any, Dict, Mapping

from loguru import logger
from prometheus_client import Counter, Gauge, Histogram

# Prometheus metrics
EPOCH_DURATION = Histogram("wsol_epoch_duration_seconds", "Wall time of one training epoch")
LOSS_VALUE = Gauge("wsol_loss", "Epoch-mean loss per term", ["term"])
BAS_SKIPPED = Counter("wsol_bas_skipped_total", "Samples whose BAS ratio was skipped (s_bg > s_all)")
SAMPLES_SEEN = Counter("wsol_samples_total", "Training samples processed")


class PerformanceTracker:
    """Track the duration of one operation plus custom metrics."""

    def __init__(self, operation_name: str):
        self.operation_name = operation_name
        self.start_time = time.perf_counter()
        self.metrics: Dict[str, Any] = {}

    def add_metric(self, key: str, value: Any) -> None:
        self.metrics[key] = value

    def finish(self) -> float:
        """Finish tracking and return duration."""
        duration = time.perf_counter() - self.start_time
        logger.debug(
            "Operation completed",
            operation=self.operation_name,
            duration=duration,
            **self.metrics,
        )
        return duration


def record_epoch(duration: float, terms: Mapping[str, float], skipped: int, samples: int) -> None:
    EPOCH_DURATION.observe(duration)
    for term, value in terms.items():
        LOSS_VALUE.labels(term=term).set(value)
    BAS_SKIPPED.inc(skipped)
    SAMPLES_SEEN.inc(samples)
