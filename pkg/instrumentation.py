"""
Prometheus metrics for training, evaluation and CLI commands
"""

import time
from contextlib import contextmanager
from typing import Optional

from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    Info,
    write_to_textfile,
)

# Dedicated registry so repeated imports in tests never collide with the default one
registry = CollectorRegistry()

saldist_build = Info("saldist", "saldist version", registry=registry)
saldist_build.info({"version": "1.0.0"})

# Training Metrics
train_iterations_total = Counter(
    "saldist_train_iterations_total",
    "Total SGD iterations",
    ["loss"],
    registry=registry,
)

train_loss = Gauge(
    "saldist_train_loss", "Loss of the last training iteration", ["loss"], registry=registry
)

train_step_seconds = Histogram(
    "saldist_train_step_seconds",
    "Wall time of one SGD iteration",
    buckets=[0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5],
    registry=registry,
)

# Evaluation Metrics
metric_evaluations_total = Counter(
    "saldist_metric_evaluations_total",
    "Saliency metric evaluations",
    ["metric"],
    registry=registry,
)

gradcheck_max_relative_error = Gauge(
    "saldist_gradcheck_max_relative_error",
    "Worst analytic-vs-numeric relative error of the last gradient check",
    ["loss"],
    registry=registry,
)

# Command Metrics
command_seconds = Histogram(
    "saldist_command_seconds",
    "CLI command duration",
    ["command"],
    buckets=[0.1, 0.5, 1.0, 5.0, 10.0, 30.0, 60.0, 300.0, 1800.0],
    registry=registry,
)


# Helper context manager for timing operations
@contextmanager
def MetricsTimer(metric_histogram, *labels):
    """Context manager to time operations and record to histogram"""
    start_time = time.perf_counter()
    try:
        yield
    finally:
        duration = time.perf_counter() - start_time
        if labels:
            metric_histogram.labels(*labels).observe(duration)
        else:
            metric_histogram.observe(duration)


def record_iteration(loss_name: str, value: float):
    """Record one completed training iteration"""
    train_iterations_total.labels(loss=loss_name).inc()
    train_loss.labels(loss=loss_name).set(value)


def export_metrics(path: Optional[str]) -> None:
    """Write the registry in text exposition format; no-op without a path"""
    if path:
        write_to_textfile(path, registry)
