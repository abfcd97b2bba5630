"""
Prometheus Metrics Module

Training and evaluation metrics for feature-critic runs. Metrics are a side
channel: nothing in training or evaluation reads them back.
"""

import logging
import time
from typing import Dict, Optional

import psutil
from prometheus_client import (
    CONTENT_TYPE_LATEST,
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    Info,
    generate_latest,
    start_http_server,
)

logger = logging.getLogger(__name__)


class TrainingMetrics:
    """
    Prometheus metrics for the training and evaluation pipeline.

    Tracks:
    - Iterations per phase (meta, agg, finetune) and their duration
    - Latest ce / aux / meta loss values
    - Target-domain accuracy per method
    - Errors, run health and process memory
    """

    def __init__(self, registry: Optional[CollectorRegistry] = None):
        if registry is None:
            from prometheus_client import REGISTRY

            self.registry = REGISTRY
        else:
            self.registry = registry

        self.iterations_total = Counter(
            "fc_iterations_total",
            "Training iterations completed",
            ["phase"],
            registry=self.registry,
        )

        self.loss = Gauge(
            "fc_loss",
            "Most recent loss value by kind",
            ["kind"],
            registry=self.registry,
        )

        self.iteration_duration = Histogram(
            "fc_iteration_duration_seconds",
            "Wall time of one training iteration",
            buckets=[0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0],
            registry=self.registry,
        )

        self.errors_total = Counter(
            "fc_errors_total",
            "Errors by component",
            ["component", "error_type"],
            registry=self.registry,
        )

        self.run_status = Gauge(
            "fc_run_status",
            "Current run status (1=healthy, 0=failed)",
            registry=self.registry,
        )

        self.last_successful_run = Gauge(
            "fc_last_successful_run_timestamp",
            "Timestamp of the last completed run",
            registry=self.registry,
        )

        self.run_duration = Histogram(
            "fc_run_duration_seconds",
            "Wall time of a complete train or eval command",
            buckets=[1, 10, 60, 300, 900, 1800, 3600, 7200],
            registry=self.registry,
        )

        self.memory_usage_bytes = Gauge(
            "fc_memory_usage_bytes",
            "Resident memory of the training process",
            registry=self.registry,
        )

        self.eval_accuracy = Gauge(
            "fc_eval_accuracy",
            "Target-domain accuracy",
            ["target", "method"],
            registry=self.registry,
        )

        self.build_info = Info(
            "fc_build",
            "Build information",
            registry=self.registry,
        )

        self.run_status.set(1)
        logger.debug("Prometheus metrics initialized")

    def record_iteration(
        self, phase: str, duration: float, losses: Dict[str, Optional[float]]
    ):
        self.iterations_total.labels(phase=phase).inc()
        self.iteration_duration.observe(duration)
        for kind, value in losses.items():
            if value is not None:
                self.loss.labels(kind=kind).set(value)

    def record_error(self, component: str, error_type: str):
        """Record an error and mark the run unhealthy."""
        self.errors_total.labels(component=component, error_type=error_type).inc()
        self.run_status.set(0)
        logger.warning(f"Recorded error in {component}: {error_type}")

    def record_successful_run(self, duration: float):
        self.run_status.set(1)
        self.last_successful_run.set(time.time())
        self.run_duration.observe(duration)
        logger.info(f"Recorded successful run: {duration:.2f}s")

    def record_accuracy(self, target: str, method: str, value: float):
        self.eval_accuracy.labels(target=target, method=method).set(value)

    def record_memory_usage(self, bytes_used: Optional[int] = None):
        if bytes_used is None:
            bytes_used = psutil.Process().memory_info().rss
        self.memory_usage_bytes.set(bytes_used)

    def set_build_info(self, version: str, method: str = "", experiment: str = ""):
        self.build_info.info(
            {"version": version, "method": method, "experiment": experiment}
        )

    def get_metrics_text(self) -> str:
        """Get metrics in Prometheus text format."""
        return generate_latest(self.registry).decode("utf-8")


# Global metrics instance
_metrics_instance: Optional[TrainingMetrics] = None


def get_metrics() -> TrainingMetrics:
    """Get the global metrics instance, creating it if needed."""
    global _metrics_instance
    if _metrics_instance is None:
        _metrics_instance = TrainingMetrics()
    return _metrics_instance


def initialize_metrics(registry: Optional[CollectorRegistry] = None) -> TrainingMetrics:
    """Initialize the global metrics instance with an optional custom registry."""
    global _metrics_instance
    _metrics_instance = TrainingMetrics(registry=registry)
    return _metrics_instance


class MetricsServer:
    """Expose /metrics over HTTP while a long run is in progress."""

    def __init__(self, port: int = 8000, metrics: Optional[TrainingMetrics] = None):
        self.port = port
        self.metrics = metrics or get_metrics()
        self.running = False

    def start(self):
        if self.running:
            logger.warning("Metrics server is already running")
            return
        try:
            start_http_server(self.port, registry=self.metrics.registry)
            self.running = True
            logger.info(f"Metrics available at http://localhost:{self.port}/metrics")
        except Exception as e:
            logger.error(f"Failed to start metrics server: {e}")
            raise

    def get_metrics_response(self) -> tuple:
        metrics_text = generate_latest(self.metrics.registry).decode("utf-8")
        return metrics_text, CONTENT_TYPE_LATEST
