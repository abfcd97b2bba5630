#!/usr/bin/env python3
"""
Tests for Prometheus metrics of the training pipeline.

Tests coverage:
- Metrics initialization
- Iteration, loss and accuracy recording
- Error tracking and run health
- Metrics server and global instance management
"""

from unittest.mock import patch

from prometheus_client import CONTENT_TYPE_LATEST, CollectorRegistry, generate_latest

import apps.feature_critic.metrics as metrics_module
from apps.feature_critic.metrics import (
    MetricsServer,
    TrainingMetrics,
    get_metrics,
    initialize_metrics,
)


class TestTrainingMetrics:
    """Test suite for TrainingMetrics class."""

    def setup_method(self):
        # Custom registry per test to avoid duplicate registration
        self.registry = CollectorRegistry()
        self.metrics = TrainingMetrics(registry=self.registry)

    def text(self) -> str:
        return generate_latest(self.registry).decode("utf-8")

    def test_metrics_initialization(self):
        assert self.metrics.registry is self.registry
        for name in (
            "iterations_total",
            "loss",
            "iteration_duration",
            "errors_total",
            "run_status",
            "last_successful_run",
            "run_duration",
            "memory_usage_bytes",
            "eval_accuracy",
            "build_info",
        ):
            assert hasattr(self.metrics, name)
        assert self.metrics.run_status._value._value == 1

    def test_default_registry_initialization(self):
        from prometheus_client import REGISTRY

        with patch.object(metrics_module, "Counter"), patch.object(
            metrics_module, "Gauge"
        ), patch.object(metrics_module, "Histogram"), patch.object(
            metrics_module, "Info"
        ):
            metrics = TrainingMetrics()
        assert metrics.registry is REGISTRY

    def test_record_iteration(self):
        self.metrics.record_iteration("meta", 0.02, {"ce": 1.5, "aux": None})
        self.metrics.record_iteration("meta", 0.03, {"ce": 1.25})
        self.metrics.record_iteration("agg", 0.01, {"ce": 2.0})

        text = self.text()
        assert 'fc_iterations_total{phase="meta"} 2.0' in text
        assert 'fc_iterations_total{phase="agg"} 1.0' in text
        assert 'fc_loss{kind="ce"} 2.0' in text
        assert 'kind="aux"' not in text
        assert "fc_iteration_duration_seconds_count 3.0" in text

    def test_record_error(self):
        self.metrics.record_error("trainer", "NonFiniteLoss")

        assert self.metrics.run_status._value._value == 0
        assert (
            'fc_errors_total{component="trainer",error_type="NonFiniteLoss"} 1.0'
            in self.text()
        )

    def test_record_successful_run(self):
        self.metrics.record_error("cli", "config")
        with patch("time.time", return_value=1640995200):
            self.metrics.record_successful_run(45.5)

        assert self.metrics.run_status._value._value == 1
        assert self.metrics.last_successful_run._value._value == 1640995200
        assert "fc_run_duration_seconds_count 1.0" in self.text()

    def test_record_accuracy(self):
        self.metrics.record_accuracy("M15", "fc-set", 0.875)
        assert 'fc_eval_accuracy{method="fc-set",target="M15"} 0.875' in self.text()

    def test_record_memory_usage(self):
        self.metrics.record_memory_usage(256 * 1024 * 1024)
        assert self.metrics.memory_usage_bytes._value._value == 256 * 1024 * 1024

    def test_record_memory_usage_reads_process(self):
        self.metrics.record_memory_usage()
        assert self.metrics.memory_usage_bytes._value._value > 0

    def test_set_build_info(self):
        self.metrics.set_build_info("0.1.0", method="agg", experiment="synthetic")
        assert (
            'fc_build_info{experiment="synthetic",method="agg",version="0.1.0"} 1.0'
            in self.text()
        )

    def test_get_metrics_text(self):
        self.metrics.record_iteration("finetune", 0.01, {})
        text = self.metrics.get_metrics_text()
        assert isinstance(text, str)
        assert "fc_iterations_total" in text

    @patch("apps.feature_critic.metrics.logger")
    def test_metrics_logging(self, mock_logger):
        self.metrics.record_error("trainer", "boom")
        self.metrics.record_successful_run(1.0)

        assert mock_logger.warning.called
        assert mock_logger.info.called


class TestMetricsServer:
    """Test suite for MetricsServer class."""

    def test_initialization(self):
        metrics = TrainingMetrics(registry=CollectorRegistry())
        server = MetricsServer(port=8080, metrics=metrics)

        assert server.port == 8080
        assert server.metrics is metrics
        assert server.running is False

    @patch("apps.feature_critic.metrics.start_http_server")
    def test_start_is_idempotent(self, mock_start):
        metrics = TrainingMetrics(registry=CollectorRegistry())
        server = MetricsServer(port=9100, metrics=metrics)

        server.start()
        server.start()

        mock_start.assert_called_once_with(9100, registry=metrics.registry)
        assert server.running is True

    def test_get_metrics_response(self):
        metrics = TrainingMetrics(registry=CollectorRegistry())
        metrics.record_iteration("meta", 0.1, {"meta": -0.01})

        content, content_type = MetricsServer(metrics=metrics).get_metrics_response()

        assert 'fc_loss{kind="meta"} -0.01' in content
        assert content_type == CONTENT_TYPE_LATEST


class TestGlobalMetricsManagement:
    """Test suite for global metrics management functions."""

    def test_initialize_then_get_returns_same_instance(self):
        registry = CollectorRegistry()
        metrics = initialize_metrics(registry=registry)

        assert metrics.registry is registry
        assert get_metrics() is metrics

    def test_initialize_metrics_overwrites_global(self):
        first = initialize_metrics(registry=CollectorRegistry())
        second = initialize_metrics(registry=CollectorRegistry())

        assert first is not second
        assert get_metrics() is second
