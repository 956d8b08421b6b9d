import time
from functools import wraps
from typing import Optional

from loguru import logger
from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    write_to_textfile,
)

from timberdiff.config import settings


class MetricsCollector:
    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.registry = registry or CollectorRegistry()

        # Stage metrics
        self.stage_duration = Histogram(
            'timberdiff_stage_duration_seconds',
            'Pipeline stage duration in seconds',
            ['stage'],
            registry=self.registry
        )

        self.stage_runs = Counter(
            'timberdiff_stage_runs_total',
            'Total pipeline stage executions',
            ['stage', 'status'],
            registry=self.registry
        )

        # Data volume
        self.points_processed = Counter(
            'timberdiff_points_processed_total',
            'Points leaving a pipeline stage',
            ['stage'],
            registry=self.registry
        )

        # Registration quality
        self.registration_fitness = Gauge(
            'timberdiff_registration_fitness',
            'Fitness of the last accepted registration',
            ['step'],
            registry=self.registry
        )

    def record_stage(self, stage: str, duration: float, success: bool):
        """Record one stage execution"""
        status = "success" if success else "failure"
        self.stage_duration.labels(stage=stage).observe(duration)
        self.stage_runs.labels(stage=stage, status=status).inc()

    def record_points(self, stage: str, count: int):
        self.points_processed.labels(stage=stage).inc(count)

    def record_fitness(self, step: str, fitness: float):
        self.registration_fitness.labels(step=step).set(fitness)

    def stage_count(self, stage: str, status: str = "success") -> float:
        """Current value of the run counter for one stage"""
        value = self.registry.get_sample_value(
            'timberdiff_stage_runs_total', {'stage': stage, 'status': status})
        return value or 0.0

    def write(self, path: Optional[str] = None):
        """Dump the registry in the Prometheus text format"""
        path = path or settings.metrics_file
        if not settings.enable_metrics or not path:
            return
        try:
            write_to_textfile(path, self.registry)
            logger.info(f"Metrics written to {path}")
        except OSError as e:
            logger.error(f"Failed to write metrics file {path}: {e}")


class PerformanceTracker:
    def __init__(self, metrics_collector: MetricsCollector, stage: str = ""):
        self.metrics = metrics_collector
        self.start_time: Optional[float] = None
        self.stage = stage

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time is not None and self.stage:
            duration = time.perf_counter() - self.start_time
            self.metrics.record_stage(self.stage, duration, exc_type is None)
        return False


# Global metrics instance
metrics = MetricsCollector()


def track_performance(stage: str):
    """Decorator recording duration and outcome of a stage function"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            with PerformanceTracker(metrics, stage):
                return func(*args, **kwargs)
        return wrapper
    return decorator
