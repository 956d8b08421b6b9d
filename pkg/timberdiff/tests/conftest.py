import os
from unittest.mock import patch

import numpy as np
import pytest
from loguru import logger
from prometheus_client import CollectorRegistry

from timberdiff.config import Settings, settings
from timberdiff.schemas import (
    MetricBackend,
    MetricParams,
    OutlierParams,
    PipelineConfig,
    RegistrationMode,
    RegistrationParams,
)
from timberdiff.services.cloud import PointCloud
from timberdiff.tests.synthetic import box_beam, end_half_lap, log_frame, notched_beam
from timberdiff.utils.monitoring import MetricsCollector


@pytest.fixture(scope="session", autouse=True)
def setup_test_env():
    """Set up test environment variables and apply them to the loaded settings"""
    test_env = {
        "TIMBERDIFF_LOG_LEVEL": "ERROR",  # Reduce logging noise in tests
        "TIMBERDIFF_ENABLE_METRICS": "false",  # No metrics files from tests
        "TIMBERDIFF_THREADS": "1",
    }

    with patch.dict(os.environ, test_env):
        # the module-level settings were read at import, before this patch
        configured = Settings()
        with patch.multiple(settings, log_level=configured.log_level,
                            enable_metrics=configured.enable_metrics, threads=configured.threads):
            yield


@pytest.fixture
def log_messages():
    """Messages loguru emits during the test"""
    messages = []
    handler_id = logger.add(lambda message: messages.append(message.record["message"]),
                            level="DEBUG")
    yield messages
    logger.remove(handler_id)


@pytest.fixture
def metrics_collector():
    """A collector on a private registry"""
    return MetricsCollector(CollectorRegistry())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def plane_cloud():
    """30 x 30 grid on z = 0 with 1 cm spacing"""
    g = np.arange(30) * 0.01
    x, y = np.meshgrid(g, g, indexing="ij")
    return PointCloud(np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)]))


@pytest.fixture
def cube_corners():
    return PointCloud(np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                               dtype=np.float64))


@pytest.fixture
def box():
    return box_beam(0, (0.4, 0.1, 0.1))


@pytest.fixture
def half_lap_beam():
    """Mid-beam half-lap: floor plus two walls"""
    return notched_beam(0, 0.6, 0.1, 0.1, [(0.25, 0.35, 0.05)])


@pytest.fixture
def lap_joint_beam():
    """Long end lap; the floor dominates the joint surface"""
    return end_half_lap(0, 0.5, 0.1, lap=0.2, depth=0.03)


@pytest.fixture
def frame():
    return log_frame()


@pytest.fixture
def exact_config():
    """No registration and a voxel far below the sample spacing"""
    return PipelineConfig(
        voxel_size=1e-5,
        outliers=OutlierParams(enabled=False),
        registration=RegistrationParams(mode=RegistrationMode.NONE, refine=False),
        metrics=MetricParams(sample_density=4e4, beam_backend=MetricBackend.CLOUD_TO_MESH),
        seed=3,
    )
