"""
Test configuration and fixtures
"""

import json
import struct

import numpy as np
import pytest

from continual_lora.core.logging import configure_logging
from continual_lora.models.schemas import ExperimentConfig, SimConfig
from continual_lora.services.adapter import BaseWeights, LoraAdapter
from continual_lora.services.numkit import make_rng

# Values of the hand-built fixture file; all exactly representable in float32
FIXTURE_A = np.array([[1.0, -2.0, 0.5], [0.25, 3.0, -1.5]])
FIXTURE_B = np.array([[1.0, 0.0], [0.0, 1.0], [-0.5, 2.0], [4.0, -0.125]], dtype=np.float32)


@pytest.fixture(autouse=True, scope="session")
def quiet_logging():
    """Keep structlog output to warnings during tests"""
    configure_logging("WARNING")


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def small_sim_config() -> SimConfig:
    """Seconds-scale simulator config used by runner and command tests"""
    return SimConfig(m=8, n=16, r=2, r_task=2, T=3, steps=60, lr=0.05, P=4, rho=0.5)


@pytest.fixture
def tiny_experiment(small_sim_config, tmp_path) -> ExperimentConfig:
    return ExperimentConfig(
        sim=small_sim_config,
        ordering_seeds=[0, 5],
        run_seeds=[0],
        output_dir=tmp_path / "results",
    )


@pytest.fixture
def make_adapter():
    """Factory for random adapters with nonzero B"""

    def _make(rng, m=6, n=5, r=2, scale=1.0, name="layer0"):
        return LoraAdapter(
            a=rng.standard_normal((r, n)),
            b=rng.standard_normal((m, r)),
            scale=scale,
            name=name,
        )

    return _make


@pytest.fixture
def base_weights(rng) -> BaseWeights:
    return BaseWeights.single(rng.standard_normal((6, 5)))


@pytest.fixture
def fixture_file_bytes() -> bytes:
    """Adapter file assembled byte by byte: F64 lora_A (2x3) then F32 lora_B (4x2)"""
    header = (
        '{"__metadata__":{"format":"lora","scale":"0.5"},'
        '"layer0.lora_A":{"dtype":"F64","shape":[2,3],"data_offsets":[0,48]},'
        '"layer0.lora_B":{"dtype":"F32","shape":[4,2],"data_offsets":[48,80]}}'
    )
    # round-trip through json to be sure the literal is well formed
    json.loads(header)
    raw_header = header.encode("utf-8")
    raw_header += b" " * ((-len(raw_header)) % 8)
    payload = struct.pack("<6d", *FIXTURE_A.ravel().tolist())
    payload += struct.pack("<8f", *FIXTURE_B.ravel().tolist())
    return struct.pack("<Q", len(raw_header)) + raw_header + payload
