from pathlib import Path

import numpy as np
import pytest

from collectives import Topology
from dataset import InteractionDataset, chrono_split, generate_synthetic
from experiment_config import load_config
from simulator import CostParams

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def topology() -> Topology:
    return Topology()


@pytest.fixture
def fitted_costs() -> CostParams:
    return CostParams(
        compute_time_per_sample_per_device=1e-3,
        activation_bytes_per_microbatch=9e6,
        gradient_bytes=7e8,
        tensor_allreduces_per_microbatch=48,
        backward_to_forward_ratio=2.0,
        sync_skew=0.3,
        model_state_bytes=2.8e10,
        device_memory_bytes=40e9,
    )


@pytest.fixture
def plain_costs() -> CostParams:
    """Compute and gradient traffic only: no stragglers, activations or memory pressure."""
    return CostParams(compute_time_per_sample_per_device=1e-3, gradient_bytes=7e8)


@pytest.fixture
def single_node_config():
    return load_config(CONFIG_DIR / "single_node.cfg")


@pytest.fixture
def scaling_config():
    return load_config(CONFIG_DIR / "node_scaling.cfg")


@pytest.fixture
def small_split():
    return chrono_split(generate_synthetic(60, 40, 1200, seed=3))


@pytest.fixture
def tiny_dataset() -> InteractionDataset:
    n = 12
    return InteractionDataset(
        users=np.arange(n) % 3,
        items=np.arange(n) % 4,
        timestamps=np.arange(100, 100 + n),
        num_users=3,
        num_items=4,
    )
