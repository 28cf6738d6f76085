"""Pytest configuration for AFRAN tests."""
import sys
from pathlib import Path

import pytest

# Ensure project root is on sys.path so tests can import project modules
ROOT_DIR = Path(__file__).resolve().parent.parent
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))


def tiny_net_config(**changes):
    """A 64-pixel, 1/16-width network small enough to run forward and backward in tests."""
    from dataclasses import replace

    from config_manager import AffmConfig, DlcmConfig, HeadConfig, NetConfig

    net = NetConfig(input_size=64, width_multiplier=1 / 16, affm=AffmConfig(channels=4),
                    dlcm=DlcmConfig(channels=4), head=HeadConfig(channels=4))
    return replace(net, **changes) if changes else net


@pytest.fixture
def tiny_net():
    return tiny_net_config()
