import os

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs (set RUN_SLOW=1 to enable)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow test; set RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
