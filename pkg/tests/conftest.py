"""Shared test plumbing: session timing and suite ordering.

The acceptance module asserts a wall-clock budget for the whole suite, so
it must run last; everything else keeps collection order.
"""

import time

_SESSION_START = time.monotonic()


def session_elapsed() -> float:
    return time.monotonic() - _SESSION_START


def pytest_collection_modifyitems(config, items):
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")
