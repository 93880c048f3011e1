"""Shared fixtures.

RSA key generation dominates test wall time, so a session-scoped pool of
keypairs is shared; nothing in the suite depends on key freshness.
"""

from __future__ import annotations

import random

import pytest

from ocdn import core
from ocdn.simharness import KEYPOOL


@pytest.fixture(scope="session")
def keypool():
    return KEYPOOL


@pytest.fixture(scope="session")
def keypair(keypool) -> core.KeyPair:
    return keypool.rsa(0)


@pytest.fixture(scope="session")
def other_keypair(keypool) -> core.KeyPair:
    return keypool.rsa(1)


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


@pytest.fixture
def shared_key(rng) -> core.SharedKey:
    return core.new_shared_key(rng, now=1_700_000_000.0, ttl_s=3600.0)
