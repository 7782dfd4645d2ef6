import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sandpipe import auth  # noqa: E402
from sandpipe.bus import Broker  # noqa: E402
from sandpipe.pipeline import build_bus_topology  # noqa: E402

EXAMPLE_EXP = 1618444800
EXAMPLE_SCOPE = "rabbit_server.write:osg-nma/osg.ps-push.raw/perfsonar.raw.*"


@pytest.fixture(scope="session")
def keypair():
    return auth.generate_keypair()


@pytest.fixture(scope="session")
def other_keypair():
    return auth.generate_keypair()


@pytest.fixture(scope="session")
def example_token(keypair):
    claims = {
        "scope": EXAMPLE_SCOPE,
        "exp": EXAMPLE_EXP,
        "aud": "rabbit_server",
        "sub": "ps.example.edu",
        "client_id": "ps.example.edu",
    }
    return auth.sign_claims(claims, keypair[0])


@pytest.fixture
def broker(keypair):
    b = Broker(authorizer=auth.TokenAuthorizer(keypair[1], clock=lambda: EXAMPLE_EXP - 3600))
    build_bus_topology(b)
    yield b
    b.close()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
