"""
Shared pytest fixtures for the sketch agent test suite.

Provides fixtures for:
- Environment variable isolation (clean_env)
- Temporary project root directories (temp_project_root)
- Sketch builders and the bundled fixture files
- A socket guard that fails any test opening a network connection (no_network)
"""

import os
import socket
import sys
from pathlib import Path

import pytest

# Bootstrap: Add project root to sys.path for root_detection import
_project_root = Path(__file__).parent.parent
if str(_project_root) not in sys.path:
    sys.path.insert(0, str(_project_root))

# Setup project imports for all tests
from scripts.root_detection import setup_project_imports
setup_project_imports()

from sketch_builders import cube

FIXTURES = Path(__file__).parent / 'fixtures'


@pytest.fixture
def clean_env(monkeypatch):
    """
    Provides a clean environment for config testing.

    Saves current environment variables and restores them after test.
    Use monkeypatch to set/delete environment variables within tests.
    """
    original_env = os.environ.copy()
    for key in ('LLM_API_KEY', 'EMBED_API_KEY', 'EMBED_SERVICE_URL'):
        monkeypatch.delenv(key, raising=False)

    yield monkeypatch

    os.environ.clear()
    os.environ.update(original_env)


@pytest.fixture
def temp_project_root(tmp_path):
    """
    Creates a temporary directory structure mimicking project root.

    Creates:
    - .git directory (marker for project root detection)
    - scripts/ directory
    - prompts/ directory

    Returns:
        Path: Absolute path to temporary project root
    """
    (tmp_path / '.git').mkdir()
    (tmp_path / 'scripts').mkdir()
    (tmp_path / 'prompts').mkdir()
    return tmp_path


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def mock_script_path():
    return FIXTURES / 'cke_mock_script.json'


@pytest.fixture
def cube_sketch():
    return cube()


@pytest.fixture
def no_network(monkeypatch):
    """Fail the test on any attempt to open a socket connection."""
    attempts = []

    def guard(*args, **kwargs):
        attempts.append(args)
        raise AssertionError(f"Network access attempted: {args}")

    monkeypatch.setattr(socket.socket, 'connect', guard)
    monkeypatch.setattr(socket.socket, 'connect_ex', guard)
    monkeypatch.setattr(socket, 'create_connection', guard)
    return attempts
