"""
Project root detection and import configuration.

Prompt templates, the bundled example sketch and relative config paths are
all located relative to the project root, whichever directory the CLI or
the test suite is started from.

Usage:
    from scripts.root_detection import find_project_root, setup_project_imports

    setup_project_imports()
    templates = find_project_root() / 'prompts'
"""

import subprocess
import sys
from pathlib import Path
from typing import Optional

from colorama import Fore, Style

# Markers that identify this repository's layout
LAYOUT_DIRS = ('scripts', 'prompts')
ENV_FILES = ('.env', '.env.example')

# Cache for root detection result (avoid repeated git calls)
_cached_root: Optional[Path] = None


def _git_root(start_path: Path) -> tuple[Optional[Path], str]:
    try:
        result = subprocess.run(
            ['git', 'rev-parse', '--show-toplevel'],
            cwd=start_path, capture_output=True, text=True, check=False,
            timeout=2,  # Fail fast if git hangs
        )
    except FileNotFoundError:
        return None, f"Git repository root from {start_path}: Git not installed"
    except subprocess.TimeoutExpired:
        return None, f"Git repository root from {start_path}: Git command timed out"
    if result.returncode != 0:
        return None, f"Git repository root from {start_path}: Not a git repository"
    return Path(result.stdout.strip()).resolve(), ''


def _has_layout(path: Path) -> bool:
    return all((path / d).is_dir() for d in LAYOUT_DIRS)


def find_project_root(start_path=None) -> Path:
    """
    Find project root using a fallback chain.

    Detection order:
    1. Git repository root, if it holds scripts/ and prompts/
    2. Nearest parent directory containing .env or .env.example
    3. Current working directory if it holds scripts/ and prompts/

    The result is cached at module level.

    Raises:
        RuntimeError: If root cannot be determined, listing every attempt
    """
    global _cached_root
    if _cached_root is not None:
        return _cached_root

    start_path = Path(start_path or Path(__file__).parent).resolve()
    attempted = []

    git_root, reason = _git_root(start_path)
    if git_root is not None and _has_layout(git_root):
        _cached_root = git_root
        return git_root
    attempted.append(reason or f"Git repository root {git_root}: no scripts/ and prompts/ inside")

    searched = [start_path] + list(start_path.parents)
    for parent in searched:
        if any((parent / name).exists() for name in ENV_FILES):
            _cached_root = parent
            return parent
    attempted.append(f"Parent directories containing .env or .env.example: "
                     f"searched {len(searched)} directories up to /")

    cwd = Path.cwd()
    if _has_layout(cwd):
        _cached_root = cwd
        return cwd
    marks = ', '.join(f"{d}={'✓' if (cwd / d).is_dir() else '✗'}" for d in LAYOUT_DIRS)
    attempted.append(f"Current directory {cwd}: missing expected structure ({marks})")

    error_msg = (
        f"\n{Fore.RED}{Style.BRIGHT}Could not determine project root{Style.RESET_ALL}\n\n"
        f"{Style.BRIGHT}Attempted methods:{Style.RESET_ALL}\n"
    )
    error_msg += ''.join(f"  {i}. {method}\n" for i, method in enumerate(attempted, 1))
    error_msg += (
        f"\n{Style.BRIGHT}Suggestions:{Style.RESET_ALL}\n"
        f"  • Run from inside the project directory\n"
        f"  • Keep a .env or .env.example file at the project root\n"
        f"  • Check that the project has scripts/ and prompts/ directories\n"
    )
    raise RuntimeError(error_msg)


def reset_cache() -> None:
    """Forget the cached root (tests switch between temporary projects)."""
    global _cached_root
    _cached_root = None


def setup_project_imports() -> Path:
    """
    Put the project root on sys.path so `scripts.*` and `evaluation.*` import
    from any entry point. Idempotent; returns the root.
    """
    project_root = find_project_root()
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))
    return project_root
