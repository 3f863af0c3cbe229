"""
Dependency checking with fail-fast validation.

Verifies that the packages the agent imports lazily or at module level are
installed before any command starts, with install guidance when they are not.

Usage:
    from scripts.dependencies import check_dependencies

    check_dependencies()  # Exits with code 1 if dependencies missing
"""

import importlib.util
import sys

# (import name, pip name, purpose)
REQUIRED_MODULES = (
    ('numpy', 'numpy', 'Curve math, rasterizer buffers and reward statistics'),
    ('PIL', 'Pillow', 'PNG encoding and decoding of rendered views'),
    ('requests', 'requests', 'LLM provider and embedding service HTTP calls'),
    ('jinja2', 'Jinja2', 'System prompt and judge prompt templates'),
    ('dotenv', 'python-dotenv', 'Loading API keys from .env'),
    ('colorama', 'colorama', 'Colored configuration and dependency errors'),
)


def module_available(name: str) -> bool:
    return importlib.util.find_spec(name) is not None


def missing_dependencies() -> list[dict]:
    return [{'name': pip_name, 'purpose': purpose}
            for module, pip_name, purpose in REQUIRED_MODULES
            if not module_available(module)]


def _palette(colored: bool) -> tuple[str, str, str]:
    """(red, bright, reset) escape codes; empty strings when colorama is absent."""
    if not colored:
        return '', '', ''
    from colorama import Fore, Style, just_fix_windows_console
    just_fix_windows_console()
    return Fore.RED, Style.BRIGHT, Style.RESET_ALL


def check_dependencies() -> None:
    """Pre-flight check for all required Python packages.

    Exits with code 1 if any is missing, listing each package and what it
    is needed for.
    """
    missing = missing_dependencies()
    if not missing:
        return

    red, bright, reset = _palette(all(dep['name'] != 'colorama' for dep in missing))
    print(f"\n{red}{bright}Missing Dependencies:{reset}")
    for dep in missing:
        print(f"{red}  • {dep['name']}: {dep['purpose']}{reset}")
    print(f"\n{bright}Installation:{reset}")
    print("  • Python packages: pip install -r requirements.txt")
    print()
    sys.exit(1)


if __name__ == '__main__':
    check_dependencies()
    print("✓ All dependencies available")
