"""
Run configuration: one TOML file, CLI overrides, secrets from the environment.

Values come from (highest priority first):
1. Command-line flags (passed in as overrides)
2. The TOML file given with --config (sections [llm] [scorer] [rig] [cke] [run])
3. Built-in defaults

Secrets (LLM_API_KEY, EMBED_API_KEY) are never read from the TOML file or
flags; they come from the environment, with a project-root .env loaded
without overriding real environment variables.

Usage:
    from scripts.config import load_run_config

    config = load_run_config(Path('run.toml'), {'scorer': 'proxy', 'seed': 7})
    print(config.cke.k, config.out_dir)
"""

from __future__ import annotations

import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from colorama import Fore, Style, just_fix_windows_console
from dotenv import load_dotenv

from scripts.cke import ExtractionSettings
from scripts.llm_gateway import DEFAULT_MAX_OUTPUT_TOKENS, EXPLORATION_TEMPERATURE, INFERENCE_TEMPERATURE, LlmConfig
from scripts.renderer import DEFAULT_CANVAS, DEFAULT_ELEVATIONS, DEFAULT_FOCAL_PX, DEFAULT_RADIUS
from scripts.reward import DEFAULT_TEMPLATE
from scripts.root_detection import find_project_root
from scripts.sketch_text import DEFAULT_BOUND

# Initialize colorama for Windows compatibility
just_fix_windows_console()

SCORER_KINDS = ('proxy', 'service')
PROVIDER_KINDS = ('openai', 'gemini')
SECTIONS = ('llm', 'scorer', 'rig', 'cke', 'run')


class ConfigError(Exception):
    """Configuration validation error with formatted output"""
    pass


@dataclass(frozen=True)
class ScorerSettings:
    kind: str = 'proxy'
    service_url: str = ''
    template: str = DEFAULT_TEMPLATE
    use_template: bool = True
    timeout: float = 30.0
    max_retries: int = 3
    reference_image: Optional[Path] = None


@dataclass(frozen=True)
class RigSettings:
    radius: float = DEFAULT_RADIUS
    elevations: tuple[float, float] = DEFAULT_ELEVATIONS
    focal_px: float = DEFAULT_FOCAL_PX
    canvas: int = DEFAULT_CANVAS
    bound: float = DEFAULT_BOUND


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI command needs"""

    project_root: Path
    llm: LlmConfig
    scorer: ScorerSettings
    rig: RigSettings
    cke: ExtractionSettings
    epochs: int = 1
    inference_temperature: float = INFERENCE_TEMPERATURE
    prompt_set: Optional[Path] = None
    out_dir: Path = Path('out')
    library_path: Optional[Path] = None
    mock_script: Optional[Path] = None
    curve_budget: Optional[int] = None
    jobs: int = 4
    seed: int = 0
    log_dir: Optional[Path] = None


class _Loader:
    """Builds a RunConfig and raises ConfigError with actionable messages"""

    def __init__(self, project_root: Path, config_path: Optional[Path]):
        self.project_root = project_root
        self.config_path = config_path
        self.data: dict[str, dict] = {}

    def read(self):
        if self.config_path is None:
            return
        path = self._resolve_path(self.config_path)
        if not path.is_file():
            raise ConfigError(self._path_error('--config', self.config_path, path,
                                               reason="Config file does not exist"))
        try:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Could not parse {path}: {e}")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown section(s) in {path}: {', '.join(unknown)}\n"
                              f"Expected: {', '.join(SECTIONS)}. See config.example.toml")
        for name, section in data.items():
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] in {path} must be a table")
        self.data = data

    def get(self, section: str, key: str, default: Any, kind: type = str) -> Any:
        value = self.data.get(section, {}).get(key)
        if value is None:
            return default
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ConfigError(f"[{section}] {key} must be {kind.__name__}, got: {value!r}")
        return value

    def _resolve_path(self, path_str) -> Path:
        """Expand ~ and resolve relative paths against the project root"""
        path = Path(path_str).expanduser()
        if not path.is_absolute():
            path = self.project_root / path
        return path.resolve()

    def _path_error(self, key, original_value, resolved_path, reason=None) -> str:
        msg = f"{Fore.RED}{Style.BRIGHT}{key} path error{Style.RESET_ALL}\n\n"
        msg += f"{Style.BRIGHT}Original value:{Style.RESET_ALL} {original_value}\n"
        msg += f"{Style.BRIGHT}Resolved to:{Style.RESET_ALL} {resolved_path}\n"
        msg += f"{Style.BRIGHT}Project root:{Style.RESET_ALL} {self.project_root}\n"
        if reason:
            msg += f"\n{Fore.RED}Error: {reason}{Style.RESET_ALL}\n"
        msg += f"\n{Style.BRIGHT}Suggestions:{Style.RESET_ALL}\n"
        msg += f"  • Relative paths are resolved from project root: {self.project_root}\n"
        msg += f"  • Use absolute paths or ~/ for home directory\n"
        return msg

    def path(self, key: str, value, must_exist: bool) -> Optional[Path]:
        """Resolve a path; inputs must exist, output directories are created"""
        if value in (None, ''):
            return None
        path = self._resolve_path(value)
        if must_exist and not path.exists():
            raise ConfigError(self._path_error(key, value, path, reason="Path does not exist"))
        if not must_exist:
            path.mkdir(parents=True, exist_ok=True)
        return path


def _load_dotenv(project_root: Path) -> None:
    """Load .env if it exists (environment variables take precedence)"""
    dotenv_path = project_root / '.env'
    if dotenv_path.exists():
        load_dotenv(dotenv_path=dotenv_path, override=False)


def load_run_config(config_path: Optional[Path] = None, overrides: Optional[dict] = None,
                    project_root: Optional[Path] = None) -> RunConfig:
    """
    Build and validate the run configuration

    Args:
        config_path: TOML file (optional; defaults apply without it)
        overrides: CLI values keyed by flag name; None values are ignored
        project_root: Root for relative paths (default: find_project_root())

    Raises:
        ConfigError: On unreadable files, wrong types, missing input paths,
                     K < 2 or epochs < 1
    """
    project_root = Path(project_root) if project_root else find_project_root()
    _load_dotenv(project_root)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    loader = _Loader(project_root, config_path)
    loader.read()
    get = loader.get

    provider = get('llm', 'provider', 'openai')
    if provider not in PROVIDER_KINDS:
        raise ConfigError(f"[llm] provider must be one of {', '.join(PROVIDER_KINDS)}, got: {provider!r}")
    try:
        llm = LlmConfig(
            endpoint=get('llm', 'endpoint', ''),
            model=get('llm', 'model', ''),
            provider=provider,
            temperature=get('llm', 'temperature', EXPLORATION_TEMPERATURE, float),
            max_output_tokens=get('llm', 'max_output_tokens', DEFAULT_MAX_OUTPUT_TOKENS, int),
            timeout=get('llm', 'timeout', 600.0, float),
            max_retries=get('llm', 'max_retries', 3, int),
            fan_out=overrides.get('jobs', get('llm', 'fan_out', 5, int)),
        )
    except ValueError as e:
        raise ConfigError(f"[llm] {e}")

    scorer_kind = overrides.get('scorer', get('scorer', 'kind', 'proxy'))
    if scorer_kind not in SCORER_KINDS:
        raise ConfigError(f"scorer must be one of {', '.join(SCORER_KINDS)}, got: {scorer_kind!r}")
    service_url = os.getenv('EMBED_SERVICE_URL') or get('scorer', 'service_url', '')
    if scorer_kind == 'service' and not service_url:
        raise ConfigError("scorer = 'service' needs [scorer] service_url or EMBED_SERVICE_URL.\n\n"
                          "Use --scorer proxy to run without an embedding service.")
    scorer = ScorerSettings(
        kind=scorer_kind,
        service_url=service_url,
        template=get('scorer', 'template', DEFAULT_TEMPLATE),
        use_template=get('scorer', 'use_template', True, bool),
        timeout=get('scorer', 'timeout', 30.0, float),
        max_retries=get('scorer', 'max_retries', 3, int),
        reference_image=loader.path('--reference-image',
                                    overrides.get('reference_image', get('scorer', 'reference_image', None)),
                                    must_exist=True),
    )

    elevations = get('rig', 'elevations', list(DEFAULT_ELEVATIONS), list)
    if len(elevations) != 2:
        raise ConfigError(f"[rig] elevations needs exactly 2 values, got: {elevations!r}")
    rig = RigSettings(
        radius=get('rig', 'radius', DEFAULT_RADIUS, float),
        elevations=(float(elevations[0]), float(elevations[1])),
        focal_px=get('rig', 'focal_px', DEFAULT_FOCAL_PX, float),
        canvas=get('rig', 'canvas', DEFAULT_CANVAS, int),
        bound=get('rig', 'bound', DEFAULT_BOUND, float),
    )

    k = get('cke', 'k', 5, int)
    epochs = overrides.get('epochs', get('cke', 'epochs', 1, int))
    if k < 2:
        raise ConfigError(f"[cke] k must be >= 2, got: {k}")
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got: {epochs}")
    try:
        cke = ExtractionSettings(
            k=k,
            delta=get('cke', 'delta', 0.05, float),
            max_pairs=get('cke', 'max_pairs', 3, int),
            max_entries=get('cke', 'max_entries', 32, int),
            pairing=get('cke', 'pairing', 'contrastive'),
            seed=overrides.get('seed', get('run', 'seed', 0, int)),
        )
    except ValueError as e:
        raise ConfigError(f"[cke] {e}")

    return RunConfig(
        project_root=project_root,
        llm=llm,
        scorer=scorer,
        rig=rig,
        cke=cke,
        epochs=epochs,
        inference_temperature=get('llm', 'inference_temperature', INFERENCE_TEMPERATURE, float),
        prompt_set=loader.path('prompt_set', overrides.get('prompt_set', get('run', 'prompt_set', None)),
                               must_exist=True),
        out_dir=loader.path('--out', overrides.get('out', get('run', 'out_dir', 'out')), must_exist=False),
        library_path=loader.path('--library', overrides.get('library', get('run', 'library', None)),
                                 must_exist=True),
        mock_script=loader.path('--mock-script', overrides.get('mock_script', get('run', 'mock_script', None)),
                                must_exist=True),
        curve_budget=overrides.get('curves', get('run', 'curves', None, int)),
        jobs=overrides.get('jobs', get('run', 'jobs', 4, int)),
        seed=cke.seed,
        log_dir=loader.path('log_dir', get('run', 'log_dir', None), must_exist=False),
    )


def print_config_error(message: str) -> None:
    """Print formatted error message with colors"""
    print(f"\n{Fore.RED}{Style.BRIGHT}Configuration Error:{Style.RESET_ALL}", file=sys.stderr)
    print(f"{Fore.RED}{message}{Style.RESET_ALL}\n", file=sys.stderr)
