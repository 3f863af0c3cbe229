#!/usr/bin/env python3
"""
Logging setup with secret redaction.

LLM and embedding clients log URLs, headers and error bodies; this module
makes sure API keys never reach the console or agent.log.
"""

import logging
import os
import re
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Optional, Sequence

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'
LOG_FILE = 'agent.log'
SECRET_ENV_VARS = ('LLM_API_KEY', 'EMBED_API_KEY')

_PATTERNS = (
    # "Authorization: Bearer abc..." / "bearer abc..."
    (re.compile(r'(?i)\b(bearer)\s+[A-Za-z0-9._~+/=-]+'), r'\1 [REDACTED]'),
    # OpenAI-style keys
    (re.compile(r'\bsk-[A-Za-z0-9_-]{8,}'), '[KEY_REDACTED]'),
    # ?key=... / &api_key=...
    (re.compile(r'(?i)([?&](?:api_)?key=)[^&\s]+'), r'\1[REDACTED]'),
    # x-goog-api-key: ... in dumped headers
    (re.compile(r"(?i)(x-goog-api-key['\"]?\s*[:=]\s*['\"]?)[^'\"\s,}]+"), r'\1[REDACTED]'),
)


class SecretRedactionFilter(logging.Filter):
    """Filter that redacts credentials from log records.

    Sanitizes:
    - Bearer tokens, sk-... keys, key= query parameters, Gemini key headers
    - The literal values of the configured API-key environment variables
    - Personal paths → Replace home directory with ~

    Args:
        secret_env_vars: Environment variables whose values are redacted verbatim
    """

    def __init__(self, secret_env_vars: Sequence[str] = SECRET_ENV_VARS):
        super().__init__()
        self.secret_env_vars = tuple(secret_env_vars)
        self.home_dir = str(Path.home())

    def _secrets(self):
        # Read on every record: keys may be loaded from .env after setup
        return [v for v in (os.environ.get(k) for k in self.secret_env_vars) if v and len(v) >= 4]

    def _sanitize(self, text: str) -> str:
        for secret in self._secrets():
            text = text.replace(secret, '[REDACTED]')
        for pattern, replacement in _PATTERNS:
            text = pattern.sub(replacement, text)
        if self.home_dir not in ('', '/'):
            text = text.replace(self.home_dir, '~')
        return text

    def filter(self, record):
        """Sanitize record.msg and record.args in place; never drops a record."""
        if not isinstance(record.msg, str):
            record.msg = str(record.msg)
        record.msg = self._sanitize(record.msg)

        # logger.info("Calling %s", url) passes sensitive values through args
        if record.args:
            if isinstance(record.args, tuple):
                record.args = tuple(self._sanitize_value(arg) for arg in record.args)
            elif isinstance(record.args, dict):
                record.args = {k: self._sanitize_value(v) for k, v in record.args.items()}
        return True

    def _sanitize_value(self, value):
        if isinstance(value, str):
            return self._sanitize(value)
        if isinstance(value, BaseException):
            return self._sanitize(str(value))
        return value


def setup_logging(log_dir: Optional[Path] = None, level: int = logging.INFO,
                  verbose: bool = False) -> logging.Logger:
    """Configure the root logger: stderr plus optional weekly-rotated agent.log.

    Every handler carries a SecretRedactionFilter. Calling it again replaces
    the handlers installed by a previous call instead of stacking them.

    Args:
        log_dir: Directory for agent.log (no file logging when None)
        level: Logging level (default: INFO)
        verbose: Shortcut for DEBUG
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if verbose else level)
    for handler in [h for h in root_logger.handlers if getattr(h, '_agent_handler', False)]:
        root_logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    redactor = SecretRedactionFilter()

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        # Weekly rotation, keep 4 weeks
        handlers.append(TimedRotatingFileHandler(
            log_dir / LOG_FILE, when='W0', interval=1, backupCount=4, encoding='utf-8'))

    for handler in handlers:
        handler.setFormatter(formatter)
        handler.addFilter(redactor)
        handler._agent_handler = True
        root_logger.addHandler(handler)
    return root_logger
