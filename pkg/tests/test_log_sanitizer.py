"""Tests for secret redaction and logging setup (scripts/log_sanitizer.py)."""

import logging

import pytest

from scripts.log_sanitizer import LOG_FILE, SecretRedactionFilter, setup_logging


def _record(msg, args=()):
    return logging.LogRecord('scripts.llm_gateway', logging.WARNING, __file__, 1, msg, args, None)


def _filtered(msg, args=()):
    record = _record(msg, args)
    assert SecretRedactionFilter().filter(record) is True
    return record.getMessage()


@pytest.mark.unit
class TestSecretRedaction:
    def test_bearer_token(self):
        """Bearer tokens in dumped headers should be masked"""
        text = _filtered("Headers: {'Authorization': 'Bearer abc.DEF-123'}")
        assert 'abc.DEF-123' not in text
        assert 'Bearer [REDACTED]' in text

    def test_openai_style_key(self):
        """sk- style keys should be masked wherever they appear"""
        assert _filtered("rejected key sk-proj-0123456789abcdef") == "rejected key [KEY_REDACTED]"

    def test_query_key(self):
        """key= query parameters should be masked, other parameters kept"""
        text = _filtered("POST https://gen.test/v1/models/m:generateContent?key=AIzaSecret&alt=json")
        assert 'AIzaSecret' not in text
        assert '?key=[REDACTED]&alt=json' in text

    def test_gemini_header(self):
        """Gemini key headers should be masked"""
        text = _filtered("{'x-goog-api-key': 'AIzaHeaderSecret'}")
        assert 'AIzaHeaderSecret' not in text

    def test_env_values_redacted_verbatim(self, clean_env):
        """Configured key values are masked even without a known prefix"""
        clean_env.setenv('EMBED_API_KEY', 'plain-embed-secret')
        text = _filtered("service said plain-embed-secret is invalid")
        assert text == "service said [REDACTED] is invalid"

    def test_args_are_sanitized(self, clean_env):
        """Secrets passed as %-format args should be masked too"""
        clean_env.setenv('LLM_API_KEY', 'llm-secret-value')
        error = RuntimeError("401 for key llm-secret-value")
        text = _filtered("Calling %s failed: %s (%d tries)",
                         ("https://llm.test/v1?api_key=zzz", error, 3))
        assert 'zzz' not in text and 'llm-secret-value' not in text
        assert text.endswith("(3 tries)")

    def test_dict_args(self):
        record = _record("%(url)s", ({'url': 'https://x.test/?key=hidden'},))
        SecretRedactionFilter().filter(record)
        assert 'hidden' not in record.getMessage()

    def test_home_directory_shortened(self, monkeypatch, tmp_path):
        """Home directory paths should be shortened to ~"""
        monkeypatch.setattr('scripts.log_sanitizer.Path.home', lambda: tmp_path)
        assert _filtered(f"wrote {tmp_path}/out/library.json") == "wrote ~/out/library.json"

    def test_plain_messages_untouched(self):
        assert _filtered("Epoch %d done: %d pairs", (1, 3)) == "Epoch 1 done: 3 pairs"


@pytest.mark.unit
class TestSetupLogging:
    @pytest.fixture(autouse=True)
    def restore_root_logger(self):
        root = logging.getLogger()
        handlers, level = list(root.handlers), root.level
        yield
        for handler in list(root.handlers):
            if handler not in handlers:
                root.removeHandler(handler)
                handler.close()
        root.setLevel(level)

    def _ours(self):
        return [h for h in logging.getLogger().handlers if getattr(h, '_agent_handler', False)]

    def test_idempotent(self):
        """Calling setup twice should not add a second handler"""
        setup_logging()
        setup_logging()
        assert len(self._ours()) == 1

    def test_file_handler_and_levels(self, tmp_path, clean_env):
        """Log file should be written with secrets already redacted"""
        clean_env.setenv('LLM_API_KEY', 'sk-file-secret-123456')
        root = setup_logging(tmp_path / 'logs', verbose=True)
        assert root.level == logging.DEBUG
        assert len(self._ours()) == 2

        logging.getLogger('scripts.llm_gateway').warning("retrying with %s", 'sk-file-secret-123456')
        for handler in self._ours():
            handler.flush()
        text = (tmp_path / 'logs' / LOG_FILE).read_text(encoding='utf-8')
        assert 'retrying with [REDACTED]' in text
        assert 'sk-file-secret' not in text

        setup_logging()
        assert logging.getLogger().level == logging.INFO
        assert len(self._ours()) == 1
