"""
Run Store for experience extraction

Persists everything an extraction run produces under one output directory:
- library.json      experience library (versioned, atomic write with .bak backup)
- rollouts.jsonl    one rollout record per line, appended
- verdicts.jsonl    one judge verdict per line, appended
- run_state.json    resume point (completed epochs, next runid, mock cursors)

All files are accessed under fcntl locks. JSON documents are replaced
atomically (temp file + fsync + os.replace); JSONL lines are appended with a
single write each, so a crash never leaves a half-written record.

Usage:
    from scripts.run_store import RunStore

    store = RunStore(Path('out/run1'))
    store.append_rollouts([record.as_dict() for record in group])
    store.save_library(library.as_dict())
    store.validate()
"""

import errno
import fcntl
import json
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, List, Optional


class StoreError(ValueError):
    """Persisted run data is unreadable or inconsistent."""
    pass


def dump_json(data) -> str:
    """Canonical JSON document text (stable bytes for equal data)."""
    return json.dumps(data, indent=2, ensure_ascii=False) + '\n'


def dump_jsonl_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(',', ':')) + '\n'


class RunStore:
    """Locked, crash-safe storage for one run directory"""

    LIBRARY = 'library.json'
    ROLLOUTS = 'rollouts.jsonl'
    VERDICTS = 'verdicts.jsonl'
    STATE = 'run_state.json'

    # Required keys per rollout line
    ROLLOUT_FIELDS = ('runid', 'prompt', 'response', 'reward', 'curve_count',
                      'parse_ok', 'epoch', 'group_index')
    VERDICT_FIELDS = ('epoch', 'pair', 'advantage_text', 'edits')

    # Lock acquisition timeout in seconds
    LOCK_TIMEOUT = 5

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.library_path = self.out_dir / self.LIBRARY
        self.rollouts_path = self.out_dir / self.ROLLOUTS
        self.verdicts_path = self.out_dir / self.VERDICTS
        self.state_path = self.out_dir / self.STATE

    @staticmethod
    def backup_path(path: Path) -> Path:
        return path.with_suffix(path.suffix + '.bak')

    @contextmanager
    def _lock(self, path: Path, mode: str = 'r'):
        """
        Open and lock a file with retry and timeout

        Args:
            path: File to lock
            mode: 'r' takes a shared lock; anything else an exclusive one

        Yields:
            file: Opened and locked file handle

        Raises:
            TimeoutError: If lock cannot be acquired within LOCK_TIMEOUT seconds
        """
        lock_type = fcntl.LOCK_SH if mode == 'r' else fcntl.LOCK_EX
        path.parent.mkdir(parents=True, exist_ok=True)
        if not path.exists():
            path.touch()

        f = open(path, mode, encoding='utf-8', newline='')
        start_time = time.time()
        try:
            while True:
                try:
                    fcntl.flock(f.fileno(), lock_type | fcntl.LOCK_NB)
                    break
                except OSError as e:
                    if e.errno not in (errno.EACCES, errno.EAGAIN):
                        raise
                    if time.time() - start_time > self.LOCK_TIMEOUT:
                        raise TimeoutError(
                            f"Could not acquire lock on {path} within {self.LOCK_TIMEOUT}s. "
                            f"Another extraction may be writing to {self.out_dir}."
                        )
                    time.sleep(0.1)
            yield f
        finally:
            try:
                fcntl.flock(f.fileno(), fcntl.LOCK_UN)
            except OSError:
                pass
            f.close()

    # ------------------------------------------------------------------ #
    # JSON documents
    # ------------------------------------------------------------------ #

    def _write_atomic(self, path: Path, text: str) -> None:
        """Write to a temp file, back up the current file, then replace it."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            mode='w', delete=False, dir=path.parent, suffix='.tmp',
            encoding='utf-8', newline=''
        ) as tmp:
            tmp_path = tmp.name
            try:
                tmp.write(text)
                tmp.flush()
                os.fsync(tmp.fileno())
            except Exception:
                os.unlink(tmp_path)
                raise

        with self._lock(path, 'r+'):
            if path.stat().st_size > 0:
                shutil.copy2(path, self.backup_path(path))
            os.replace(tmp_path, path)

    def _read_json(self, path: Path) -> Optional[dict]:
        if not path.exists() or path.stat().st_size == 0:
            return None
        with self._lock(path, 'r') as f:
            try:
                return json.load(f)
            except json.JSONDecodeError as e:
                raise StoreError(
                    f"JSON parsing error in {path}: {e}\n"
                    f"File may be corrupted. Check {self.backup_path(path)} for last good state.\n"
                    f"To recover: cp {self.backup_path(path)} {path}"
                ) from e

    def save_library(self, library: dict) -> None:
        self._write_atomic(self.library_path, dump_json(library))

    def load_library(self) -> Optional[dict]:
        return self._read_json(self.library_path)

    def save_state(self, state: dict) -> None:
        self._write_atomic(self.state_path, dump_json(state))

    def load_state(self) -> Optional[dict]:
        return self._read_json(self.state_path)

    # ------------------------------------------------------------------ #
    # JSONL logs
    # ------------------------------------------------------------------ #

    def _append(self, path: Path, records: List[dict]) -> None:
        with self._lock(path, 'a') as f:
            for record in records:
                f.write(dump_jsonl_line(record))
            f.flush()
            os.fsync(f.fileno())

    def _read_lines(self, path: Path) -> List[dict]:
        if not path.exists():
            return []
        records = []
        with self._lock(path, 'r') as f:
            for number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise StoreError(f"{path} line {number}: invalid JSON ({e})") from e
        return records

    def _rewrite_lines(self, path: Path, keep: Callable[[dict], bool]) -> int:
        """Atomically drop records failing keep(); returns how many were kept."""
        records = [r for r in self._read_lines(path) if keep(r)]
        self._write_atomic(path, ''.join(dump_jsonl_line(r) for r in records))
        return len(records)

    def append_rollouts(self, records: List[dict]) -> None:
        self._append(self.rollouts_path, records)

    def read_rollouts(self) -> List[dict]:
        return self._read_lines(self.rollouts_path)

    def append_verdict(self, entry: dict) -> None:
        self._append(self.verdicts_path, [entry])

    def read_verdicts(self) -> List[dict]:
        return self._read_lines(self.verdicts_path)

    def read_jsonl(self, path: Path) -> List[dict]:
        """Read any JSONL log (e.g. a rollout log copied out of its run directory)."""
        return self._read_lines(Path(path))

    def truncate_after_epoch(self, completed_epochs: int) -> None:
        """Forget log records from epochs that never completed."""
        def keep(record):
            return int(record.get('epoch', 0)) < completed_epochs

        for path in (self.rollouts_path, self.verdicts_path):
            if path.exists():
                self._rewrite_lines(path, keep)

    def reset(self) -> None:
        """Start a fresh run: remove logs, library and state (backups included)."""
        for path in (self.library_path, self.rollouts_path, self.verdicts_path, self.state_path):
            for candidate in (path, self.backup_path(path)):
                if candidate.exists():
                    candidate.unlink()

    # ------------------------------------------------------------------ #
    # Validation
    # ------------------------------------------------------------------ #

    def _recovery(self, path: Path, detail: str) -> StoreError:
        return StoreError(
            f"{detail}\n\n"
            f"Recovery instructions:\n"
            f"1. Check backup: {self.backup_path(path)}\n"
            f"2. If backup is good: cp {self.backup_path(path)} {path}\n"
            f"3. If backup is also bad: rerun with --resume after deleting {path}; "
            f"the library can be rebuilt from {self.verdicts_path}\n"
            f"4. Rollout lines need: {', '.join(self.ROLLOUT_FIELDS)}"
        )

    def validate(self) -> bool:
        """
        Validate every persisted file

        Checks:
        - library.json has version, next_id and entries with id/text
        - every rollout line has the required fields and unique runid
        - every verdict line has epoch, pair, advantage_text and edits

        Returns:
            True if validation passes

        Raises:
            StoreError: With line number, issue, and recovery instructions
        """
        try:
            library = self.load_library()
        except StoreError as e:
            raise self._recovery(self.library_path, str(e)) from e
        if library is not None:
            missing = [k for k in ('version', 'entries') if k not in library]
            if missing:
                raise self._recovery(self.library_path,
                                     f"{self.library_path}: missing key(s) {', '.join(missing)}")
            for i, entry in enumerate(library['entries']):
                if not isinstance(entry.get('id'), int) or not str(entry.get('text', '')).strip():
                    raise self._recovery(self.library_path,
                                         f"{self.library_path}: entry {i} needs an integer id and text")

        for path, fields in ((self.rollouts_path, self.ROLLOUT_FIELDS),
                             (self.verdicts_path, self.VERDICT_FIELDS)):
            try:
                records = self._read_lines(path)
            except StoreError as e:
                raise self._recovery(path, str(e)) from e
            for number, record in enumerate(records, 1):
                absent = [k for k in fields if k not in record]
                if absent:
                    raise self._recovery(path, f"{path} record {number}: missing {', '.join(absent)}")

        runids: Dict[int, int] = {}
        for number, record in enumerate(self._read_lines(self.rollouts_path), 1):
            if record['runid'] in runids:
                raise self._recovery(
                    self.rollouts_path,
                    f"{self.rollouts_path} record {number}: runid {record['runid']} "
                    f"already used on record {runids[record['runid']]}")
            runids[record['runid']] = number
        return True
