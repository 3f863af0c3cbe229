"""
Test suite for RunStore

Tests cover:
- JSONL append and read for rollouts and verdicts
- Atomic JSON writes with backup creation
- Truncation back to the last completed epoch and fresh-run reset
- File locking with timeout
- Validation with clear error messages and recovery instructions
"""

import json

import pytest

from scripts.run_store import RunStore, StoreError, dump_json


def _rollout(runid, epoch=0, **extra):
    record = {'runid': runid, 'prompt': 'a box', 'response': '<curves>[]</curves>', 'reward': 0.0,
              'curve_count': 0, 'parse_ok': False, 'epoch': epoch, 'group_index': runid % 5}
    record.update(extra)
    return record


def _verdict(epoch=0):
    return {'epoch': epoch, 'prompt': 'a box', 'pair': {'better': 1, 'worse': 0, 'gap': 0.5},
            'advantage_text': 'closed outline', 'edits': [{'op': 'Keep'}], 'diagnostic': None}


@pytest.fixture
def store(tmp_path):
    return RunStore(tmp_path / 'run')


@pytest.mark.unit
class TestLogs:
    """Append-only JSONL logs"""

    def test_append_and_read_rollouts(self, store):
        """Appended batches should read back in order"""
        store.append_rollouts([_rollout(0), _rollout(1)])
        store.append_rollouts([_rollout(2)])
        assert [r['runid'] for r in store.read_rollouts()] == [0, 1, 2]

    def test_one_compact_line_per_record(self, store):
        """Each record is one compact UTF-8 line"""
        store.append_rollouts([_rollout(0, prompt='un tabouret à trois pieds')])
        lines = store.rollouts_path.read_text(encoding='utf-8').splitlines()
        assert len(lines) == 1
        assert 'à trois' in lines[0]
        assert ': ' not in lines[0]

    def test_verdicts(self, store):
        store.append_verdict(_verdict(0))
        store.append_verdict(_verdict(1))
        assert [v['epoch'] for v in store.read_verdicts()] == [0, 1]

    def test_missing_logs_read_empty(self, store):
        """A fresh run directory reads as empty"""
        assert store.read_rollouts() == []
        assert store.read_verdicts() == []
        assert store.load_library() is None
        assert store.load_state() is None

    def test_read_jsonl_outside_run_dir(self, store, fixtures_dir):
        """Any rollout log can be read, not only the run's own"""
        records = store.read_jsonl(fixtures_dir / 'rollouts_10.jsonl')
        assert len(records) == 10
        assert records[4]['curve_count'] == 2

    def test_corrupted_line_raises(self, store):
        """A broken line should raise StoreError with its line number"""
        store.append_rollouts([_rollout(0)])
        with open(store.rollouts_path, 'a', encoding='utf-8') as f:
            f.write('{"runid": 1, "prompt"\n')
        with pytest.raises(StoreError) as exc:
            store.read_rollouts()
        assert 'line 2' in str(exc.value)


@pytest.mark.unit
class TestAtomicWrites:
    """Atomic JSON documents with .bak backups"""

    def test_backup_holds_previous_library(self, store):
        """Writing the library should keep the previous version in .bak"""
        store.save_library({'version': 1, 'next_id': 2, 'entries': [{'id': 1, 'text': 'old'}]})
        store.save_library({'version': 2, 'next_id': 2, 'entries': [{'id': 1, 'text': 'new'}]})

        backup = RunStore.backup_path(store.library_path)
        assert backup.name == 'library.json.bak'
        assert json.loads(backup.read_text(encoding='utf-8'))['entries'][0]['text'] == 'old'
        assert store.load_library()['version'] == 2

    def test_canonical_bytes(self, store):
        """State files are written in the canonical JSON form"""
        state = {'completed_epochs': 1, 'next_runid': 5, 'epoch_rows': [], 'provider_state': None}
        store.save_state(state)
        assert store.state_path.read_text(encoding='utf-8') == dump_json(state)
        assert dump_json(state).endswith('}\n')

    def test_failed_serialisation_leaves_file_intact(self, store):
        """If serialisation fails mid-write, the original file should be unchanged"""
        store.save_library({'version': 1, 'entries': []})
        with pytest.raises(TypeError):
            store.save_library({'version': 2, 'entries': [object()]})
        assert store.load_library() == {'version': 1, 'entries': []}
        assert not list(store.out_dir.glob('*.tmp'))

    def test_corrupted_document(self, store):
        """A corrupted state file should point at its backup"""
        store.out_dir.mkdir(parents=True)
        store.state_path.write_text('{"completed_epochs": ', encoding='utf-8')
        with pytest.raises(StoreError) as exc:
            store.load_state()
        assert 'run_state.json.bak' in str(exc.value)


@pytest.mark.unit
class TestTruncateAndReset:
    def test_truncate_keeps_completed_epochs(self, store):
        """Records from unfinished epochs should be dropped from both logs"""
        store.append_rollouts([_rollout(0, 0), _rollout(1, 0), _rollout(2, 1), _rollout(3, 2)])
        store.append_verdict(_verdict(0))
        store.append_verdict(_verdict(1))

        store.truncate_after_epoch(1)

        assert [r['runid'] for r in store.read_rollouts()] == [0, 1]
        assert [v['epoch'] for v in store.read_verdicts()] == [0]

    def test_truncate_without_logs(self, store):
        store.truncate_after_epoch(3)
        assert not store.rollouts_path.exists()

    def test_reset_removes_run_files_and_backups(self, store):
        """Reset removes run files and backups but leaves other files alone"""
        store.save_library({'version': 0, 'entries': []})
        store.save_library({'version': 1, 'entries': []})
        store.save_state({'completed_epochs': 1})
        store.append_rollouts([_rollout(0)])
        store.append_verdict(_verdict())
        (store.out_dir / 'notes.txt').write_text('keep me', encoding='utf-8')

        store.reset()

        assert sorted(p.name for p in store.out_dir.iterdir()) == ['notes.txt']


@pytest.mark.unit
class TestFileLocking:
    """Locks guard every read and write"""

    def test_lock_timeout(self, store, monkeypatch):
        """Reader should raise TimeoutError while a writer holds the lock"""
        monkeypatch.setattr(RunStore, 'LOCK_TIMEOUT', 0.3)
        store.append_rollouts([_rollout(0)])

        # An exclusive writer holds the log; a reader must give up
        with store._lock(store.rollouts_path, 'a'):
            with pytest.raises(TimeoutError) as exc:
                store.read_rollouts()

        assert 'lock' in str(exc.value).lower()
        assert str(store.out_dir) in str(exc.value)
        assert len(store.read_rollouts()) == 1

    def test_shared_readers_do_not_block(self, store, monkeypatch):
        """Two readers can hold the lock at once"""
        monkeypatch.setattr(RunStore, 'LOCK_TIMEOUT', 0.3)
        store.append_rollouts([_rollout(0)])
        with store._lock(store.rollouts_path, 'r'):
            assert len(store.read_rollouts()) == 1


@pytest.mark.unit
class TestValidation:
    """Validation with line numbers and recovery instructions"""

    def test_valid_run(self, store):
        """Valid run directory should pass validation"""
        store.save_library({'version': 1, 'next_id': 2, 'entries': [{'id': 1, 'text': 'Close loops.'}]})
        store.append_rollouts([_rollout(0), _rollout(1)])
        store.append_verdict(_verdict())
        assert store.validate() is True

    def test_empty_run_is_valid(self, store):
        assert store.validate() is True

    def test_duplicate_runid(self, store):
        """A reused runid should be reported with both record numbers"""
        store.append_rollouts([_rollout(0), _rollout(1), _rollout(1)])
        with pytest.raises(StoreError) as exc:
            store.validate()
        message = str(exc.value)
        assert 'record 3: runid 1 already used on record 2' in message
        assert 'Recovery instructions' in message

    def test_missing_rollout_field(self, store):
        """Missing required field should be named with the record number"""
        record = _rollout(0)
        del record['reward']
        store.append_rollouts([record])
        with pytest.raises(StoreError) as exc:
            store.validate()
        assert 'record 1: missing reward' in str(exc.value)
        assert 'runid, prompt, response' in str(exc.value)

    def test_missing_verdict_field(self, store):
        verdict = _verdict()
        del verdict['edits']
        store.append_verdict(verdict)
        with pytest.raises(StoreError, match='missing edits'):
            store.validate()

    def test_library_entry_without_text(self, store):
        store.save_library({'version': 1, 'entries': [{'id': 1, 'text': '  '}]})
        with pytest.raises(StoreError, match='entry 0 needs an integer id and text'):
            store.validate()

    def test_corrupted_library_points_at_backup(self, store):
        """A corrupted library should point at the backup and the verdict log"""
        store.save_library({'version': 1, 'entries': []})
        store.library_path.write_text('{not json', encoding='utf-8')
        with pytest.raises(StoreError) as exc:
            store.validate()
        message = str(exc.value)
        assert 'library.json.bak' in message
        assert 'verdicts.jsonl' in message
