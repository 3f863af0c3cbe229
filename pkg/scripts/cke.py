"""
Contrastive experience extraction.

For every task prompt in every epoch:
  1. rollout_group: K generations with the current experience injected, each
     parsed, rendered and scored; failures are kept with reward 0.0
  2. make_pairs: ordered (better, worse) pairs whose reward gap exceeds delta
  3. judge: an LLM explains the gap and proposes library edits as JSON
  4. apply_verdict: Add / Delete / Modify / Keep applied to the library

No model parameters change and no reference sketches are ever read; the
only state that evolves is the natural-language experience library.

Every verdict is appended to verdicts.jsonl and the library is saved right
after it is applied, so replay_verdicts() can rebuild the library from an
empty one and a run can resume after the last completed epoch.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

from evaluation.rollout_stats import rollout_stats
from scripts.curves import Sketch
from scripts.llm_gateway import (
    INFERENCE_TEMPERATURE,
    GatewayError,
    LlmConfig,
    Provider,
    generate,
    generate_many,
    render_template,
)
from scripts.renderer import CameraRig, render
from scripts.reward import RewardScore, Scorer
from scripts.run_store import RunStore
from scripts.sketch_text import ParseError, ParserLimits, parse, serialize

logger = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_DELTA = 0.05
DEFAULT_MAX_PAIRS = 3
DEFAULT_MAX_ENTRIES = 32

JUDGE_TEMPLATE = 'judge.md.j2'
JUDGE_SYSTEM_PROMPT = (
    "You are a meticulous reviewer of 3D line sketches. You compare two attempts, "
    "explain the difference, and maintain a short library of general drawing principles. "
    "Always answer with one fenced JSON block."
)

PAIRING_MODES = ('contrastive', 'random')


class JudgeError(Exception):
    """Judge reply could not be turned into a valid verdict."""
    pass


# --------------------------------------------------------------------------- #
# Records and pairs
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class RolloutRecord:
    runid: int
    prompt: str
    response: str
    parsed: Optional[Sketch]
    reward: RewardScore
    curve_count: int
    parse_ok: bool
    epoch: int
    group_index: int
    error_kind: Optional[str] = None

    def __post_init__(self):
        if not self.parse_ok and (self.reward.value != 0.0 or self.parsed is not None):
            raise ValueError(f"Rollout {self.runid}: failed parses carry reward 0.0 and no sketch")

    def as_dict(self) -> dict:
        return {
            'runid': self.runid,
            'prompt': self.prompt,
            'response': self.response,
            'reward': self.reward.value,
            'reward_kind': self.reward.kind.value,
            'curve_count': self.curve_count,
            'parse_ok': self.parse_ok,
            'epoch': self.epoch,
            'group_index': self.group_index,
            'error_kind': self.error_kind,
        }

    @classmethod
    def from_dict(cls, data: dict, limits: ParserLimits = ParserLimits()) -> RolloutRecord:
        """Rebuild a record from its log line; the sketch is re-parsed from the response."""
        parsed = None
        if data['parse_ok']:
            try:
                parsed = parse(data['response'], limits).sketch
            except ParseError:
                parsed = None
        kind = data.get('reward_kind', 'ParseFailure' if not data['parse_ok'] else 'Proxy')
        return cls(
            runid=int(data['runid']),
            prompt=data['prompt'],
            response=data['response'],
            parsed=parsed,
            reward=RewardScore.from_dict({'value': data['reward'], 'kind': kind}),
            curve_count=int(data['curve_count']),
            parse_ok=bool(data['parse_ok']),
            epoch=int(data['epoch']),
            group_index=int(data['group_index']),
            error_kind=data.get('error_kind'),
        )


@dataclass(frozen=True)
class ContrastivePair:
    better: int
    worse: int
    gap: float

    def as_dict(self) -> dict:
        return {'better': self.better, 'worse': self.worse, 'gap': self.gap}

    @classmethod
    def from_dict(cls, data: dict) -> ContrastivePair:
        return cls(int(data['better']), int(data['worse']), float(data['gap']))


def make_pairs(group: Sequence[RolloutRecord], delta: float = DEFAULT_DELTA,
               max_pairs: int = DEFAULT_MAX_PAIRS) -> list[ContrastivePair]:
    """Ordered pairs with reward gap > delta, largest gap first.

    Ties break on (better runid, worse runid) ascending.
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    candidates = []
    for better in group:
        for worse in group:
            if better is worse:
                continue
            gap = better.reward.value - worse.reward.value
            if gap > delta:
                candidates.append(ContrastivePair(better.runid, worse.runid, gap))
    candidates.sort(key=lambda p: (-p.gap, p.better, p.worse))
    return candidates[:max_pairs]


def make_random_pairs(group: Sequence[RolloutRecord], max_pairs: int,
                      rng: random.Random) -> list[ContrastivePair]:
    """Ablation: uniformly drawn pairs, no gap threshold, oriented by reward."""
    unordered = [(a, b) for i, a in enumerate(group) for b in group[i + 1:]]
    chosen = rng.sample(unordered, min(max_pairs, len(unordered)))
    pairs = []
    for a, b in chosen:
        if (b.reward.value, -b.runid) > (a.reward.value, -a.runid):
            a, b = b, a
        pairs.append(ContrastivePair(a.runid, b.runid, a.reward.value - b.reward.value))
    return pairs


# --------------------------------------------------------------------------- #
# Experience library
# --------------------------------------------------------------------------- #

class EditOp(str, Enum):
    ADD = 'Add'
    DELETE = 'Delete'
    MODIFY = 'Modify'
    KEEP = 'Keep'


@dataclass(frozen=True)
class Edit:
    op: EditOp
    target_id: Optional[int] = None
    text: Optional[str] = None

    def as_dict(self) -> dict:
        data: dict[str, Any] = {'op': self.op.value}
        if self.target_id is not None:
            data['target_id'] = self.target_id
        if self.text is not None:
            data['text'] = self.text
        return data


@dataclass(frozen=True)
class JudgeVerdict:
    advantage_text: str
    edits: tuple[Edit, ...] = ()
    diagnostic: Optional[str] = None

    @classmethod
    def noop(cls, diagnostic: str) -> JudgeVerdict:
        return cls(advantage_text='', edits=(Edit(EditOp.KEEP),), diagnostic=diagnostic)

    def as_dict(self) -> dict:
        return {
            'advantage_text': self.advantage_text,
            'edits': [e.as_dict() for e in self.edits],
            'diagnostic': self.diagnostic,
        }

    @classmethod
    def from_dict(cls, data: dict) -> JudgeVerdict:
        edits = tuple(Edit(EditOp(e['op']), e.get('target_id'), e.get('text'))
                      for e in data.get('edits', []))
        return cls(data.get('advantage_text', ''), edits, data.get('diagnostic'))


@dataclass(frozen=True)
class ExperienceEntry:
    id: int
    text: str
    created_epoch: int
    last_modified_epoch: int
    provenance: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"Experience entry {self.id} has empty text")

    def as_dict(self) -> dict:
        return {
            'id': self.id,
            'text': self.text,
            'created_epoch': self.created_epoch,
            'last_modified_epoch': self.last_modified_epoch,
            'provenance': [list(p) for p in self.provenance],
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperienceEntry:
        return cls(int(data['id']), data['text'], int(data['created_epoch']),
                   int(data['last_modified_epoch']),
                   tuple(tuple(p) for p in data.get('provenance', [])))


@dataclass(frozen=True)
class ExperienceLibrary:
    entries: tuple[ExperienceEntry, ...] = ()
    version: int = 0
    next_id: int = 1
    max_entries: int = DEFAULT_MAX_ENTRIES

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def get(self, entry_id: int) -> Optional[ExperienceEntry]:
        return next((e for e in self.entries if e.id == entry_id), None)

    def as_dict(self) -> dict:
        return {
            'version': self.version,
            'next_id': self.next_id,
            'max_entries': self.max_entries,
            'entries': [e.as_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperienceLibrary:
        entries = tuple(ExperienceEntry.from_dict(e) for e in data.get('entries', []))
        next_id = data.get('next_id', max((e.id for e in entries), default=0) + 1)
        return cls(entries, int(data.get('version', 0)), int(next_id),
                   int(data.get('max_entries', DEFAULT_MAX_ENTRIES)))


def apply_verdict(library: ExperienceLibrary, verdict: JudgeVerdict, epoch: int = 0,
                  provenance: Sequence[ContrastivePair] = (),
                  events: Optional[list] = None) -> ExperienceLibrary:
    """Apply edits in order; version grows by one per applied edit.

    An Add beyond max_entries is rejected and reported through the log and
    the optional events list.
    """
    entries = list(library.entries)
    version = library.version
    next_id = library.next_id
    refs = tuple((p.better, p.worse) for p in provenance)

    def reject(edit: Edit, reason: str):
        logger.warning("Rejected %s edit (epoch %d): %s", edit.op.value, epoch, reason)
        if events is not None:
            events.append({'event': 'rejected', 'edit': edit.as_dict(), 'reason': reason})

    for edit in verdict.edits:
        if edit.op is EditOp.KEEP:
            continue
        if edit.op is EditOp.ADD:
            if len(entries) >= library.max_entries:
                reject(edit, f"library is at capacity ({library.max_entries} entries)")
                continue
            entries.append(ExperienceEntry(next_id, edit.text, epoch, epoch, refs))
            next_id += 1
        else:
            index = next((i for i, e in enumerate(entries) if e.id == edit.target_id), None)
            if index is None:
                reject(edit, f"no entry with id {edit.target_id}")
                continue
            if edit.op is EditOp.DELETE:
                del entries[index]
            else:
                old = entries[index]
                entries[index] = replace(old, text=edit.text, last_modified_epoch=epoch,
                                         provenance=old.provenance + refs)
        version += 1

    return ExperienceLibrary(tuple(entries), version, next_id, library.max_entries)


def render_experience(library: ExperienceLibrary) -> str:
    """Numbered list of entry texts; empty string for an empty library."""
    return '\n'.join(f"{i}. {entry.text}" for i, entry in enumerate(library.entries, 1))


def replay_verdicts(verdict_log: Iterable[dict],
                    max_entries: int = DEFAULT_MAX_ENTRIES) -> ExperienceLibrary:
    """Rebuild a library by applying logged verdicts to an empty library."""
    library = ExperienceLibrary(max_entries=max_entries)
    for entry in verdict_log:
        pair = ContrastivePair.from_dict(entry['pair'])
        library = apply_verdict(library, JudgeVerdict.from_dict(entry), int(entry['epoch']), (pair,))
    return library


# --------------------------------------------------------------------------- #
# Rollouts
# --------------------------------------------------------------------------- #

@dataclass
class Pipeline:
    """Everything a rollout or judge call needs."""

    llm: LlmConfig
    system_prompt: str
    provider: Provider
    rig: CameraRig
    scorer: Scorer
    limits: ParserLimits = field(default_factory=ParserLimits)
    store: Optional[RunStore] = None
    render_jobs: int = 1
    judge_temperature: float = INFERENCE_TEMPERATURE


def _failed(runid, prompt, response, epoch, group_index, error_kind) -> RolloutRecord:
    return RolloutRecord(runid, prompt, response, None, RewardScore.parse_failure(),
                         0, False, epoch, group_index, error_kind)


def rollout_group(task_prompt: str, k: int, pipeline: Pipeline, epoch: int,
                  first_runid: int = 0, experience: str = '') -> list[RolloutRecord]:
    """K generations for one prompt, parsed, rendered and scored.

    Gateway failures and truncated replies become parse failures with
    reward 0.0. All records are persisted before returning.
    """
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")

    results = generate_many(pipeline.llm, pipeline.system_prompt, [task_prompt] * k,
                            experience or None, pipeline.provider, stream='rollout')
    records = []
    for group_index, result in enumerate(results):
        runid = first_runid + group_index
        if isinstance(result, GatewayError):
            logger.warning("Rollout %d: gateway failure: %s", runid, result)
            records.append(_failed(runid, task_prompt, '', epoch, group_index, 'GatewayError'))
            continue
        if result.truncated:
            records.append(_failed(runid, task_prompt, result.raw, epoch, group_index, 'Truncated'))
            continue
        try:
            doc = parse(result.raw, pipeline.limits)
        except ParseError as e:
            logger.debug("Rollout %d: %s", runid, e)
            records.append(_failed(runid, task_prompt, result.raw, epoch, group_index, e.kind.value))
            continue

        views = render(doc.sketch, pipeline.rig, jobs=pipeline.render_jobs)
        score = pipeline.scorer.score(doc.sketch, views, task_prompt)
        logger.debug("Rollout %d: %d curves, reward %.4f", runid, doc.sketch.curve_count, score.value)
        records.append(RolloutRecord(runid, task_prompt, result.raw, doc.sketch, score,
                                     doc.sketch.curve_count, True, epoch, group_index))

    if pipeline.store is not None:
        pipeline.store.append_rollouts([r.as_dict() for r in records])
    logger.info("Epoch %d, %r: %d/%d parsed, rewards %s", epoch, task_prompt,
                sum(r.parse_ok for r in records), k,
                ', '.join(f"{r.reward.value:.3f}" for r in records))
    return records


# --------------------------------------------------------------------------- #
# Judge
# --------------------------------------------------------------------------- #

def _extract_json(text: str) -> dict:
    """Parse the fenced JSON block of a judge reply (or the whole reply)."""
    fence = re.search(r"```(?:json)?\s*\n(.*?)\n\s*```", text, re.DOTALL)
    if fence:
        text = fence.group(1)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise JudgeError(f"Judge reply is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise JudgeError("Judge reply must be a JSON object")
    return data


def _validate_verdict(data: dict, library: ExperienceLibrary) -> JudgeVerdict:
    """Check edit shapes and that Delete/Modify targets exist when applied in order."""
    advantage = data.get('advantage_text')
    if not isinstance(advantage, str):
        raise JudgeError("Verdict needs a string 'advantage_text'")
    raw_edits = data.get('edits', [])
    if not isinstance(raw_edits, list):
        raise JudgeError("Verdict 'edits' must be a list")

    live_ids = set(library.ids())
    next_id = library.next_id
    edits = []
    for position, raw in enumerate(raw_edits):
        if not isinstance(raw, dict):
            raise JudgeError(f"Edit {position} is not an object")
        try:
            op = EditOp(raw.get('op'))
        except ValueError:
            raise JudgeError(f"Edit {position} has unknown op {raw.get('op')!r}")
        target = raw.get('target_id')
        text = raw.get('text')
        if target is not None and (isinstance(target, bool) or not isinstance(target, int)):
            raise JudgeError(f"Edit {position}: target_id must be an integer")
        if text is not None and (not isinstance(text, str) or not text.strip()):
            raise JudgeError(f"Edit {position}: text must be a non-empty string")

        if op is EditOp.ADD:
            if text is None or target is not None:
                raise JudgeError(f"Edit {position}: Add carries text and no target_id")
            live_ids.add(next_id)
            next_id += 1
        elif op is EditOp.KEEP:
            if text is not None or target is not None:
                raise JudgeError(f"Edit {position}: Keep carries neither text nor target_id")
        else:
            if target not in live_ids:
                raise JudgeError(f"Edit {position}: {op.value} targets unknown id {target}")
            if op is EditOp.MODIFY and text is None:
                raise JudgeError(f"Edit {position}: Modify needs replacement text")
            if op is EditOp.DELETE:
                if text is not None:
                    raise JudgeError(f"Edit {position}: Delete carries no text")
                live_ids.discard(target)
        edits.append(Edit(op, target, text.strip() if text else None))

    return JudgeVerdict(advantage_text=advantage, edits=tuple(edits))


def _sketch_text(record: RolloutRecord) -> str:
    return serialize(record.parsed) if record.parse_ok and record.parsed else record.response


def judge(pair: ContrastivePair, records: Sequence[RolloutRecord], library: ExperienceLibrary,
          task_prompt: str, pipeline: Pipeline) -> JudgeVerdict:
    """Ask the LLM why the better rollout wins and how the library should change.

    Any failure (transport, truncation, malformed or invalid JSON) yields an
    all-Keep verdict with a diagnostic.
    """
    by_id = {r.runid: r for r in records}
    better, worse = by_id[pair.better], by_id[pair.worse]
    prompt = render_template(
        JUDGE_TEMPLATE,
        task_prompt=task_prompt,
        better_reward=better.reward.value,
        worse_reward=worse.reward.value,
        better_text=_sketch_text(better),
        worse_text=_sketch_text(worse),
        worse_failed=not worse.parse_ok,
        entries=[{'id': e.id, 'text': e.text} for e in library.entries],
        max_entries=library.max_entries,
    )

    config = pipeline.llm.with_temperature(pipeline.judge_temperature)
    try:
        transcript = generate(config, JUDGE_SYSTEM_PROMPT, prompt, provider=pipeline.provider,
                              stream='judge')
        if transcript.truncated:
            raise JudgeError("Judge reply was truncated")
        return _validate_verdict(_extract_json(transcript.raw), library)
    except (GatewayError, JudgeError) as e:
        logger.warning("Judge verdict for pair %d>%d discarded: %s", pair.better, pair.worse, e)
        return JudgeVerdict.noop(diagnostic=str(e))


# --------------------------------------------------------------------------- #
# Epoch loop
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ExtractionSettings:
    k: int = DEFAULT_K
    delta: float = DEFAULT_DELTA
    max_pairs: int = DEFAULT_MAX_PAIRS
    max_entries: int = DEFAULT_MAX_ENTRIES
    pairing: str = 'contrastive'
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"K must be >= 2, got {self.k}")
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.pairing not in PAIRING_MODES:
            raise ValueError(f"pairing must be one of {PAIRING_MODES}, got {self.pairing!r}")

    def as_dict(self) -> dict:
        return {'k': self.k, 'delta': self.delta, 'max_pairs': self.max_pairs,
                'max_entries': self.max_entries, 'pairing': self.pairing, 'seed': self.seed}


def _pairs_for(group, settings: ExtractionSettings, epoch: int, task_index: int):
    if settings.pairing == 'random':
        rng = random.Random(f"{settings.seed}:{epoch}:{task_index}")
        return make_random_pairs(group, settings.max_pairs, rng)
    return make_pairs(group, settings.delta, settings.max_pairs)


def _provider_state(provider) -> Optional[dict]:
    state_dict = getattr(provider, 'state_dict', None)
    return state_dict() if callable(state_dict) else None


def run_epochs(task_prompts: Sequence[str], epochs: int, settings: ExtractionSettings,
               pipeline: Pipeline, resume: bool = False) -> tuple[ExperienceLibrary, dict]:
    """Run the extraction loop; returns the final library and a run report.

    With resume=True and a saved run state, logs are cut back to the last
    completed epoch, the library is rebuilt from the verdict log and the
    mock provider's cursors are restored before continuing.
    """
    if not task_prompts:
        raise ValueError("run_epochs needs at least one task prompt")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    store = pipeline.store

    library = ExperienceLibrary(max_entries=settings.max_entries)
    next_runid = 0
    start_epoch = 0
    epoch_rows: list[dict] = []

    state = store.load_state() if (store is not None and resume) else None
    if state is not None:
        start_epoch = int(state['completed_epochs'])
        store.truncate_after_epoch(start_epoch)
        library = replay_verdicts(store.read_verdicts(), settings.max_entries)
        next_runid = int(state['next_runid'])
        epoch_rows = list(state.get('epoch_rows', []))
        if state.get('provider_state') and hasattr(pipeline.provider, 'load_state'):
            pipeline.provider.load_state(state['provider_state'])
        logger.info("Resuming after epoch %d with library version %d", start_epoch, library.version)
    elif store is not None:
        store.reset()
    if store is not None:
        store.save_library(library.as_dict())

    for epoch in range(start_epoch, epochs):
        epoch_records: list[RolloutRecord] = []
        pair_count = 0
        version_before = library.version
        skipped = []

        for task_index, task_prompt in enumerate(task_prompts):
            try:
                # Rollouts see the library as of the start of their group
                group = rollout_group(task_prompt, settings.k, pipeline, epoch, next_runid,
                                      render_experience(library))
                next_runid += settings.k
                epoch_records.extend(group)

                for pair in _pairs_for(group, settings, epoch, task_index):
                    pair_count += 1
                    verdict = judge(pair, group, library, task_prompt, pipeline)
                    events: list = []
                    library = apply_verdict(library, verdict, epoch, (pair,), events)
                    if store is not None:
                        store.append_verdict({
                            'epoch': epoch,
                            'prompt': task_prompt,
                            'pair': pair.as_dict(),
                            **verdict.as_dict(),
                            'events': events,
                            'library_version': library.version,
                        })
                        store.save_library(library.as_dict())
            except Exception as e:
                logger.error("Epoch %d: task %r failed and was skipped: %s: %s",
                             epoch, task_prompt, type(e).__name__, e)
                skipped.append(task_prompt)

        rewards = [r.reward.value for r in epoch_records]
        row = {
            'epoch': epoch,
            'mean_reward': sum(rewards) / len(rewards) if rewards else 0.0,
            'rollouts': len(epoch_records),
            'parsed': sum(r.parse_ok for r in epoch_records),
            'pairs': pair_count,
            'applied_edits': library.version - version_before,
            'library_size': len(library.entries),
            'library_version': library.version,
            'skipped_tasks': skipped,
            'stats': rollout_stats(epoch_records).as_dict() if epoch_records else None,
        }
        epoch_rows.append(row)
        logger.info("Epoch %d done: mean reward %.4f, %d pairs, %d edits applied, library %d entries",
                    epoch, row['mean_reward'], pair_count, row['applied_edits'], row['library_size'])

        if store is not None:
            store.save_state({
                'completed_epochs': epoch + 1,
                'next_runid': next_runid,
                'epoch_rows': epoch_rows,
                'provider_state': _provider_state(pipeline.provider),
            })

    if store is not None:
        all_records = [RolloutRecord.from_dict(r, pipeline.limits) for r in store.read_rollouts()]
    else:
        all_records = []
    report = {
        'settings': settings.as_dict(),
        'epochs': epoch_rows,
        'stats': rollout_stats(all_records).as_dict() if all_records else None,
        'library': {'size': len(library.entries), 'version': library.version},
    }
    return library, report
