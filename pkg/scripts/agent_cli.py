#!/usr/bin/env python3
"""
Command-line entry point for the sketch agent.

Commands:
- generate: one Pass@1 generation at the inference temperature, saved as
            sketch text, 16 PNG views, transcript and score
- extract:  experience extraction epochs over a prompt set
- render:   16 PNG views of a sketch file
- score:    reward of a sketch file for a prompt (JSON on stdout)
- stats:    rollout statistics of a rollout log (JSON on stdout)

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 sketch parse failure, 4 LLM or embedding service failure.

API keys are read from LLM_API_KEY / EMBED_API_KEY (environment or .env),
never from flags.

Usage examples:
    agent_cli.py generate --prompt "a chair" --curves 16 --out out/chair
    agent_cli.py extract --config run.toml --scorer proxy --mock-script tests/fixtures/cke_mock_script.json --seed 7
    agent_cli.py render sketch.curves.txt --out out/views
    agent_cli.py score sketch.curves.txt --prompt "a chair" --scorer service
    agent_cli.py stats out/run/rollouts.jsonl
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

_ROOT = Path(__file__).resolve().parent.parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

from evaluation.report import write_report
from evaluation.rollout_stats import rollout_stats
from scripts.cke import ExperienceLibrary, Pipeline, RolloutRecord, render_experience, run_epochs
from scripts.config import ConfigError, RunConfig, load_run_config, print_config_error
from scripts.curves import Sketch
from scripts.llm_gateway import (
    GatewayError,
    MockScriptError,
    SystemPromptSpec,
    build_system_prompt,
    generate,
    load_mock_script,
    make_provider,
)
from scripts.log_sanitizer import setup_logging
from scripts.renderer import ExportError, default_rig, export_views, load_png, render
from scripts.reward import (
    EmbeddingServiceConfig,
    EmbeddingServiceError,
    ImageEmbeddingScorer,
    PromptTemplate,
    ProxyScorer,
    TextEmbeddingScorer,
)
from scripts.run_store import RunStore, StoreError, dump_json
from scripts.sketch_text import ParseError, ParseErrorKind, ParserLimits, parse, serialize

logger = logging.getLogger('agent_cli')

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_SERVICE = 4

SKETCH_FILE = 'sketch.curves.txt'
TRANSCRIPT_FILE = 'transcript.json'
SCORE_FILE = 'score.json'
DEFAULT_TASKS = Path('prompts') / 'tasks.txt'


# --------------------------------------------------------------------------- #
# Wiring helpers
# --------------------------------------------------------------------------- #

def load_task_prompts(path: Path) -> list[str]:
    """One prompt per line; blank lines and # comments are skipped."""
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    prompts = [line.strip() for line in lines if line.strip() and not line.lstrip().startswith('#')]
    if not prompts:
        raise ConfigError(f"Prompt set {path} contains no prompts")
    return prompts


def build_rig(config: RunConfig):
    rig = config.rig
    return default_rig(rig.radius, rig.elevations, rig.focal_px, rig.canvas, rig.bound)


def build_scorer(config: RunConfig, jobs: int):
    if config.scorer.kind == 'proxy':
        return ProxyScorer(bound=config.rig.bound)
    svc = EmbeddingServiceConfig(
        base_url=config.scorer.service_url,
        timeout=config.scorer.timeout,
        max_retries=config.scorer.max_retries,
        fan_out=max(1, jobs),
    )
    if config.scorer.reference_image is not None:
        return ImageEmbeddingScorer(svc, load_png(config.scorer.reference_image))
    return TextEmbeddingScorer(svc, PromptTemplate(config.scorer.template), config.scorer.use_template)


def build_provider(config: RunConfig):
    if config.mock_script is not None:
        return load_mock_script(config.mock_script)
    return make_provider(config.llm)


def _system_prompt(config: RunConfig) -> str:
    return build_system_prompt(SystemPromptSpec.default(curve_budget=config.curve_budget))


def _read_sketch(path: Path, allow_empty: bool = False) -> Sketch:
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"Could not read sketch file {path}: {e}")
    try:
        return parse(text).sketch
    except ParseError as e:
        if allow_empty and e.kind is ParseErrorKind.EMPTY_SKETCH:
            return Sketch()
        raise


def _overrides(args) -> dict:
    def absolute(value):
        return str(Path(value).resolve()) if value else None

    return {
        'scorer': getattr(args, 'scorer', None),
        'mock_script': absolute(getattr(args, 'mock_script', None)),
        'seed': getattr(args, 'seed', None),
        'jobs': getattr(args, 'jobs', None),
        'out': absolute(getattr(args, 'out', None)),
        'curves': getattr(args, 'curves', None),
        'epochs': getattr(args, 'epochs', None),
        'library': absolute(getattr(args, 'library', None)),
        'prompt_set': absolute(getattr(args, 'prompt_set', None)),
        'reference_image': absolute(getattr(args, 'reference_image', None)),
    }


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #

def cmd_generate(args, config: RunConfig) -> int:
    out_dir = config.out_dir
    provider = build_provider(config)
    experience = ''
    if config.library_path is not None:
        library = ExperienceLibrary.from_dict(json.loads(config.library_path.read_text(encoding='utf-8')))
        experience = render_experience(library)

    # Pass@1: the first attempt is the result
    llm = config.llm.with_temperature(config.inference_temperature)
    transcript = generate(llm, _system_prompt(config), args.prompt, experience or None,
                          provider, stream='rollout')
    transcript_path = out_dir / TRANSCRIPT_FILE
    transcript_path.write_text(dump_json(transcript.as_dict()), encoding='utf-8')

    limits = ParserLimits(bound=config.rig.bound, strict=True, expected_curves=config.curve_budget)
    try:
        doc = parse(transcript.raw, limits)
    except ParseError as e:
        print(f"ERROR: {e}\nTranscript saved to {transcript_path}", file=sys.stderr)
        return EXIT_PARSE
    for warning in doc.warnings:
        logger.warning("Sketch warning: %s on curve %d", warning.kind.value, warning.curve_index)

    (out_dir / SKETCH_FILE).write_text(serialize(doc.sketch) + '\n', encoding='utf-8')
    views = render(doc.sketch, build_rig(config), jobs=config.jobs)
    export_views(views, out_dir)
    score = build_scorer(config, config.jobs).score(doc.sketch, views, args.prompt)
    (out_dir / SCORE_FILE).write_text(dump_json({
        'prompt': args.prompt,
        'curve_count': doc.sketch.curve_count,
        'warnings': [{'kind': w.kind.value, 'curve_index': w.curve_index} for w in doc.warnings],
        **score.as_dict(),
    }), encoding='utf-8')
    print(f"Generated {doc.sketch.curve_count} curves, reward {score.value:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_extract(args, config: RunConfig) -> int:
    if args.prompt:
        prompts = list(args.prompt)
    else:
        prompts = load_task_prompts(config.prompt_set or config.project_root / DEFAULT_TASKS)

    rig = build_rig(config)
    pipeline = Pipeline(
        llm=config.llm,
        system_prompt=_system_prompt(config),
        provider=build_provider(config),
        rig=rig,
        scorer=build_scorer(config, config.jobs),
        limits=ParserLimits(bound=config.rig.bound, expected_curves=config.curve_budget),
        store=RunStore(config.out_dir),
        render_jobs=config.jobs,
        judge_temperature=config.inference_temperature,
    )
    library, report = run_epochs(prompts, config.epochs, config.cke, pipeline, resume=args.resume)
    _, md_path = write_report(report, config.out_dir)

    for row in report['epochs']:
        print(f"Epoch {row['epoch']}: mean reward {row['mean_reward']:.4f}, "
              f"{row['pairs']} pairs, {row['applied_edits']} edits, library {row['library_size']}")
    print(f"Library version {library.version} with {len(library.entries)} entries; "
          f"report: {md_path}")
    return EXIT_OK


def cmd_render(args, config: RunConfig) -> int:
    sketch = _read_sketch(args.sketch_file, allow_empty=True)
    paths = export_views(render(sketch, build_rig(config), jobs=config.jobs), config.out_dir)
    print(f"Rendered {len(paths)} views -> {config.out_dir}")
    return EXIT_OK


def cmd_score(args, config: RunConfig) -> int:
    sketch = _read_sketch(args.sketch_file, allow_empty=True)
    views = render(sketch, build_rig(config), jobs=config.jobs)
    score = build_scorer(config, config.jobs).score(sketch, views, args.prompt)
    sys.stdout.write(dump_json({'prompt': args.prompt, **score.as_dict()}))
    return EXIT_OK


def _rollout_records(log_path: Path) -> list[RolloutRecord]:
    """Load a rollout log, naming the first record that is not usable."""
    records = []
    for number, data in enumerate(RunStore(log_path.parent).read_jsonl(log_path), start=1):
        if not isinstance(data, dict):
            raise ConfigError(f"Rollout log {log_path}, record {number}: expected a JSON object")
        missing = [name for name in RunStore.ROLLOUT_FIELDS if name not in data]
        if missing:
            raise ConfigError(f"Rollout log {log_path}, record {number}: missing {', '.join(missing)}\n"
                              f"  Rollout lines need: {', '.join(RunStore.ROLLOUT_FIELDS)}")
        try:
            records.append(RolloutRecord.from_dict(data))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Rollout log {log_path}, record {number}: {e}") from e
    return records


def cmd_stats(args, config: RunConfig) -> int:
    log_path = Path(args.rollout_log)
    if not log_path.is_file():
        raise ConfigError(f"Rollout log {log_path} does not exist")
    records = _rollout_records(log_path)
    if not records:
        raise ConfigError(f"Rollout log {args.rollout_log} contains no records")
    sys.stdout.write(dump_json(rollout_stats(records).as_dict()))
    return EXIT_OK


COMMANDS = {
    'generate': cmd_generate,
    'extract': cmd_extract,
    'render': cmd_render,
    'score': cmd_score,
    'stats': cmd_stats,
}


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help="TOML run config")
    common.add_argument('--out', default=None, help="Output directory")
    common.add_argument('--jobs', type=int, default=None,
                        help="Bound on concurrent renders and network calls")
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--log-dir', default=None, help="Also write agent.log here")
    common.add_argument('-v', '--verbose', action='store_true')

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument('--scorer', choices=['service', 'proxy'], default=None)
    scoring.add_argument('--reference-image', default=None,
                         help="Score by image similarity to this PNG instead of the prompt")

    llm = argparse.ArgumentParser(add_help=False)
    llm.add_argument('--mock-script', default=None, help="Replay LLM responses from this JSON script")
    llm.add_argument('--curves', type=int, default=None, help="Ask for exactly N curves")

    parser = argparse.ArgumentParser(
        description="3D Bezier sketch agent with contrastive experience extraction.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', parents=[common, scoring, llm], help="One Pass@1 generation")
    p.add_argument('--prompt', required=True)
    p.add_argument('--library', default=None, help="Experience library JSON to inject")

    p = sub.add_parser('extract', parents=[common, scoring, llm], help="Run extraction epochs")
    p.add_argument('--prompt', action='append', default=None,
                   help="Task prompt (repeatable; default: the config prompt set)")
    p.add_argument('--prompt-set', default=None, help="File with one prompt per line")
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--resume', action='store_true', help="Continue after the last completed epoch")

    p = sub.add_parser('render', parents=[common], help="Render 16 views of a sketch file")
    p.add_argument('sketch_file', type=Path)

    p = sub.add_parser('score', parents=[common, scoring], help="Score a sketch file")
    p.add_argument('sketch_file', type=Path)
    p.add_argument('--prompt', required=True)

    p = sub.add_parser('stats', parents=[common], help="Statistics of a rollout log")
    p.add_argument('rollout_log', type=Path)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    from scripts.dependencies import check_dependencies
    check_dependencies()

    args = build_parser().parse_args(argv)
    setup_logging(Path(args.log_dir) if args.log_dir else None, verbose=args.verbose)

    try:
        config = load_run_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        print_config_error(str(e))
        return EXIT_CONFIG
    except MockScriptError as e:
        print_config_error(f"Invalid mock script: {e}")
        return EXIT_CONFIG
    except ParseError as e:
        print(f"ERROR: sketch parse failed: {e.kind.value} at byte {e.position}: {e.detail}",
              file=sys.stderr)
        return EXIT_PARSE
    except (GatewayError, EmbeddingServiceError) as e:
        print(f"ERROR: service failure: {e}", file=sys.stderr)
        return EXIT_SERVICE
    except (StoreError, ExportError, OSError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
