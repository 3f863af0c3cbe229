"""Evaluation helpers for sketch-agent runs.

Rollout statistics (curve similarity, curve-count and reward histograms,
bracket-matching rate) and the JSON/Markdown run report written by
``agent_cli extract``. See evaluation/README.md.
"""
