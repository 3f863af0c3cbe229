"""Rollout statistics for extraction runs.

Four views of a batch of rollouts:
  - mean pairwise curve similarity inside each parsed rollout
  - curve-count histogram (bins of 16 curves, parsed rollouts only)
  - reward histogram (bins of width 0.05, keyed by lower edge, all rollouts)
  - bracket-matching rate over every raw response

Pure functions over rollout records; cheap to import and unit-test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

from scripts.curves import pairwise_curve_similarity
from scripts.sketch_text import bracket_match_rate

if TYPE_CHECKING:  # avoid a circular import with scripts.cke
    from scripts.cke import RolloutRecord


REWARD_BIN_WIDTH = 0.05
CURVE_BIN_WIDTH = 16


# --------------------------------------------------------------------------- #
# Binning
# --------------------------------------------------------------------------- #

def reward_bin(reward: float) -> str:
    """Lower edge of the 0.05-wide bin holding reward, as 'x.xx'.

    The ratio is rounded before flooring so edges like 0.65 land in their
    own bin rather than the one below.
    """
    index = math.floor(round(reward / REWARD_BIN_WIDTH, 9))
    return f"{index * REWARD_BIN_WIDTH:.2f}"


def curve_bin(count: int) -> str:
    lo = (count // CURVE_BIN_WIDTH) * CURVE_BIN_WIDTH
    return f"{lo}-{lo + CURVE_BIN_WIDTH - 1}"


def _sorted_histogram(counts: dict[str, int], key) -> dict[str, int]:
    return {k: counts[k] for k in sorted(counts, key=key)}


def histogram_mass(histogram: dict[str, int], lo: float, hi: float) -> int:
    """Total count in reward bins whose lower edge lies in [lo, hi)."""
    return sum(n for edge, n in histogram.items()
               if lo - 1e-9 <= float(edge) < hi - 1e-9)


# --------------------------------------------------------------------------- #
# Stats
# --------------------------------------------------------------------------- #

@dataclass
class RolloutStats:
    """Statistics over one batch of rollouts."""

    rollouts: int
    parsed: int
    similarity_per_rollout: dict[int, float] = field(default_factory=dict)
    similarity_mean: float = 0.0
    curve_count_histogram: dict[str, int] = field(default_factory=dict)
    reward_histogram: dict[str, int] = field(default_factory=dict)
    bracket_match_rate: float = 0.0
    mean_reward: float = 0.0

    def as_dict(self) -> dict:
        return {
            "rollouts": self.rollouts,
            "parsed": self.parsed,
            "mean_reward": self.mean_reward,
            "similarity_mean": self.similarity_mean,
            "similarity_per_rollout": {str(k): v for k, v in self.similarity_per_rollout.items()},
            "curve_count_histogram": self.curve_count_histogram,
            "reward_histogram": self.reward_histogram,
            "bracket_match_rate": self.bracket_match_rate,
        }


def rollout_stats(records: Sequence["RolloutRecord"] | Iterable["RolloutRecord"]) -> RolloutStats:
    """Compute the four rollout statistics.

    Raises:
        ValueError: If records is empty
    """
    records = list(records)
    if not records:
        raise ValueError("rollout_stats needs at least one record")

    similarity = {}
    curve_counts: dict[str, int] = {}
    for record in records:
        if not record.parse_ok or record.parsed is None:
            continue
        similarity[record.runid] = pairwise_curve_similarity(record.parsed)
        label = curve_bin(record.curve_count)
        curve_counts[label] = curve_counts.get(label, 0) + 1

    rewards: dict[str, int] = {}
    for record in records:
        label = reward_bin(record.reward.value)
        rewards[label] = rewards.get(label, 0) + 1

    return RolloutStats(
        rollouts=len(records),
        parsed=sum(1 for r in records if r.parse_ok),
        similarity_per_rollout=similarity,
        similarity_mean=(sum(similarity.values()) / len(similarity)) if similarity else 0.0,
        curve_count_histogram=_sorted_histogram(curve_counts, key=lambda k: int(k.split('-')[0])),
        reward_histogram=_sorted_histogram(rewards, key=float),
        bracket_match_rate=bracket_match_rate(r.response for r in records),
        mean_reward=sum(r.reward.value for r in records) / len(records),
    )
