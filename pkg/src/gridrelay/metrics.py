"""Specialization and fairness analytics over run artifacts.

The specialization index of an agent is |t1 - t2| / (t1 + t2) over its
task counts: 0 means it split its work evenly, 1 means it only ever did
one of the two tasks. An agent with no completed tasks scores 0, which
reads "did nothing" as "not specialized".
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


class ArtifactError(ValueError):
    """A run artifact is missing or malformed."""


def specialization(t1: int, t2: int) -> float:
    if t1 < 0 or t2 < 0:
        raise ValueError("task counts must be non-negative")
    total = t1 + t2
    if total == 0:
        return 0.0
    return abs(t1 - t2) / total


def population_specialization(counts: list[tuple[int, int]]) -> float:
    """Unweighted mean of per-agent specialization over aggregated counts."""
    if not counts:
        raise ValueError("need at least one agent")
    return float(sum(specialization(t1, t2) for t1, t2 in counts) / len(counts))


def jain_fairness(x) -> float:
    """Jain index (sum x)^2 / (n * sum x^2) over non-negative totals."""
    xs = [float(v) for v in x]
    if not xs:
        raise ValueError("need at least one value")
    if any(v < 0 for v in xs):
        raise ValueError("fairness requires non-negative totals")
    sq = sum(v * v for v in xs)
    if sq == 0.0:
        raise ValueError("fairness undefined for all-zero totals")
    s = sum(xs)
    return (s * s) / (len(xs) * sq)


# ----------------------------------------------------------------------
# reading run artifacts
# ----------------------------------------------------------------------

@dataclass
class EpisodeRow:
    episode: int
    agent_id: int
    reward: float
    task1: int
    task2: int
    exploration: float
    steps: int


def read_episodes_csv(path: str | Path) -> list[EpisodeRow]:
    """Parse episodes.csv; malformed rows are reported with line numbers."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing episodes.csv: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["episode", "agent_id", "reward", "task1", "task2", "exploration", "steps"]:
            raise ArtifactError(f"{path}: unexpected header {header}")
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append(
                    EpisodeRow(
                        episode=int(row[0]),
                        agent_id=int(row[1]),
                        reward=float(row[2]),
                        task1=int(row[3]),
                        task2=int(row[4]),
                        exploration=float(row[5]),
                        steps=int(row[6]),
                    )
                )
            except (ValueError, IndexError) as exc:
                raise ArtifactError(f"{path}: malformed row at line {line_no}: {exc}") from exc
    return rows


def read_summary(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise ArtifactError(f"missing summary.json in {run_dir}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: invalid JSON: {exc}") from exc


def windowed_population_specialization(
    rows: list[EpisodeRow], window: int | None = None
) -> float:
    """Population specialization from raw episode rows.

    ``window`` keeps only the trailing ``window`` episodes before
    aggregating counts per agent (None aggregates the whole run).
    """
    if not rows:
        raise ValueError("no episode rows")
    if window is not None:
        last = max(r.episode for r in rows)
        rows = [r for r in rows if r.episode > last - window]
    counts: dict[int, list[int]] = {}
    for r in rows:
        c = counts.setdefault(r.agent_id, [0, 0])
        c[0] += r.task1
        c[1] += r.task2
    return population_specialization([(c[0], c[1]) for c in counts.values()])


# ----------------------------------------------------------------------
# cross-run aggregation
# ----------------------------------------------------------------------

@dataclass
class AnalyzeGroup:
    agents: int
    bottleneck: int | str | None
    specs: list[float] = field(default_factory=list)
    fairness: list[float] = field(default_factory=list)

    @property
    def mean_spec(self) -> float:
        return sum(self.specs) / len(self.specs)

    @property
    def std_spec(self) -> float:
        n = len(self.specs)
        if n < 2:
            return 0.0
        mu = self.mean_spec
        return math.sqrt(sum((s - mu) ** 2 for s in self.specs) / (n - 1))

    @property
    def mean_fairness(self) -> float | None:
        if not self.fairness:
            return None
        return sum(self.fairness) / len(self.fairness)


def analyze(
    run_dirs: list[str | Path], window: int | None = None
) -> tuple[list[AnalyzeGroup], list[str]]:
    """Group runs by (agent count, bottleneck) and average across seeds.

    Returns (groups sorted by agents then bottleneck, per-run errors).
    Broken runs are skipped with an error entry; the rest aggregate.
    std is the sample standard deviation (0 for a single seed).
    """
    groups: dict[tuple, AnalyzeGroup] = {}
    errors: list[str] = []
    for run_dir in run_dirs:
        try:
            summary = read_summary(run_dir)
            agents = int(summary["config"]["env"]["n_agents"])
            bneck = summary["config"]["env"]["bottleneck"]
            if window is None:
                spec = float(summary["population"]["mean_specialization"])
            else:
                rows = read_episodes_csv(Path(run_dir) / "episodes.csv")
                spec = windowed_population_specialization(rows, window)
            fairness = summary["population"]["fairness"]
        except (ArtifactError, KeyError, TypeError) as exc:
            errors.append(f"{run_dir}: {exc}")
            continue
        key = (agents, str(bneck))
        group = groups.setdefault(key, AnalyzeGroup(agents=agents, bottleneck=bneck))
        group.specs.append(spec)
        if fairness is not None:
            group.fairness.append(float(fairness))
    ordered = sorted(groups.values(), key=lambda g: (g.agents, str(g.bottleneck)))
    return ordered, errors


def analyze_csv(groups: list[AnalyzeGroup]) -> str:
    """Comparison table: agents,bottleneck,mean_spec,std_spec,mean_fairness,n_seeds."""
    lines = ["agents,bottleneck,mean_spec,std_spec,mean_fairness,n_seeds"]
    for g in groups:
        fair = "" if g.mean_fairness is None else repr(g.mean_fairness)
        lines.append(
            f"{g.agents},{g.bottleneck},{g.mean_spec!r},{g.std_spec!r},{fair},{len(g.specs)}"
        )
    return "\n".join(lines) + "\n"
