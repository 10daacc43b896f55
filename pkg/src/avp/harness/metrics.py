"""Success-rate tables in percent, with per-seed breakdowns."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..trajio import METRIC_COLUMNS, metrics_report_text


@dataclass(frozen=True)
class SeedRates:
    seed: int
    instr_rate: float
    pick_rate: float
    place_rate: float
    n_episodes: int

    @property
    def avg_rate(self) -> float:
        return (self.instr_rate + self.pick_rate + self.place_rate) / 3.0

    @classmethod
    def from_results(cls, seed: int, results) -> SeedRates:
        results = list(results)
        if not results:
            return cls(int(seed), 0.0, 0.0, 0.0, 0)
        arr = np.array([(r.instr_ok, r.pick_ok, r.place_ok) for r in results], dtype=np.float64)
        instr, pick, place = 100.0 * arr.mean(axis=0)
        return cls(int(seed), float(instr), float(pick), float(place), len(results))


@dataclass(frozen=True)
class MetricsRow:
    config_name: str
    seeds: tuple

    def _mean(self, key: str) -> float:
        if not self.seeds:
            return 0.0
        return float(np.mean([getattr(s, key) for s in self.seeds]))

    @property
    def instr_rate(self) -> float:
        return self._mean("instr_rate")

    @property
    def pick_rate(self) -> float:
        return self._mean("pick_rate")

    @property
    def place_rate(self) -> float:
        return self._mean("place_rate")

    @property
    def avg_rate(self) -> float:
        return (self.instr_rate + self.pick_rate + self.place_rate) / 3.0


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)
    columns: tuple = tuple(METRIC_COLUMNS)

    def add(self, config_name: str, per_seed: dict) -> MetricsRow:
        """Append a row from ``{seed: [EpisodeResult, ...]}``."""
        row = MetricsRow(config_name, tuple(SeedRates.from_results(s, r) for s, r in sorted(per_seed.items())))
        self.rows.append(row)
        return row

    def row(self, config_name: str) -> MetricsRow:
        for r in self.rows:
            if r.config_name == config_name:
                return r
        raise KeyError(config_name)

    def text(self, extra: dict | None = None) -> str:
        return metrics_report_text(self.rows, extra)

    def summary(self) -> str:
        """Fixed-width plain-text rendering for terminals."""
        name_w = max([len("config")] + [len(r.config_name) for r in self.rows])
        head = f"{'config':<{name_w}}  " + "  ".join(f"{c:>6}" for c in self.columns)
        lines = [head]
        for r in self.rows:
            rates = (r.instr_rate, r.pick_rate, r.place_rate, r.avg_rate)
            lines.append(f"{r.config_name:<{name_w}}  " + "  ".join(f"{x:6.2f}" for x in rates))
        return "\n".join(lines)
