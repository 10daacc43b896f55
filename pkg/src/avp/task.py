"""Pick-and-place task description shared by the simulator and the log formats."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import AVPError

TWO_STAGE = "two_stage"
DIRECT = "direct"


@dataclass(frozen=True)
class TaskSpec:
    """Move the piece at ``source_cell`` to ``target_cell``.

    Cells are location indices: board cells first (row-major, ``j * board_u + i``),
    followed by the off-board staging slots. ``two_stage`` tasks route the piece
    through ``via_cell`` with a release and re-grasp there.
    """

    source_cell: int
    target_cell: int
    waypoint_mode: str = DIRECT
    via_cell: Optional[int] = None

    def __post_init__(self):
        if self.source_cell == self.target_cell:
            raise AVPError("source and target cells must differ")
        if self.waypoint_mode == TWO_STAGE:
            if self.via_cell is None:
                raise AVPError("two-stage task needs a via cell")
        elif self.waypoint_mode == DIRECT:
            if self.via_cell is not None:
                raise AVPError("direct task must not carry a via cell")
        else:
            raise AVPError(f"unknown waypoint mode {self.waypoint_mode!r}")

    @property
    def two_stage(self) -> bool:
        return self.waypoint_mode == TWO_STAGE

    def legs(self) -> list[tuple[int, int]]:
        """(source, target) of each single pick-and-place leg, in order."""
        if self.two_stage:
            return [(self.source_cell, self.via_cell), (self.via_cell, self.target_cell)]
        return [(self.source_cell, self.target_cell)]

    def instruction_id(self, n_locations: int) -> int:
        return self.source_cell * n_locations + self.target_cell

    def to_dict(self) -> dict:
        return {
            "source_cell": self.source_cell,
            "target_cell": self.target_cell,
            "waypoint_mode": self.waypoint_mode,
            "via_cell": self.via_cell,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TaskSpec:
        return cls(
            int(d["source_cell"]),
            int(d["target_cell"]),
            str(d.get("waypoint_mode", DIRECT)),
            None if d.get("via_cell") is None else int(d["via_cell"]),
        )
