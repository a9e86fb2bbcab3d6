"""Experiment-matrix result table: CSV (round-trippable) and aligned text."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

CSV_COLUMNS = ("controller", "topology", "demand", "truck_share", "n", "mean", "std", "delays")

Cell = Tuple[str, str, str, float]  # controller, topology, demand, truck share


@dataclass
class ResultTable:
    cells: Dict[Cell, List[float]] = field(default_factory=dict)
    controller_order: List[str] = field(default_factory=list)
    topology_order: List[str] = field(default_factory=list)
    demand_order: List[str] = field(default_factory=list)
    share_order: List[float] = field(default_factory=list)

    def add(self, controller: str, topology: str, demand: str, share: float,
            delays: Sequence[float]) -> None:
        self.cells[(controller, topology, demand, float(share))] = [float(d) for d in delays]
        for order, value in ((self.controller_order, controller),
                             (self.topology_order, topology),
                             (self.demand_order, demand),
                             (self.share_order, float(share))):
            if value not in order:
                order.append(value)

    def mean(self, controller: str, topology: str, demand: str, share: float = 0.0) -> float:
        return float(np.mean(self.cells[(controller, topology, demand, float(share))]))

    def std(self, controller: str, topology: str, demand: str, share: float = 0.0) -> float:
        d = self.cells[(controller, topology, demand, float(share))]
        return float(np.std(d, ddof=1)) if len(d) > 1 else 0.0

    def _sorted_keys(self) -> List[Cell]:
        def rank(order, v):
            return order.index(v)
        return sorted(self.cells, key=lambda k: (rank(self.share_order, k[3]),
                                                 rank(self.controller_order, k[0]),
                                                 rank(self.demand_order, k[2]),
                                                 rank(self.topology_order, k[1])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for key in self._sorted_keys():
            c, t, d, s = key
            delays = self.cells[key]
            w.writerow([c, t, d, repr(s), len(delays), repr(self.mean(c, t, d, s)),
                        repr(self.std(c, t, d, s)), ";".join(repr(x) for x in delays)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise ValueError("not a result-table CSV")
        table = cls()
        for row in rows[1:]:
            c, t, d, s, n, _, _, delays = row
            values = [float(x) for x in delays.split(";")] if delays else []
            if len(values) != int(n):
                raise ValueError(f"row {c}/{t}/{d}: seed count mismatch")
            table.add(c, t, d, float(s), values)
        return table

    def to_text(self) -> str:
        """One block per truck share: rows are controllers, columns demand x topology."""
        blocks = []
        cols = [(d, t) for d in self.demand_order for t in self.topology_order]
        for s in self.share_order:
            header = ["controller"] + [f"{d}/{t}" for d, t in cols]
            lines = [header]
            for c in self.controller_order:
                line = [c]
                for d, t in cols:
                    key = (c, t, d, s)
                    if key in self.cells:
                        line.append(f"{self.mean(c, t, d, s):.2f} ± {self.std(c, t, d, s):.2f}")
                    else:
                        line.append("-")
                lines.append(line)
            widths = [max(len(r[k]) for r in lines) for k in range(len(header))]
            title = f"average vehicle delay (s), truck share {s:.0%}"
            body = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in lines]
            blocks.append("\n".join([title] + body))
        return "\n\n".join(blocks) + "\n"
