"""Loading and validating gridded daily series.

CSV layout: a ``day`` column of integer day indices followed by one column
per site named ``s_<j>_<k>``, where (j, k) are the site's grid coordinates.
Column order fixes site order.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from geomext.errors import DomainError, ParseError, StructuralError

_SITE_RE = re.compile(r"^s_(-?\d+(?:\.\d+)?)_(-?\d+(?:\.\d+)?)$")


@dataclass(frozen=True)
class GridDataset:
    """Daily values at a set of sites for one climate-model run."""

    run_id: int
    sites: np.ndarray  # (d, 2) grid coordinates
    times: np.ndarray  # (n,) strictly increasing day index
    values: np.ndarray  # (n, d)
    allow_negative: bool = field(default=False, repr=False)

    def __post_init__(self):
        sites = np.array(self.sites, dtype=float).reshape(-1, 2)
        times = np.array(self.times, dtype=np.int64).ravel()
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise StructuralError("values must be a 2-D matrix")
        if values.shape[1] != len(sites):
            raise StructuralError(f"{values.shape[1]} value columns but {len(sites)} sites")
        if values.shape[0] != len(times):
            raise StructuralError(f"{values.shape[0]} value rows but {len(times)} days")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            bad = int(np.argmax(np.diff(times) <= 0)) + 1
            raise StructuralError(f"day index not strictly increasing at row {bad} (day {times[bad]})")
        if not np.all(np.isfinite(values)):
            i, j = np.argwhere(~np.isfinite(values))[0]
            raise ParseError(f"non-finite value at row {i}, column {j}")
        if not self.allow_negative and np.any(values < 0):
            i, j = np.argwhere(values < 0)[0]
            raise StructuralError(f"negative precipitation at row {i}, column {j}")
        for arr in (sites, times, values):
            arr.setflags(write=False)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def n_sites(self) -> int:
        return self.values.shape[1]

    def site_names(self) -> list[str]:
        return [site_name(s) for s in self.sites]


def _coord_text(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def site_name(coord) -> str:
    return f"s_{_coord_text(coord[0])}_{_coord_text(coord[1])}"


def parse_site_name(name: str) -> tuple[float, float]:
    m = _SITE_RE.match(name.strip())
    if m is None:
        raise ParseError(f"column header {name!r} is not of the form s_<j>_<k>")
    return float(m.group(1)), float(m.group(2))


def load_dataset(path: str | Path, run_id: int) -> GridDataset:
    """Read and validate one run's CSV export."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or header[0].strip() != "day":
            raise ParseError(f"{path}: first column must be 'day'")
        sites = [parse_site_name(h) for h in header[1:]]
        if not sites:
            raise ParseError(f"{path}: no site columns")
        ncol = len(header)
        days: list[int] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise ParseError(f"{path}: row {lineno} has {len(row)} cells, expected {ncol}")
            try:
                days.append(int(row[0]))
            except ValueError:
                raise ParseError(f"{path}: row {lineno}, column 'day': bad day index {row[0]!r}") from None
            vals = []
            for col, cell in enumerate(row[1:], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {lineno}, column {header[col]!r}: missing or non-finite value {cell!r}")
                vals.append(v)
            rows.append(vals)
    times = np.array(days, dtype=np.int64)
    if len(times) > 1:
        dup = np.flatnonzero(np.diff(times) <= 0)
        if len(dup):
            i = int(dup[0]) + 1
            kind = "duplicated" if times[i] == times[i - 1] else "decreasing"
            raise StructuralError(f"{path}: {kind} day index {times[i]} at row {i + 2}")
    values = np.array(rows, dtype=float).reshape(len(rows), len(sites))
    return GridDataset(run_id=int(run_id), sites=np.array(sites), times=times, values=values)


def write_dataset(ds: GridDataset, path: str | Path) -> None:
    """Write ``ds`` in the loader's CSV layout; values round-trip exactly."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", *ds.site_names()])
        for t, row in zip(ds.times, ds.values):
            w.writerow([int(t), *(repr(float(v)) for v in row)])


def grid_coordinates(side: int) -> np.ndarray:
    """Coordinates (j, k), j, k = 1..side, in row-major order."""
    if side < 1:
        raise DomainError(f"grid side must be >= 1, got {side}")
    j, k = np.meshgrid(np.arange(1, side + 1), np.arange(1, side + 1), indexing="ij")
    return np.column_stack([j.ravel(), k.ravel()]).astype(float)


def pairwise_distances(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=float)
    if c.ndim != 2 or len(c) < 2:
        raise DomainError("need at least two coordinates")
    diff = c[:, None, :] - c[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return 0.5 * (D + D.T)


@dataclass(frozen=True)
class SitePair:
    i: int
    j: int
    distance: float


def site_pairs(coords) -> list[SitePair]:
    D = pairwise_distances(coords)
    iu, ju = np.triu_indices(len(D), 1)
    return [SitePair(int(a), int(b), float(D[a, b])) for a, b in zip(iu, ju)]
