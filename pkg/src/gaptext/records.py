"""Material records: loading, validation, band-gap filtering, stratified splits
and a seeded synthetic generator for desk-scale experiments."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tables import ELEMENTS, SPACE_GROUPS, spacegroup_bucket

# Serialization order of the 23 text features (the structured-string template order).
FEATURES = [
    "compound",
    "species",
    "composition",
    "density",
    "valence_cell_iupac",
    "species_pp",
    "spinD",
    "spin_atom",
    "spin_cell",
    "crystal_class",
    "crystal_family",
    "crystal_system",
    "positions_fractional",
    "geometry",
    "lattice_system_relax",
    "lattice_variation_relax",
    "spacegroup_relax",
    "sg",
    "sg2",
    "point_group_orbifold",
    "point_group_order",
    "point_group_structure",
    "point_group_type",
]

REQUIRED_FIELDS = FEATURES + ["band_gap"]


class SchemaError(ValueError):
    """A record line is missing a field, has an unknown one, or is not JSON."""


class ValidationError(ValueError):
    """A record violates a MaterialRecord invariant."""


@dataclass
class MaterialRecord:
    compound: str
    species: list[str]
    composition: list[int]
    density: float
    valence_cell_iupac: int
    species_pp: list[str]
    spinD: list[float]
    spin_atom: float
    spin_cell: float
    crystal_class: str
    crystal_family: str
    crystal_system: str
    positions_fractional: list[list[float]]
    geometry: list[float]
    lattice_system_relax: str
    lattice_variation_relax: str
    spacegroup_relax: int
    sg: list[str]
    sg2: list[str]
    point_group_orbifold: str
    point_group_order: int
    point_group_structure: str
    point_group_type: str
    band_gap: float = math.nan

    def validate(self) -> None:
        problems = []
        if not (len(self.species) == len(self.composition) == len(self.species_pp)):
            problems.append(
                f"species/composition/species_pp lengths differ "
                f"({len(self.species)}, {len(self.composition)}, {len(self.species_pp)})"
            )
        if any(int(c) != c or c <= 0 for c in self.composition):
            problems.append("composition entries must be positive integers")
        n_atoms = sum(self.composition)
        if self.spinD and len(self.spinD) != n_atoms:
            problems.append(f"len(spinD)={len(self.spinD)} but sum(composition)={n_atoms}")
        if self.positions_fractional and len(self.positions_fractional) != n_atoms:
            problems.append(
                f"len(positions_fractional)={len(self.positions_fractional)} but sum(composition)={n_atoms}"
            )
        for pos in self.positions_fractional:
            if len(pos) != 3 or any(not 0.0 <= x <= 1.0 for x in pos):
                problems.append(f"fractional position {pos} outside [0,1]^3")
                break
        if len(self.geometry) != 6:
            problems.append(f"geometry must have 6 entries, got {len(self.geometry)}")
        else:
            if any(x <= 0 for x in self.geometry[:3]):
                problems.append("lattice lengths must be > 0")
            if any(not 0.0 < x < 180.0 for x in self.geometry[3:]):
                problems.append("lattice angles must lie in (0, 180)")
        if not self.density > 0:
            problems.append("density must be > 0")
        if self.valence_cell_iupac < 0:
            problems.append("valence_cell_iupac must be >= 0")
        if self.spin_atom < 0:
            problems.append("spin_atom must be >= 0")
        if not 1 <= self.spacegroup_relax <= 230:
            problems.append(f"spacegroup_relax {self.spacegroup_relax} outside [1, 230]")
        if self.point_group_order < 1:
            problems.append("point_group_order must be positive")
        if problems:
            raise ValidationError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialRecord":
        return cls(**{k: d[k] for k in REQUIRED_FIELDS if k in d})


@dataclass
class RecordSet:
    records: list[MaterialRecord]
    provenance: str = "synthetic"

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    def band_gaps(self) -> np.ndarray:
        return np.array([r.band_gap for r in self.records], dtype=float)

    def subset(self, indices) -> "RecordSet":
        return RecordSet([self.records[i] for i in indices], self.provenance)


@dataclass
class Splits:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Splits":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"], d["seed"], d.get("meta", {}))


def _coerce(name, value, lineno):
    # json gives floats for "4.0" and ints for "4"; normalise the integer fields
    if name in ("valence_cell_iupac", "spacegroup_relax", "point_group_order"):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise SchemaError(f"line {lineno}: field '{name}' must be an integer")
    elif name == "composition":
        if not isinstance(value, list):
            raise SchemaError(f"line {lineno}: field 'composition' must be a list")
        value = [int(v) if isinstance(v, (int, float)) and float(v).is_integer() else v for v in value]
    elif name in ("density", "spin_atom", "spin_cell", "band_gap"):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaError(f"line {lineno}: field '{name}' must be numeric")
        value = float(value)
    return value


def record_from_json_obj(obj: dict, lineno: int = 0) -> MaterialRecord:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: expected a JSON object")
    for name in REQUIRED_FIELDS:
        if name not in obj:
            raise SchemaError(f"line {lineno}: missing required field '{name}'")
    unknown = sorted(set(obj) - set(REQUIRED_FIELDS))
    if unknown:
        raise SchemaError(f"line {lineno}: unknown field '{unknown[0]}'")
    rec = MaterialRecord(**{k: _coerce(k, obj[k], lineno) for k in REQUIRED_FIELDS})
    try:
        rec.validate()
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    return rec


def load_records(path) -> RecordSet:
    """Read a JSON-lines file of records. Blank lines are skipped."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(record_from_json_obj(obj, lineno))
    return RecordSet(records, str(path))


def save_records(rs: RecordSet, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in rs:
            fh.write(json.dumps(r.to_dict()) + "\n")


def filter_bandgap(rs: RecordSet, lo: float = 0.0, hi: float = 5.0) -> RecordSet:
    if lo > hi:
        raise ValueError(f"lo={lo} > hi={hi}")
    return RecordSet([r for r in rs if lo <= r.band_gap <= hi], rs.provenance)


def filter_indices(rs: RecordSet, lo: float = 0.0, hi: float = 5.0) -> list[int]:
    """Indices (into rs) of records kept by filter_bandgap."""
    if lo > hi:
        raise ValueError(f"lo={lo} > hi={hi}")
    return [i for i, r in enumerate(rs) if lo <= r.band_gap <= hi]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes: 10% test, then 20% of the remainder for validation."""
    n_test = round_half_up(0.10 * n)
    n_val = round_half_up(0.20 * (n - n_test))
    return n - n_test - n_val, n_val, n_test


def gap_bins(gaps: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin index over [min, max] of the observed gaps."""
    lo, hi = float(gaps.min()), float(gaps.max())
    if hi == lo:
        return np.zeros(len(gaps), dtype=int)
    idx = np.floor((gaps - lo) / (hi - lo) * bins).astype(int)
    return np.clip(idx, 0, bins - 1)


def _apportion(sizes: np.ndarray, totals: list[int]) -> np.ndarray:
    """Integer table counts[b, k] with row sums `sizes`, column sums `totals`
    and every entry within one of its proportional quota."""
    n = int(sizes.sum())
    quota = np.outer(sizes, np.asarray(totals, dtype=float)) / n
    counts = np.floor(quota + 1e-12).astype(int)
    frac = quota - counts
    row_left = sizes - counts.sum(axis=1)
    col_left = np.asarray(totals) - counts.sum(axis=0)
    # Ryser-style greedy: rows with most leftover first, each unit to the
    # column with the largest remaining demand (fractional part breaks ties).
    for b in sorted(range(len(sizes)), key=lambda b: (-row_left[b], b)):
        used = set()
        for _ in range(int(row_left[b])):
            choices = [k for k in range(len(totals)) if col_left[k] > 0 and k not in used]
            k = max(choices, key=lambda k: (col_left[k], frac[b, k], -k))
            counts[b, k] += 1
            used.add(k)
            col_left[k] -= 1
    return counts


def stratified_split(rs: RecordSet, seed: int = 0, bins: int = 10, indices=None) -> Splits:
    """Band-gap stratified train/val/test split.

    Records are binned into `bins` equal-width band-gap bins; each bin is
    shuffled deterministically (keyed by seed and bin index) and contributes
    test, validation and training records in proportion to the global sizes.
    `indices` optionally names which entries of `rs` take part (e.g. the
    output of `filter_indices`); returned indices refer to `rs`.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    idx = np.arange(len(rs)) if indices is None else np.asarray(list(indices), dtype=int)
    n = len(idx)
    if n < 10:
        raise ValueError(f"need at least 10 records to reserve a 10% test set, got {n}")
    gaps = np.array([rs[i].band_gap for i in idx], dtype=float)
    which = gap_bins(gaps, bins)
    n_train, n_val, n_test = split_sizes(n)
    sizes = np.bincount(which, minlength=bins)
    counts = _apportion(sizes, [n_test, n_val, n_train])
    test, val, train = [], [], []
    for b in range(bins):
        members = idx[which == b]
        rng = np.random.default_rng([seed, b])
        members = members[rng.permutation(len(members))]
        t, v = counts[b, 0], counts[b, 1]
        test.extend(members[:t].tolist())
        val.extend(members[t:t + v].tolist())
        train.extend(members[t + v:].tolist())
    return Splits(sorted(train), sorted(val), sorted(test), seed, {"bins": bins})


def _fmt3(x: float) -> float:
    return float(round(float(x), 3))


def synthetic_gap(valence: int, density: float, spacegroup: int, spin_cell: float) -> float:
    """Noise-free target of the synthetic generator, clamped to [0, 5] eV.

    gap = 0.5 + 0.45*bucket + 0.03*valence - 0.08*(density - 7) - 0.3*min(|spin_cell|, 3)
    where bucket is the crystal-system index (0 triclinic .. 6 cubic) of the space group.
    """
    g = (
        0.5
        + 0.45 * spacegroup_bucket(spacegroup)
        + 0.03 * valence
        - 0.08 * (density - 7.0)
        - 0.3 * min(abs(spin_cell), 3.0)
    )
    return min(max(g, 0.0), 5.0)


def _geometry_for(proto, rng):
    a = _fmt3(rng.uniform(3.0, 7.0))
    ls = proto.lattice_system
    if ls == "cubic":
        ang = 60.0 if proto.lattice_variation == "FCC" else (109.471 if proto.lattice_variation == "BCC" else 90.0)
        return [a, a, a, ang, ang, ang]
    if ls == "tetragonal":
        return [a, a, _fmt3(rng.uniform(3.0, 9.0)), 90.0, 90.0, 90.0]
    if ls == "hexagonal":
        return [a, a, _fmt3(rng.uniform(3.0, 9.0)), 90.0, 90.0, 120.0]
    if ls == "rhombohedral":
        ang = _fmt3(rng.uniform(50.0, 80.0))
        return [a, a, a, ang, ang, ang]
    if ls == "orthorhombic":
        return [a, _fmt3(rng.uniform(3.0, 8.0)), _fmt3(rng.uniform(3.0, 8.0)), 90.0, 90.0, 90.0]
    if ls == "monoclinic":
        return [a, _fmt3(rng.uniform(3.0, 8.0)), _fmt3(rng.uniform(3.0, 8.0)), 90.0,
                _fmt3(rng.uniform(95.0, 120.0)), 90.0]
    return [a, _fmt3(rng.uniform(3.0, 8.0)), _fmt3(rng.uniform(3.0, 8.0)),
            _fmt3(rng.uniform(70.0, 110.0)), _fmt3(rng.uniform(70.0, 110.0)), _fmt3(rng.uniform(70.0, 110.0))]


def synth_record(rng: np.random.Generator, max_sites: int = 4, noise: float = 0.05) -> MaterialRecord:
    proto = SPACE_GROUPS[int(rng.integers(len(SPACE_GROUPS)))]
    symbols = sorted(ELEMENTS)
    n_species = int(rng.integers(1, 4))
    chosen = sorted(rng.choice(symbols, size=n_species, replace=False).tolist())
    composition = [1] * n_species
    for _ in range(int(rng.integers(0, max_sites - n_species + 1))):
        composition[int(rng.integers(n_species))] += 1
    n_atoms = sum(composition)

    spinD = []
    for el, c in zip(chosen, composition):
        moment = ELEMENTS[el][2]
        for _ in range(c):
            spinD.append(_fmt3(moment * rng.uniform(0.8, 1.2)) if moment and rng.random() < 0.5 else 0.0)
    spin_cell = _fmt3(sum(spinD))
    positions = [[0.0, 0.0, 0.0]] + [
        [_fmt3(rng.choice([0.0, 0.25, 0.5, 0.75, rng.uniform(0, 1)])) for _ in range(3)]
        for _ in range(n_atoms - 1)
    ]
    valence = sum(ELEMENTS[el][0] * c for el, c in zip(chosen, composition))
    density = _fmt3(rng.uniform(2.0, 12.0))
    sg_label = f"{proto.symbol} #{proto.number}"
    gap = synthetic_gap(valence, density, proto.number, spin_cell) + noise * rng.standard_normal()
    return MaterialRecord(
        compound="".join(f"{el}{c}" for el, c in zip(chosen, composition)),
        species=chosen,
        composition=composition,
        density=density,
        valence_cell_iupac=int(valence),
        species_pp=[ELEMENTS[el][1] for el in chosen],
        spinD=spinD,
        spin_atom=_fmt3(abs(spin_cell) / n_atoms),
        spin_cell=spin_cell,
        crystal_class=proto.crystal_class,
        crystal_family=proto.crystal_family,
        crystal_system=proto.crystal_system,
        positions_fractional=positions,
        geometry=_geometry_for(proto, rng),
        lattice_system_relax=proto.lattice_system,
        lattice_variation_relax=proto.lattice_variation,
        spacegroup_relax=proto.number,
        sg=[sg_label] * 3,
        sg2=[sg_label] * 3,
        point_group_orbifold=proto.orbifold,
        point_group_order=proto.order,
        point_group_structure=proto.pg_structure,
        point_group_type=proto.pg_type,
        band_gap=_fmt3(min(max(gap, 0.0), 5.0)),
    )


def synth_generate(n: int, seed: int = 0, max_sites: int = 4) -> RecordSet:
    """`n` valid records whose band gap is `synthetic_gap` of the generated
    features plus N(0, 0.05^2) noise, clipped to [0, 5] and rounded to meV."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    records = [synth_record(rng, max_sites=max_sites) for _ in range(n)]
    for r in records:
        r.validate()
    return RecordSet(records, "synthetic")
