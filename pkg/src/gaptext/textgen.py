"""Record -> text serialization with per-feature character spans.

Two formats are produced: the comma-separated ``key: value`` structured
string and a templated multi-sentence description. The structured grammar
is parsed back by :func:`parse_structured_string`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .records import FEATURES, MaterialRecord

STRUCTURED = "structured"
DESCRIPTION = "description"

# field kinds drive both rendering and parsing
_KIND = {
    "compound": "str",
    "species": "strlist",
    "composition": "intlist",
    "density": "float",
    "valence_cell_iupac": "int",
    "species_pp": "strlist",
    "spinD": "numlist",
    "spin_atom": "float",
    "spin_cell": "float",
    "crystal_class": "str",
    "crystal_family": "str",
    "crystal_system": "str",
    "positions_fractional": "veclist",
    "geometry": "numlist",
    "lattice_system_relax": "str",
    "lattice_variation_relax": "str",
    "spacegroup_relax": "int",
    "sg": "strlist",
    "sg2": "strlist",
    "point_group_orbifold": "str",
    "point_group_order": "int",
    "point_group_structure": "str",
    "point_group_type": "str",
}


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class AnnotatedText:
    text: str
    spans: list[tuple[str, int, int]]
    format: str = STRUCTURED
    unmatched: list[str] = field(default_factory=list)

    def span_dict(self) -> dict[str, tuple[int, int]]:
        return {name: (s, e) for name, s, e in self.spans}


def fmt_number(x: float) -> str:
    """Three decimals, trailing zeros and a bare point trimmed: 90.0 -> '90'."""
    s = f"{round(float(x), 3):.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def fmt_scalar(x: float) -> str:
    """Like fmt_number but a whole value keeps one decimal: 1.0 -> '1.0'."""
    s = fmt_number(x)
    return s if "." in s else s + ".0"


def _render(kind: str, value) -> str:
    if kind == "str":
        return str(value)
    if kind == "int":
        return str(int(value))
    if kind == "float":
        return fmt_scalar(value)
    if kind == "strlist":
        return "[" + ", ".join(f"'{v}'" for v in value) + "]"
    if kind == "intlist":
        return "[" + ", ".join(str(int(v)) for v in value) + "]"
    if kind == "numlist":
        return "[" + ", ".join(fmt_number(v) for v in value) + "]"
    if kind == "veclist":
        return "[" + ", ".join(_render("numlist", v) for v in value) + "]"
    raise ValueError(kind)


def to_structured_string(r: MaterialRecord) -> AnnotatedText:
    parts, spans, pos = [], [], 0
    for name in FEATURES:
        clause = f"{name}: {_render(_KIND[name], getattr(r, name))}"
        if parts:
            pos += 2
        spans.append((name, pos, pos + len(clause)))
        parts.append(clause)
        pos += len(clause)
    return AnnotatedText(", ".join(parts), spans, STRUCTURED)


# -- parsing ---------------------------------------------------------------

_KEY = re.compile(r"([A-Za-z_][A-Za-z0-9_]*): ")
_NEXT_CLAUSE = re.compile(r", (?=[A-Za-z_][A-Za-z0-9_]*: )")
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def offset(self, pos=None) -> int:
        return len(self.text[: self.pos if pos is None else pos].encode("utf-8"))

    def fail(self, msg, pos=None):
        raise ParseError(msg, self.offset(pos))

    def expect(self, s):
        if not self.text.startswith(s, self.pos):
            self.fail(f"expected {s!r}")
        self.pos += len(s)

    def number(self, integer=False):
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            self.fail("expected a number")
        self.pos = m.end()
        tok = m.group()
        if integer:
            if not re.fullmatch(r"-?\d+", tok):
                self.fail(f"expected an integer, got {tok!r}", m.start())
            return int(tok)
        return float(tok)

    def quoted(self):
        self.expect("'")
        end = self.text.find("'", self.pos)
        if end < 0:
            self.fail("unterminated quoted string")
        s = self.text[self.pos:end]
        self.pos = end + 1
        return s

    def seq(self, item):
        self.expect("[")
        out = []
        if self.text.startswith("]", self.pos):
            self.pos += 1
            return out
        while True:
            out.append(item())
            if self.text.startswith(", ", self.pos):
                self.pos += 2
            elif self.text.startswith("]", self.pos):
                self.pos += 1
                return out
            else:
                self.fail("malformed list")

    def bare(self):
        m = _NEXT_CLAUSE.search(self.text, self.pos)
        end = m.start() if m else len(self.text)
        if end == self.pos:
            self.fail("empty value")
        s = self.text[self.pos:end]
        self.pos = end
        return s

    def value(self, kind):
        if kind == "str":
            return self.bare()
        if kind == "int":
            return self.number(integer=True)
        if kind == "float":
            return self.number()
        if kind == "strlist":
            return self.seq(self.quoted)
        if kind == "intlist":
            return self.seq(lambda: self.number(integer=True))
        if kind == "numlist":
            return self.seq(self.number)
        if kind == "veclist":
            return self.seq(lambda: self.seq(self.number))
        raise ValueError(kind)


def parse_structured_string(text: str, band_gap: float = float("nan")) -> MaterialRecord:
    """Inverse of :func:`to_structured_string`. Whole-valued numbers in list
    fields come back as floats (``90`` -> ``90.0``)."""
    p = _Parser(text.strip())
    values = {}
    while p.pos < len(p.text):
        if values:
            p.expect(", ")
        m = _KEY.match(p.text, p.pos)
        if not m:
            p.fail("expected 'key: '")
        key = m.group(1)
        if key not in _KIND:
            p.fail(f"unknown key {key!r}")
        if key in values:
            p.fail(f"duplicate key {key!r}")
        p.pos = m.end()
        values[key] = p.value(_KIND[key])
        if p.pos < len(p.text) and not p.text.startswith(", ", p.pos):
            p.fail(f"unexpected text after value of {key!r}")
    for name in FEATURES:
        if name not in values:
            raise ParseError(f"missing key {name!r}", p.offset())
    values["positions_fractional"] = [[float(x) for x in v] for v in values["positions_fractional"]]
    values["geometry"] = [float(x) for x in values["geometry"]]
    values["spinD"] = [float(x) for x in values["spinD"]]
    return MaterialRecord(**values, band_gap=band_gap)


# -- templated descriptions --------------------------------------------------


def _and_list(items) -> str:
    items = list(items)
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def _desc_values(r: MaterialRecord) -> dict[str, str]:
    g = r.geometry
    return {
        "compound": r.compound,
        "species": _and_list(r.species),
        "composition": ":".join(str(c) for c in r.composition),
        "density": fmt_number(r.density),
        "valence_cell_iupac": str(r.valence_cell_iupac),
        "species_pp": _and_list(r.species_pp),
        "spinD": ", ".join(fmt_number(x) for x in r.spinD),
        "spin_atom": fmt_scalar(r.spin_atom),
        "spin_cell": fmt_scalar(r.spin_cell),
        "crystal_class": r.crystal_class,
        "crystal_family": r.crystal_family,
        "crystal_system": r.crystal_system,
        "positions_fractional": _and_list(
            "(" + ", ".join(fmt_number(x) for x in p) + ")" for p in r.positions_fractional
        ),
        "geometry": (
            f"a = {fmt_number(g[0])}, b = {fmt_number(g[1])}, c = {fmt_number(g[2])} Å and angles "
            f"{fmt_number(g[3])}, {fmt_number(g[4])}, {fmt_number(g[5])} degrees"
        ),
        "lattice_system_relax": r.lattice_system_relax,
        "lattice_variation_relax": r.lattice_variation_relax,
        "spacegroup_relax": str(r.spacegroup_relax),
        "sg": ", ".join(r.sg),
        "sg2": ", ".join(r.sg2),
        "point_group_orbifold": r.point_group_orbifold,
        "point_group_order": str(r.point_group_order),
        "point_group_structure": r.point_group_structure,
        "point_group_type": r.point_group_type,
    }


# One sentence per feature group, fixed order; {name} marks a value slot.
_TEMPLATE = [
    "The compound {compound} is built from the species {species} in the ratio {composition}.",
    " It has a density of {density} g/cm3 and a valence of {valence_cell_iupac} according to the IUPAC system.",
    " The pseudopotentials used are {species_pp}.",
    " The per-atom magnetic moments are {spinD} Bohr magnetons, with a spin of {spin_atom} per atom"
    " and {spin_cell} for the whole cell.",
    " The crystal class is {crystal_class}, within the {crystal_family} crystal family"
    " and the {crystal_system} crystal system.",
    " The atoms sit at fractional coordinates {positions_fractional}.",
    " The lattice parameters are {geometry}.",
    " The relaxed lattice system is {lattice_system_relax} with lattice variation {lattice_variation_relax},"
    " and the relaxed space group number is {spacegroup_relax}.",
    " Symmetry detection gives space group {sg} under loose tolerance and {sg2} under tight tolerance.",
    " The point group has orbifold {point_group_orbifold} and order {point_group_order},"
    " with a {point_group_structure} structure and point group type {point_group_type}.",
]

_SLOT = re.compile(r"\{(\w+)\}")


def to_description(r: MaterialRecord) -> AnnotatedText:
    values = _desc_values(r)
    out, spans, pos = [], [], 0
    for sentence in _TEMPLATE:
        last = 0
        for m in _SLOT.finditer(sentence):
            literal = sentence[last:m.start()]
            out.append(literal)
            pos += len(literal)
            v = values[m.group(1)]
            spans.append((m.group(1), pos, pos + len(v)))
            out.append(v)
            pos += len(v)
            last = m.end()
        out.append(sentence[last:])
        pos += len(sentence) - last
    return AnnotatedText("".join(out), spans, DESCRIPTION)


def annotate_external(text: str, r: MaterialRecord) -> AnnotatedText:
    """Locate feature mentions in a description produced elsewhere.

    Each feature's rendered value (template rendering first, then the
    structured rendering, then a bare number) is searched left to right;
    the first hit not overlapping an earlier span wins. Features that cannot
    be found are listed in ``unmatched``.
    """
    desc = _desc_values(r)
    spans, taken, missing = [], [], []
    for name in FEATURES:
        raw = getattr(r, name)
        candidates = [desc[name], _render(_KIND[name], raw)]
        if _KIND[name] in ("float", "int"):
            candidates.append(fmt_number(raw))
        hit = None
        for cand in candidates:
            start = text.find(cand)
            while start >= 0:
                end = start + len(cand)
                if all(end <= s or start >= e for s, e in taken):
                    hit = (start, end)
                    break
                start = text.find(cand, start + 1)
            if hit:
                break
        if hit:
            spans.append((name, *hit))
            taken.append(hit)
        else:
            missing.append(name)
    spans.sort(key=lambda s: s[1])
    return AnnotatedText(text, spans, DESCRIPTION, unmatched=missing)


def render(r: MaterialRecord, fmt: str) -> AnnotatedText:
    if fmt == STRUCTURED:
        return to_structured_string(r)
    if fmt == DESCRIPTION:
        return to_description(r)
    raise ValueError(f"unknown text format {fmt!r}")
