"""Lookup tables shared by the synthetic generator and the numeric featurizer.

Values are representative rather than authoritative: they only need to be
internally consistent so that generated records look like AFLOW entries.
"""

# symbol -> (IUPAC valence, pseudopotential label, typical local moment in muB)
ELEMENTS = {
    "Ag": (4, "Ag", 0.0),
    "Al": (3, "Al", 0.0),
    "As": (5, "As", 0.0),
    "Au": (5, "Au", 0.0),
    "B": (3, "B_h", 0.0),
    "Ba": (2, "Ba_sv", 0.0),
    "Bi": (5, "Bi_d", 0.0),
    "Br": (7, "Br", 0.0),
    "Ca": (2, "Ca_sv", 0.0),
    "Cd": (2, "Cd", 0.0),
    "Cl": (7, "Cl", 0.0),
    "Co": (5, "Co", 1.6),
    "Cr": (6, "Cr_pv", 3.0),
    "Cu": (4, "Cu_pv", 0.0),
    "Dy": (4, "Dy_3", 0.0),
    "F": (1, "F", 0.0),
    "Fe": (6, "Fe_pv", 2.2),
    "Ga": (3, "Ga_d", 0.0),
    "Ge": (4, "Ge_d", 0.0),
    "In": (3, "In_d", 0.0),
    "K": (1, "K_sv", 0.0),
    "Li": (1, "Li_sv", 0.0),
    "Mg": (2, "Mg", 0.0),
    "Mn": (7, "Mn_pv", 3.5),
    "N": (5, "N", 0.0),
    "Na": (1, "Na_pv", 0.0),
    "Ni": (4, "Ni_pv", 0.6),
    "O": (2, "O", 0.0),
    "P": (5, "P", 0.0),
    "Pt": (6, "Pt", 0.0),
    "S": (6, "S", 0.0),
    "Sb": (5, "Sb", 0.0),
    "Se": (6, "Se", 0.0),
    "Si": (4, "Si", 0.0),
    "Sn": (4, "Sn_d", 0.0),
    "Sr": (2, "Sr_sv", 0.0),
    "Ta": (5, "Ta_pv", 0.0),
    "Te": (6, "Te", 0.0),
    "Ti": (4, "Ti_sv", 0.0),
    "V": (5, "V_sv", 1.0),
    "Zn": (2, "Zn", 0.0),
}

CRYSTAL_SYSTEMS = [
    "triclinic",
    "monoclinic",
    "orthorhombic",
    "tetragonal",
    "trigonal",
    "hexagonal",
    "cubic",
]

CRYSTAL_FAMILIES = ["triclinic", "monoclinic", "orthorhombic", "tetragonal", "hexagonal", "cubic"]

LATTICE_SYSTEMS = ["triclinic", "monoclinic", "orthorhombic", "tetragonal", "rhombohedral", "hexagonal", "cubic"]

POINT_GROUP_TYPES = ["centrosymmetric", "non-centrosymmetric", "enantiomorphic", "none"]

POINT_GROUP_STRUCTURES = [
    "2_x_cyclic",
    "2_x_dihedral",
    "2_x_symmetric",
    "cyclic",
    "dihedral",
    "symmetric",
]

CRYSTAL_CLASSES = [
    "pedial",
    "pinacoidal",
    "sphenoidal",
    "domatic",
    "prismatic",
    "rhombic-disphenoidal",
    "rhombic-pyramidal",
    "orthorhombic-bipyramidal",
    "tetragonal-pyramidal",
    "tetragonal-disphenoidal",
    "tetragonal-dipyramidal",
    "tetragonal-trapezohedral",
    "ditetragonal-pyramidal",
    "tetragonal-scalenohedral",
    "ditetragonal-dipyramidal",
    "trigonal-pyramidal",
    "rhombohedral",
    "trigonal-trapezohedral",
    "ditrigonal-pyramidal",
    "ditrigonal-scalenohedral",
    "hexagonal-pyramidal",
    "trigonal-dipyramidal",
    "hexagonal-dipyramidal",
    "hexagonal-trapezohedral",
    "dihexagonal-pyramidal",
    "ditrigonal-dipyramidal",
    "dihexagonal-dipyramidal",
    "tetartoidal",
    "diploidal",
    "gyroidal",
    "tetrahedral",
    "hexoctahedral",
]


class SpaceGroupProto:
    __slots__ = (
        "number", "symbol", "crystal_system", "crystal_family", "crystal_class",
        "orbifold", "order", "pg_structure", "pg_type", "lattice_system", "lattice_variation",
    )

    def __init__(self, number, symbol, crystal_system, crystal_family, crystal_class,
                 orbifold, order, pg_structure, pg_type, lattice_system, lattice_variation):
        self.number = number
        self.symbol = symbol
        self.crystal_system = crystal_system
        self.crystal_family = crystal_family
        self.crystal_class = crystal_class
        self.orbifold = orbifold
        self.order = order
        self.pg_structure = pg_structure
        self.pg_type = pg_type
        self.lattice_system = lattice_system
        self.lattice_variation = lattice_variation


SPACE_GROUPS = [
    SpaceGroupProto(2, "P-1", "triclinic", "triclinic", "pinacoidal", "x", 2,
                    "2_x_cyclic", "centrosymmetric", "triclinic", "TRI1a"),
    SpaceGroupProto(12, "C2/m", "monoclinic", "monoclinic", "prismatic", "2*", 4,
                    "2_x_cyclic", "centrosymmetric", "monoclinic", "MCLC1"),
    SpaceGroupProto(14, "P2_1/c", "monoclinic", "monoclinic", "prismatic", "2*", 4,
                    "2_x_cyclic", "centrosymmetric", "monoclinic", "MCL"),
    SpaceGroupProto(62, "Pnma", "orthorhombic", "orthorhombic", "orthorhombic-bipyramidal", "*222", 8,
                    "2_x_dihedral", "centrosymmetric", "orthorhombic", "ORC"),
    SpaceGroupProto(63, "Cmcm", "orthorhombic", "orthorhombic", "orthorhombic-bipyramidal", "*222", 8,
                    "2_x_dihedral", "centrosymmetric", "orthorhombic", "ORCC"),
    SpaceGroupProto(123, "P4/mmm", "tetragonal", "tetragonal", "ditetragonal-dipyramidal", "*422", 16,
                    "2_x_dihedral", "centrosymmetric", "tetragonal", "TET"),
    SpaceGroupProto(139, "I4/mmm", "tetragonal", "tetragonal", "ditetragonal-dipyramidal", "*422", 16,
                    "2_x_dihedral", "centrosymmetric", "tetragonal", "BCT1"),
    SpaceGroupProto(160, "R3m", "trigonal", "hexagonal", "ditrigonal-pyramidal", "*33", 6,
                    "dihedral", "none", "rhombohedral", "RHL1"),
    SpaceGroupProto(166, "R-3m", "trigonal", "hexagonal", "ditrigonal-scalenohedral", "2*3", 12,
                    "2_x_dihedral", "centrosymmetric", "rhombohedral", "RHL1"),
    SpaceGroupProto(187, "P-6m2", "hexagonal", "hexagonal", "ditrigonal-dipyramidal", "*322", 12,
                    "dihedral", "none", "hexagonal", "HEX"),
    SpaceGroupProto(194, "P6_3/mmc", "hexagonal", "hexagonal", "dihexagonal-dipyramidal", "*622", 24,
                    "2_x_dihedral", "centrosymmetric", "hexagonal", "HEX"),
    SpaceGroupProto(216, "F-43m", "cubic", "cubic", "tetrahedral", "*332", 24,
                    "symmetric", "none", "cubic", "FCC"),
    SpaceGroupProto(221, "Pm-3m", "cubic", "cubic", "hexoctahedral", "*432", 48,
                    "2_x_symmetric", "centrosymmetric", "cubic", "CUB"),
    SpaceGroupProto(225, "Fm-3m", "cubic", "cubic", "hexoctahedral", "*432", 48,
                    "2_x_symmetric", "centrosymmetric", "cubic", "FCC"),
    SpaceGroupProto(229, "Im-3m", "cubic", "cubic", "hexoctahedral", "*432", 48,
                    "2_x_symmetric", "centrosymmetric", "cubic", "BCC"),
]

# upper space-group number of each crystal system, in CRYSTAL_SYSTEMS order
_SYSTEM_UPPER = [2, 15, 74, 142, 167, 194, 230]


def spacegroup_bucket(number):
    """Crystal-system index (0 = triclinic ... 6 = cubic) of a space-group number."""
    if not 1 <= number <= 230:
        raise ValueError(f"space group {number} outside [1, 230]")
    for i, upper in enumerate(_SYSTEM_UPPER):
        if number <= upper:
            return i
    raise AssertionError("unreachable")
