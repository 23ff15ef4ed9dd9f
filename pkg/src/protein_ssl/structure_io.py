"""Fixed-column PDB parsing into per-chain backbone structures.

Only ATOM records are read and only the backbone atoms N, CA, and C are
kept. Residues missing any of the three are dropped (with a counted
warning) because downstream dihedral computation needs all of them.
Column layout per the PDB format (1-indexed): record name 1-6, atom name
13-16, altLoc 17, residue name 18-20, chain id 22, residue sequence number
23-26, x/y/z in 31-38/39-46/47-54.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ChainNotFound, EmptyChain, MalformedRecord

logger = logging.getLogger(__name__)

BACKBONE_ATOMS = ("N", "CA", "C")

THREE_TO_ONE = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C",
    "GLN": "Q", "GLU": "E", "GLY": "G", "HIS": "H", "ILE": "I",
    "LEU": "L", "LYS": "K", "MET": "M", "PHE": "F", "PRO": "P",
    "SER": "S", "THR": "T", "TRP": "W", "TYR": "Y", "VAL": "V",
}


@dataclass(frozen=True)
class Atom:
    """One parsed backbone atom record."""

    name: str
    residue_index: int
    residue_code: str
    chain_id: str
    position: np.ndarray


@dataclass(frozen=True)
class Residue:
    """Backbone-complete residue: code plus N, CA, and C coordinates."""

    code: str
    n: np.ndarray
    ca: np.ndarray
    c: np.ndarray


@dataclass
class ProteinStructure:
    """Ordered backbone residues of a single chain."""

    id: str
    residues: list[Residue] = field(default_factory=list)

    def __len__(self):
        return len(self.residues)

    def ca_coordinates(self):
        return np.array([r.ca for r in self.residues])


@dataclass(frozen=True)
class ProteinSequence:
    """One-letter residue codes matching a ProteinStructure."""

    id: str
    letters: str

    def __len__(self):
        return len(self.letters)


def _parse_atom_line(line, lineno):
    if len(line.rstrip("\n")) < 54:
        raise MalformedRecord(f"line {lineno}: ATOM record shorter than coordinate columns")
    try:
        x = float(line[30:38])
        y = float(line[38:46])
        z = float(line[46:54])
    except ValueError as exc:
        raise MalformedRecord(f"line {lineno}: non-numeric coordinates") from exc
    try:
        res_seq = int(line[22:26])
    except ValueError as exc:
        raise MalformedRecord(f"line {lineno}: non-numeric residue number") from exc
    return Atom(
        name=line[12:16].strip(),
        residue_index=res_seq,
        residue_code=line[17:20].strip(),
        chain_id=line[21],
        position=np.array([x, y, z], dtype=np.float64),
    )


def parse_pdb(text, chain=None, structure_id=""):
    """Parse one chain of PDB text into a :class:`ProteinStructure`.

    ``text`` may be a string or any iterable of lines. When ``chain`` is
    None the first chain encountered among ATOM records is used. Only the
    first MODEL of multi-model files is read; altLoc other than blank or
    'A' is skipped; for duplicated atoms the first record wins. Insertion
    codes are ignored and residue order is file order.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    target = chain
    seen_chains = set()
    # residues keyed by residue sequence number, in file order
    order: list[int] = []
    codes: dict[int, str] = {}
    atoms: dict[int, dict[str, np.ndarray]] = {}

    for lineno, line in enumerate(lines, start=1):
        record = line[:6].strip()
        if record == "ENDMDL":
            break
        if record != "ATOM":
            continue
        atom = _parse_atom_line(line, lineno)
        seen_chains.add(atom.chain_id)
        if target is None:
            target = atom.chain_id
        if atom.chain_id != target:
            continue
        if atom.name not in BACKBONE_ATOMS:
            continue
        alt = line[16]
        if alt not in (" ", "A"):
            continue
        key = atom.residue_index
        if key not in atoms:
            order.append(key)
            codes[key] = atom.residue_code
            atoms[key] = {}
        atoms[key].setdefault(atom.name, atom.position)

    if chain is not None and chain not in seen_chains:
        raise ChainNotFound(f"chain {chain!r} has no ATOM records")

    residues = []
    dropped = 0
    for key in order:
        rec = atoms[key]
        if all(name in rec for name in BACKBONE_ATOMS):
            residues.append(Residue(code=codes[key], n=rec["N"], ca=rec["CA"], c=rec["C"]))
        else:
            dropped += 1
    if dropped:
        logger.warning("%s: dropped %d residue(s) missing backbone atoms", structure_id or "<pdb>", dropped)
    if not residues:
        raise EmptyChain("no backbone-complete residue in chain")
    if len(residues) < 2:
        raise EmptyChain("fewer than two backbone-complete residues in chain")
    return ProteinStructure(id=structure_id, residues=residues)


def parse_pdb_file(path, chain=None):
    """Parse a PDB file; the structure id is the file stem plus the chain."""
    from pathlib import Path

    path = Path(path)
    structure_id = path.stem if chain is None else f"{path.stem}_{chain}"
    return parse_pdb(path.read_text(), chain=chain, structure_id=structure_id)


def to_sequence(structure):
    """Map three-letter residue codes to a one-letter string; unknown -> X."""
    letters = "".join(THREE_TO_ONE.get(r.code, "X") for r in structure.residues)
    return ProteinSequence(id=structure.id, letters=letters)
