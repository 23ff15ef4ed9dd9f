"""Structure-aware self-supervised pretraining for protein residue graphs."""

from .config import TrainConfig
from .geometry import RBFConfig, backbone_dihedrals, dihedral, pairwise_distances
from .graph_builder import ProteinGraph, build_graph, load_graph, mask_graph, save_graph
from .structure_io import ProteinStructure, parse_pdb, to_sequence

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "RBFConfig",
    "ProteinGraph",
    "ProteinStructure",
    "backbone_dihedrals",
    "build_graph",
    "dihedral",
    "load_graph",
    "mask_graph",
    "pairwise_distances",
    "parse_pdb",
    "save_graph",
    "to_sequence",
]
