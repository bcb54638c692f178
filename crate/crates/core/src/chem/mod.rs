//! Molecule ingestion: SMILES parsing, categorical featurisation, labelled
//! datasets and 2-way K-shot episode sampling.

pub mod dataset;
pub mod episode;
pub mod graph;
pub mod smiles;

pub use dataset::{load_dataset, load_molecules, Dataset, Label, Molecule, TaskSplit};
pub use episode::{derive_seed, sample_episode, Episode, SupportItem};
pub use graph::{
    featurize, AtomFeat, Bond, BondDirection, BondFeat, BondType, Chirality, Featurized, MolGraph, ATOM_VOCAB,
    BOND_DIR_VOCAB, BOND_TYPE_VOCAB, CHIRALITY_VOCAB,
};
pub use smiles::{parse_smiles, SmilesError};
