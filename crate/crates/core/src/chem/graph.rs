use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Atomic numbers 1..=118 plus one "misc" slot.
pub const ATOM_VOCAB: usize = 119;
pub const CHIRALITY_VOCAB: usize = 4;
pub const BOND_TYPE_VOCAB: usize = 4;
pub const BOND_DIR_VOCAB: usize = 3;

const MISC_ATOM: usize = 118;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Chirality {
    Unspecified,
    Clockwise,
    CounterClockwise,
    Other,
}

impl Chirality {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondType {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        [Self::Single, Self::Double, Self::Triple, Self::Aromatic]
            .get(i)
            .copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BondDirection {
    None,
    EndUp,
    EndDown,
}

impl BondDirection {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomFeat {
    pub atomic_number_index: usize,
    pub chirality_index: usize,
}

impl AtomFeat {
    /// Atomic numbers outside 1..=118 map to the misc category.
    pub fn new(atomic_number: u32, chirality: Chirality) -> Self {
        let atomic_number_index = match atomic_number {
            1..=118 => atomic_number as usize - 1,
            _ => MISC_ATOM,
        };
        Self {
            atomic_number_index,
            chirality_index: chirality.index(),
        }
    }

    /// Atomic number, or `None` for the misc category.
    pub fn atomic_number(&self) -> Option<u32> {
        (self.atomic_number_index < MISC_ATOM).then(|| self.atomic_number_index as u32 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BondFeat {
    pub bond_type_index: usize,
    pub bond_direction_index: usize,
}

impl BondFeat {
    pub fn new(kind: BondType, direction: BondDirection) -> Self {
        Self {
            bond_type_index: kind.index(),
            bond_direction_index: direction.index(),
        }
    }

    pub fn bond_type(&self) -> BondType {
        BondType::from_index(self.bond_type_index).expect("validated index")
    }
}

/// An undirected bond stored once with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub feat: BondFeat,
}

#[derive(Deserialize)]
struct RawMolGraph {
    atoms: Vec<AtomFeat>,
    bonds: Vec<Bond>,
}

impl TryFrom<RawMolGraph> for MolGraph {
    type Error = Error;

    fn try_from(raw: RawMolGraph) -> Result<Self> {
        MolGraph::new(raw.atoms, raw.bonds)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMolGraph")]
pub struct MolGraph {
    atoms: Vec<AtomFeat>,
    bonds: Vec<Bond>,
}

impl MolGraph {
    /// Validates indices, vocabulary bounds, self-bonds and duplicates.
    /// Bonds given as `(j, i)` are normalised to `i < j`.
    pub fn new(atoms: Vec<AtomFeat>, bonds: Vec<Bond>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Graph("molecule has no atoms".into()));
        }
        for (k, a) in atoms.iter().enumerate() {
            if a.atomic_number_index >= ATOM_VOCAB || a.chirality_index >= CHIRALITY_VOCAB {
                return Err(Error::Graph(format!("atom {k} has out-of-vocabulary features {a:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        let mut normalised = Vec::with_capacity(bonds.len());
        for b in bonds {
            let (i, j) = (b.i.min(b.j), b.i.max(b.j));
            if j >= atoms.len() {
                return Err(Error::Graph(format!(
                    "bond ({}, {}) references a missing atom",
                    b.i, b.j
                )));
            }
            if i == j {
                return Err(Error::Graph(format!("self-bond on atom {i}")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Graph(format!("duplicate bond ({i}, {j})")));
            }
            if b.feat.bond_type_index >= BOND_TYPE_VOCAB || b.feat.bond_direction_index >= BOND_DIR_VOCAB {
                return Err(Error::Graph(format!(
                    "bond ({i}, {j}) has out-of-vocabulary features {:?}",
                    b.feat
                )));
            }
            normalised.push(Bond { i, j, feat: b.feat });
        }
        Ok(Self {
            atoms,
            bonds: normalised,
        })
    }

    pub fn atoms(&self) -> &[AtomFeat] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Neighbour lists derived from the bond list.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.i].push(b.j);
            adj[b.j].push(b.i);
        }
        adj
    }

    /// Relabel atoms so that old atom `a` becomes `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.atoms.len();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(Error::Graph("not a permutation of the atom indices".into()));
        }
        let mut atoms = vec![self.atoms[0]; n];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old];
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                i: perm[b.i],
                j: perm[b.j],
                feat: b.feat,
            })
            .collect();
        Self::new(atoms, bonds)
    }
}

/// Vocabulary indices consumed by the embedding layers. Every bond appears
/// twice, once per direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Featurized {
    /// `(atomic_number_index, chirality_index)` per atom.
    pub atom_features: Vec<[usize; 2]>,
    /// Directed `(source, target)` pairs.
    pub edge_index: Vec<(usize, usize)>,
    /// `(bond_type_index, bond_direction_index)` per directed edge.
    pub edge_features: Vec<[usize; 2]>,
}

pub fn featurize(m: &MolGraph) -> Featurized {
    let atom_features = m
        .atoms
        .iter()
        .map(|a| [a.atomic_number_index, a.chirality_index])
        .collect();
    let mut edge_index = Vec::with_capacity(2 * m.bonds.len());
    let mut edge_features = Vec::with_capacity(2 * m.bonds.len());
    for b in &m.bonds {
        let f = [b.feat.bond_type_index, b.feat.bond_direction_index];
        edge_index.push((b.i, b.j));
        edge_features.push(f);
        edge_index.push((b.j, b.i));
        edge_features.push(f);
    }
    Featurized {
        atom_features,
        edge_index,
        edge_features,
    }
}
