//! Random molecules over the supported SMILES subset, labelled by the
//! presence of substructure motifs. Used for end-to-end runs and tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{parse_smiles, BondType, Dataset, Label, MolGraph, Molecule, TaskSplit};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub molecules: usize,
    pub seed: u64,
    /// Probability that any single label is hidden.
    pub missing_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            molecules: 400,
            seed: 7,
            missing_rate: 0.1,
        }
    }
}

const CHAIN: &[(&str, u32)] = &[
    ("C", 12),
    ("N", 2),
    ("O", 2),
    ("S", 1),
    ("C(=O)", 2),
    ("c1ccccc1", 2),
    ("C1CC1", 2),
    ("C#C", 1),
    ("C(C)", 2),
];
const BRANCH: &[(&str, u32)] = &[
    ("C", 4),
    ("O", 2),
    ("N", 1),
    ("F", 1),
    ("Cl", 1),
    ("Br", 1),
    ("=O", 2),
    ("C#N", 1),
    ("CC", 2),
];
const TERMINAL: &[(&str, u32)] = &[("Cl", 1), ("F", 1), ("O", 2), ("N", 1), ("C#N", 1), ("C", 3)];

fn pick<'a>(rng: &mut impl Rng, table: &'a [(&'a str, u32)]) -> &'a str {
    table.choose_weighted(rng, |(_, w)| *w).expect("non-empty table").0
}

/// One random SMILES string: a chain of fragments with optional branches
/// and an optional terminal group.
pub fn random_smiles(rng: &mut impl Rng) -> String {
    let units = rng.random_range(2..=7);
    let mut s = String::new();
    for u in 0..units {
        let unit = pick(rng, CHAIN);
        s.push_str(unit);
        // branches hang off the unit's last atom; skip after a triple bond tail
        if u + 1 < units && rng.random_bool(0.3) && !unit.ends_with("#C") {
            s.push('(');
            s.push_str(pick(rng, BRANCH));
            s.push(')');
        }
    }
    if rng.random_bool(0.4) {
        s.push_str(pick(rng, TERMINAL));
    }
    s
}

fn atomic_number(g: &MolGraph, a: usize) -> u32 {
    g.atoms()[a].atomic_number().unwrap_or(0)
}

fn has_element(g: &MolGraph, z: &[u32]) -> bool {
    (0..g.num_atoms()).any(|a| z.contains(&atomic_number(g, a)))
}

fn has_bond(g: &MolGraph, kind: BondType, ends: Option<(u32, u32)>) -> bool {
    g.bonds().iter().any(|b| {
        b.feat.bond_type() == kind
            && ends.is_none_or(|(x, y)| {
                let (p, q) = (atomic_number(g, b.i), atomic_number(g, b.j));
                (p, q) == (x, y) || (p, q) == (y, x)
            })
    })
}

fn has_three_ring(g: &MolGraph) -> bool {
    let adj = g.adjacency();
    g.bonds()
        .iter()
        .any(|b| adj[b.i].iter().any(|&k| k != b.j && adj[b.j].contains(&k)))
}

fn has_terminal_oxygen_single(g: &MolGraph) -> bool {
    let adj = g.adjacency();
    (0..g.num_atoms()).any(|a| {
        atomic_number(g, a) == 8
            && adj[a].len() <= 1
            && g.bonds()
                .iter()
                .filter(|b| b.i == a || b.j == a)
                .all(|b| b.feat.bond_type() == BondType::Single)
    })
}

fn has_branch_point(g: &MolGraph) -> bool {
    g.adjacency().iter().any(|n| n.len() >= 3)
}

type Motif = fn(&MolGraph) -> bool;

/// Property names and their motif detectors.
pub fn motifs() -> Vec<(&'static str, Motif)> {
    vec![
        ("has_nitrogen", |g| has_element(g, &[7])),
        ("has_carbonyl", |g| has_bond(g, BondType::Double, Some((6, 8)))),
        ("has_three_ring", has_three_ring),
        ("has_triple_bond", |g| has_bond(g, BondType::Triple, None)),
        ("has_halogen", |g| has_element(g, &[9, 17, 35, 53])),
        ("is_aromatic", |g| has_bond(g, BondType::Aromatic, None)),
        ("has_sulfur", |g| has_element(g, &[16])),
        ("has_hydroxyl", has_terminal_oxygen_single),
        ("has_branch_point", has_branch_point),
        ("has_nitrile", |g| has_bond(g, BondType::Triple, Some((6, 7)))),
    ]
}

/// Property indices held out for testing.
pub const TEST_PROPERTIES: [usize; 2] = [2, 5];

pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motifs = motifs();
    let mut molecules = Vec::with_capacity(cfg.molecules);
    let mut labels = Vec::with_capacity(cfg.molecules);
    while molecules.len() < cfg.molecules {
        let smiles = random_smiles(&mut rng);
        let graph = parse_smiles(&smiles)?;
        let row = motifs
            .iter()
            .map(|(_, f)| {
                if rng.random_bool(cfg.missing_rate) {
                    Label::Missing
                } else if f(&graph) {
                    Label::Positive
                } else {
                    Label::Negative
                }
            })
            .collect();
        molecules.push(Molecule { smiles, graph });
        labels.push(row);
    }
    let split = TaskSplit {
        properties: motifs.iter().map(|(n, _)| n.to_string()).collect(),
        train_properties: (0..motifs.len()).filter(|p| !TEST_PROPERTIES.contains(p)).collect(),
        test_properties: TEST_PROPERTIES.to_vec(),
    };
    Dataset::new(molecules, labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_smiles_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let s = random_smiles(&mut rng);
            assert!(parse_smiles(&s).is_ok(), "{s}");
        }
    }

    #[test]
    fn motif_detectors() {
        let m = |s: &str| parse_smiles(s).unwrap();
        let f = motifs();
        assert!(f[0].1(&m("CCN")));
        assert!(f[1].1(&m("CC(=O)C")));
        assert!(!f[1].1(&m("C=C")));
        assert!(f[2].1(&m("CC1CC1")));
        assert!(!f[2].1(&m("c1ccccc1")));
        assert!(f[9].1(&m("CC#N")));
        assert!(!f[9].1(&m("CC#C")));
        assert!(f[7].1(&m("CCO")));
        assert!(!f[7].1(&m("COC")));
        assert!(f[8].1(&m("CC(C)C")));
    }

    #[test]
    fn every_property_has_both_classes() {
        let d = synthetic_dataset(&SyntheticConfig::default()).unwrap();
        for p in 0..d.num_properties() {
            let (pos, neg) = d.labeled(p);
            assert!(
                pos.len() >= 30 && neg.len() >= 30,
                "{}: {} / {}",
                d.property_name(p),
                pos.len(),
                neg.len()
            );
        }
    }
}
