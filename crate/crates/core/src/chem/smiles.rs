//! Parser for a strict SMILES subset.
//!
//! Supported: organic-subset atoms (`B C N O P S F Cl Br I`), aromatic
//! `c n o s`, bracket atoms holding only an element symbol and an optional
//! `@`/`@@` tag, bonds `- = # / \`, branches, and ring closures `1`-`9` and
//! `%nn`. Anything else is rejected with its byte offset.

use std::collections::BTreeMap;

use super::graph::{AtomFeat, Bond, BondDirection, BondFeat, BondType, Chirality, MolGraph};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    Empty,
    #[error("non-ASCII byte at offset {0}")]
    NonAscii(usize),
    #[error("unbalanced parenthesis at offset {0}")]
    UnbalancedParen(usize),
    #[error("unmatched ring-closure digit {label} at offset {offset}")]
    UnmatchedRing { label: u32, offset: usize },
    #[error("unsupported token `{token}` at offset {offset}")]
    Unsupported { token: String, offset: usize },
    #[error("invalid bond at offset {offset}: {reason}")]
    InvalidBond { offset: usize, reason: &'static str },
}

const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",
    "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce",
    "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir",
    "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm",
    "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc",
    "Lv", "Ts", "Og",
];

fn atomic_number(symbol: &str) -> Option<u32> {
    ELEMENTS.iter().position(|&e| e == symbol).map(|p| p as u32 + 1)
}

fn aromatic_number(b: u8) -> Option<u32> {
    match b {
        b'c' => Some(6),
        b'n' => Some(7),
        b'o' => Some(8),
        b's' => Some(16),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BondSymbol {
    Single,
    Double,
    Triple,
    Up,
    Down,
}

impl BondSymbol {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            b'-' => Some(Self::Single),
            b'=' => Some(Self::Double),
            b'#' => Some(Self::Triple),
            b'/' => Some(Self::Up),
            b'\\' => Some(Self::Down),
            _ => None,
        }
    }

    fn feat(self) -> BondFeat {
        match self {
            Self::Single => BondFeat::new(BondType::Single, BondDirection::None),
            Self::Double => BondFeat::new(BondType::Double, BondDirection::None),
            Self::Triple => BondFeat::new(BondType::Triple, BondDirection::None),
            Self::Up => BondFeat::new(BondType::Single, BondDirection::EndUp),
            Self::Down => BondFeat::new(BondType::Single, BondDirection::EndDown),
        }
    }
}

struct RingOpen {
    atom: usize,
    bond: Option<BondSymbol>,
    offset: usize,
}

#[derive(Default)]
struct Builder {
    atoms: Vec<AtomFeat>,
    aromatic: Vec<bool>,
    bonds: Vec<Bond>,
}

impl Builder {
    fn add_atom(&mut self, feat: AtomFeat, aromatic: bool) -> usize {
        self.atoms.push(feat);
        self.aromatic.push(aromatic);
        self.atoms.len() - 1
    }

    fn connect(&mut self, a: usize, b: usize, symbol: Option<BondSymbol>, offset: usize) -> Result<(), SmilesError> {
        if a == b {
            return Err(SmilesError::InvalidBond {
                offset,
                reason: "atom bonded to itself",
            });
        }
        let (i, j) = (a.min(b), a.max(b));
        if self.bonds.iter().any(|x| x.i == i && x.j == j) {
            return Err(SmilesError::InvalidBond {
                offset,
                reason: "duplicate bond between the same atoms",
            });
        }
        let feat = match symbol {
            Some(s) => s.feat(),
            None if self.aromatic[a] && self.aromatic[b] => BondFeat::new(BondType::Aromatic, BondDirection::None),
            None => BondFeat::new(BondType::Single, BondDirection::None),
        };
        self.bonds.push(Bond { i, j, feat });
        Ok(())
    }
}

/// Parse a SMILES string into a [`MolGraph`] with atoms in order of appearance.
pub fn parse_smiles(text: &str) -> Result<MolGraph, SmilesError> {
    let bytes = text.as_bytes();
    if bytes.is_empty() {
        return Err(SmilesError::Empty);
    }
    if let Some(p) = bytes.iter().position(|b| !b.is_ascii()) {
        return Err(SmilesError::NonAscii(p));
    }

    let mut g = Builder::default();
    let mut prev: Option<usize> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut pending: Option<(BondSymbol, usize)> = None;
    let mut rings: BTreeMap<u32, RingOpen> = BTreeMap::new();
    let unsupported = |offset: usize, len: usize| SmilesError::Unsupported {
        token: text[offset..(offset + len).min(text.len())].to_string(),
        offset,
    };

    let mut pos = 0;
    while pos < bytes.len() {
        let b = bytes[pos];
        let start = pos;
        let atom = match b {
            b'B' | b'C' => {
                let two = bytes.get(pos + 1).copied();
                let (z, len) = match (b, two) {
                    (b'B', Some(b'r')) => (35, 2),
                    (b'C', Some(b'l')) => (17, 2),
                    (b'B', _) => (5, 1),
                    _ => (6, 1),
                };
                pos += len;
                Some((AtomFeat::new(z, Chirality::Unspecified), false))
            }
            b'N' | b'O' | b'P' | b'S' | b'F' | b'I' => {
                let z = atomic_number(std::str::from_utf8(&[b]).expect("ascii")).expect("element");
                pos += 1;
                Some((AtomFeat::new(z, Chirality::Unspecified), false))
            }
            b'c' | b'n' | b'o' | b's' => {
                pos += 1;
                let z = aromatic_number(b).expect("aromatic");
                Some((AtomFeat::new(z, Chirality::Unspecified), true))
            }
            b'[' => {
                let (feat, aromatic, next) = parse_bracket(text, pos)?;
                pos = next;
                Some((feat, aromatic))
            }
            _ => None,
        };

        if let Some((feat, aromatic)) = atom {
            let idx = g.add_atom(feat, aromatic);
            if let Some(p) = prev {
                let symbol = pending.take().map(|(s, _)| s);
                g.connect(p, idx, symbol, start)?;
            } else if let Some((_, off)) = pending {
                return Err(SmilesError::InvalidBond {
                    offset: off,
                    reason: "bond symbol without a preceding atom",
                });
            }
            prev = Some(idx);
            continue;
        }

        match b {
            b'(' => {
                let Some(p) = prev else {
                    return Err(unsupported(pos, 1));
                };
                if let Some((_, off)) = pending {
                    return Err(SmilesError::InvalidBond {
                        offset: off,
                        reason: "bond symbol before a branch",
                    });
                }
                branches.push((p, pos));
                pos += 1;
            }
            b')' => {
                let Some((p, _)) = branches.pop() else {
                    return Err(SmilesError::UnbalancedParen(pos));
                };
                if let Some((_, off)) = pending {
                    return Err(SmilesError::InvalidBond {
                        offset: off,
                        reason: "dangling bond symbol at end of branch",
                    });
                }
                prev = Some(p);
                pos += 1;
            }
            b'-' | b'=' | b'#' | b'/' | b'\\' => {
                if pending.is_some() {
                    return Err(SmilesError::InvalidBond {
                        offset: pos,
                        reason: "consecutive bond symbols",
                    });
                }
                pending = Some((BondSymbol::from_byte(b).expect("bond byte"), pos));
                pos += 1;
            }
            b'0'..=b'9' | b'%' => {
                let (label, next) = if b == b'%' {
                    let digits = bytes.get(pos + 1..pos + 3);
                    match digits {
                        Some(d) if d.iter().all(u8::is_ascii_digit) => {
                            (u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0'), pos + 3)
                        }
                        _ => return Err(unsupported(pos, 3)),
                    }
                } else if b == b'0' {
                    return Err(unsupported(pos, 1));
                } else {
                    (u32::from(b - b'0'), pos + 1)
                };
                let Some(atom) = prev else {
                    return Err(unsupported(pos, next - pos));
                };
                let symbol = pending.take().map(|(s, _)| s);
                match rings.remove(&label) {
                    Some(open) => {
                        let bond = match (open.bond, symbol) {
                            (Some(a), Some(c)) if a != c => {
                                return Err(SmilesError::InvalidBond {
                                    offset: pos,
                                    reason: "conflicting ring-closure bond symbols",
                                })
                            }
                            (a, c) => a.or(c),
                        };
                        g.connect(open.atom, atom, bond, pos)?;
                    }
                    None => {
                        rings.insert(
                            label,
                            RingOpen {
                                atom,
                                bond: symbol,
                                offset: pos,
                            },
                        );
                    }
                }
                pos = next;
            }
            _ => return Err(unsupported(pos, 1)),
        }
    }

    if let Some((_, off)) = pending {
        return Err(SmilesError::InvalidBond {
            offset: off,
            reason: "dangling bond symbol at end of input",
        });
    }
    if let Some((_, off)) = branches.last() {
        return Err(SmilesError::UnbalancedParen(*off));
    }
    if let Some((label, open)) = rings.iter().min_by_key(|(_, o)| o.offset) {
        return Err(SmilesError::UnmatchedRing {
            label: *label,
            offset: open.offset,
        });
    }
    Ok(MolGraph::new(g.atoms, g.bonds).expect("parser maintains graph invariants"))
}

/// Parses `[Sym]`, `[Sym@]` or `[Sym@@]` starting at the `[`.
fn parse_bracket(text: &str, open: usize) -> Result<(AtomFeat, bool, usize), SmilesError> {
    let bytes = text.as_bytes();
    let unsupported = |offset: usize| SmilesError::Unsupported {
        token: text[offset..offset + 1].to_string(),
        offset,
    };
    let mut pos = open + 1;
    let first = *bytes.get(pos).ok_or_else(|| SmilesError::Unsupported {
        token: "[".into(),
        offset: open,
    })?;

    let (z, aromatic) = if first.is_ascii_uppercase() {
        let two = bytes
            .get(pos + 1)
            .filter(|c| c.is_ascii_lowercase())
            .and_then(|_| atomic_number(&text[pos..pos + 2]));
        match two {
            Some(z) => {
                pos += 2;
                (z, false)
            }
            None => {
                let z = atomic_number(&text[pos..pos + 1]).ok_or_else(|| unsupported(pos))?;
                pos += 1;
                (z, false)
            }
        }
    } else if let Some(z) = aromatic_number(first) {
        pos += 1;
        (z, true)
    } else {
        return Err(unsupported(pos));
    };

    let chirality = if bytes.get(pos) == Some(&b'@') {
        if bytes.get(pos + 1) == Some(&b'@') {
            pos += 2;
            Chirality::Clockwise
        } else {
            pos += 1;
            Chirality::CounterClockwise
        }
    } else {
        Chirality::Unspecified
    };

    match bytes.get(pos) {
        Some(b']') => Ok((AtomFeat::new(z, chirality), aromatic, pos + 1)),
        Some(_) => Err(unsupported(pos)),
        None => Err(SmilesError::Unsupported {
            token: "[".into(),
            offset: open,
        }),
    }
}
