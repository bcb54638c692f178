//! Quadratic consolidation of the embedding tables toward their pre-trained
//! values, with identity, diagonal-Fisher and per-row Fisher weightings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;

use crate::autodiff::{Tape, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{check_version, fmt_f64, raw_f64_array, ParamStore, FORMAT_VERSION};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    None,
    Im,
    Fim,
    Efim,
}

impl PenaltyMode {
    pub fn needs_fisher(self) -> bool {
        matches!(self, Self::Fim | Self::Efim)
    }
}

impl std::str::FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "im" => Ok(Self::Im),
            "fim" => Ok(Self::Fim),
            "efim" => Ok(Self::Efim),
            _ => Err(Error::Config(format!(
                "unknown penalty mode `{s}` (expected none, im, fim or efim)"
            ))),
        }
    }
}

/// Importance estimates for every row of the stacked embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    /// `[E, d]` mean squared per-sample gradients.
    pub f_hat: Tensor,
    /// Per-row sums of `f_hat`.
    pub f_tilde: Vec<f64>,
    pub samples: usize,
}

impl FisherDiag {
    pub fn from_f_hat(f_hat: Tensor, samples: usize) -> Self {
        let f_tilde = (0..f_hat.rows()).map(|r| f_hat.row(r).iter().sum()).collect();
        Self {
            f_hat,
            f_tilde,
            samples,
        }
    }

    pub fn rows(&self) -> usize {
        self.f_hat.rows()
    }

    pub fn width(&self) -> usize {
        self.f_hat.cols()
    }

    /// Require the shape of the stacked embedding matrix of `cfg`.
    pub fn check_config(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = vec![cfg.embedding_rows(), cfg.d];
        if self.f_hat.shape() != expected.as_slice() {
            return Err(Error::TensorShape {
                name: "fisher".into(),
                expected,
                found: self.f_hat.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Snapshot of the embedding tables taken when tuning starts.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingAnchor {
    pub tables: Vec<(String, Tensor)>,
}

impl EmbeddingAnchor {
    pub fn snapshot(store: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let tables = cfg
            .embedding_tables()
            .into_iter()
            .map(|(name, _)| Ok((name.clone(), store.get(&name)?.clone())))
            .collect::<Result<_>>()?;
        Ok(Self { tables })
    }

    /// Euclidean norm of the current tables minus the anchor.
    pub fn displacement_norm(&self, store: &ParamStore) -> Result<f64> {
        let mut sq = 0.0;
        for (name, anchor) in &self.tables {
            let cur = store.get(name)?;
            sq += cur
                .data()
                .iter()
                .zip(anchor.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(sq.sqrt())
    }

    /// Largest absolute coordinate change.
    pub fn max_abs_displacement(&self, store: &ParamStore) -> Result<f64> {
        let mut m: f64 = 0.0;
        for (name, anchor) in &self.tables {
            m = m.max(store.get(name)?.max_abs_diff(anchor));
        }
        Ok(m)
    }
}

fn slice_rows(t: &Tensor, start: usize, rows: usize) -> Tensor {
    let d = t.cols();
    Tensor::from_parts(vec![rows, d], t.data()[start * d..(start + rows) * d].to_vec())
}

/// Penalty for explicit `(current, anchor)` table pairs whose rows, in
/// order, make up the stacked matrix that `fisher` describes.
pub fn penalty_on(
    tape: &mut Tape,
    tables: &[(Var, &Tensor)],
    mode: PenaltyMode,
    fisher: Option<&FisherDiag>,
) -> Result<Var> {
    if mode == PenaltyMode::None {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let fisher = match (mode.needs_fisher(), fisher) {
        (true, None) => return Err(Error::MissingFisher("penalty")),
        (true, Some(f)) => Some(f),
        (false, _) => None,
    };
    if let Some(f) = fisher {
        let rows: usize = tables.iter().map(|(_, a)| a.rows()).sum();
        let width = tables.first().map_or(f.width(), |(_, a)| a.cols());
        if f.rows() != rows || f.width() != width {
            return Err(Error::TensorShape {
                name: "fisher".into(),
                expected: vec![rows, width],
                found: f.f_hat.shape().to_vec(),
            });
        }
    }
    let mut total: Option<Var> = None;
    let mut start = 0;
    for &(cur, anchor) in tables {
        let rows = anchor.rows();
        let a = tape.constant(anchor.clone());
        let diff = tape.sub(cur, a)?;
        let term = match mode {
            PenaltyMode::None => unreachable!("handled above"),
            PenaltyMode::Im => {
                let sq = tape.mul(diff, diff)?;
                tape.sum_all(sq)?
            }
            PenaltyMode::Fim => {
                let f = fisher.expect("checked above");
                let w = tape.constant(slice_rows(&f.f_hat, start, rows));
                let sq = tape.mul(diff, diff)?;
                let weighted = tape.mul(w, sq)?;
                tape.sum_all(weighted)?
            }
            PenaltyMode::Efim => {
                let f = fisher.expect("checked above");
                let w = Tensor::from_parts(vec![rows], f.f_tilde[start..start + rows].to_vec());
                let w = tape.constant(w);
                let rs = tape.row_sums(diff)?;
                let sq = tape.mul(rs, rs)?;
                let weighted = tape.mul(w, sq)?;
                tape.sum_all(weighted)?
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        start += rows;
    }
    let total = total.ok_or(Error::Empty("embedding tables"))?;
    tape.scale(total, 0.5)
}

/// Penalty of the store's current embedding tables against `anchor`.
pub fn penalty(
    tape: &mut Tape,
    store: &ParamStore,
    anchor: &EmbeddingAnchor,
    mode: PenaltyMode,
    fisher: Option<&FisherDiag>,
) -> Result<Var> {
    let mut pairs = Vec::with_capacity(anchor.tables.len());
    for (name, t) in &anchor.tables {
        let v = store.var(tape, name)?;
        if tape.value(v).shape() != t.shape() {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected: t.shape().to_vec(),
                found: tape.value(v).shape().to_vec(),
            });
        }
        pairs.push((v, t));
    }
    penalty_on(tape, &pairs, mode, fisher)
}

/// Mean over `samples` of squared per-sample gradients of `loss` with respect
/// to the listed tables, stacked in the given order. The tables must be
/// trainable in `store`.
pub fn estimate_fisher<S>(
    store: &ParamStore,
    tables: &[String],
    samples: &[S],
    mut loss: impl FnMut(&mut Tape, &ParamStore, &S) -> Result<Var>,
) -> Result<FisherDiag> {
    if samples.is_empty() {
        return Err(Error::Empty("fisher samples"));
    }
    let shapes: Vec<Vec<usize>> = tables
        .iter()
        .map(|n| Ok(store.get(n)?.shape().to_vec()))
        .collect::<Result<_>>()?;
    let width = shapes.first().map(|s| s[1]).ok_or(Error::Empty("embedding tables"))?;
    if let Some(k) = shapes.iter().position(|s| s.len() != 2 || s[1] != width) {
        return Err(Error::TensorShape {
            name: tables[k].clone(),
            expected: vec![shapes[k][0], width],
            found: shapes[k].clone(),
        });
    }
    let rows: usize = shapes.iter().map(|s| s[0]).sum();
    let mut acc = vec![0.0; rows * width];
    for s in samples {
        let mut tape = Tape::new();
        let root = loss(&mut tape, store, s)?;
        let grads = tape.backward(root)?;
        let mut offset = 0;
        for (name, shape) in tables.iter().zip(&shapes) {
            let n = shape[0] * width;
            if let Some(g) = grads.get(name) {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: "fisher gradient",
                        node: 0,
                    });
                }
                for (a, v) in acc[offset..offset + n].iter_mut().zip(g.data()) {
                    *a += v * v;
                }
            }
            offset += n;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(FisherDiag::from_f_hat(
        Tensor::from_parts(vec![rows, width], acc),
        samples.len(),
    ))
}

#[derive(Serialize)]
struct RowOut {
    f_hat: Box<RawValue>,
    f_tilde: Box<RawValue>,
}

#[derive(Serialize)]
struct FisherOut<'a> {
    format_version: u32,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_config: Option<&'a Value>,
    rows: Vec<RowOut>,
}

#[derive(Deserialize)]
struct RowIn {
    f_hat: Vec<f64>,
    f_tilde: f64,
}

#[derive(Deserialize)]
struct FisherIn {
    samples: usize,
    rows: Vec<RowIn>,
}

pub fn write_fisher(path: &Path, fisher: &FisherDiag, run_config: Option<&Value>) -> Result<()> {
    let rows = (0..fisher.rows())
        .map(|r| RowOut {
            f_hat: raw_f64_array(fisher.f_hat.row(r)),
            f_tilde: RawValue::from_string(fmt_f64(fisher.f_tilde[r])).expect("valid number"),
        })
        .collect();
    let out = FisherOut {
        format_version: FORMAT_VERSION,
        samples: fisher.samples,
        run_config,
        rows,
    };
    let mut text = serde_json::to_string(&out).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_fisher(path: &Path) -> Result<FisherDiag> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    check_version(path, &value)?;
    let parsed: FisherIn = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
    let width = parsed.rows.first().map_or(0, |r| r.f_hat.len());
    if width == 0 {
        return Err(Error::Empty("fisher rows"));
    }
    let mut data = Vec::with_capacity(parsed.rows.len() * width);
    let mut f_tilde = Vec::with_capacity(parsed.rows.len());
    for (i, r) in parsed.rows.into_iter().enumerate() {
        if r.f_hat.len() != width {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("fisher row {i} has width {}, expected {width}", r.f_hat.len()),
            });
        }
        if r.f_hat.iter().any(|&v| v.is_nan() || v < 0.0) || r.f_tilde.is_nan() || r.f_tilde < 0.0 {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("fisher row {i} has negative or non-finite entries"),
            });
        }
        data.extend(r.f_hat);
        f_tilde.push(r.f_tilde);
    }
    Ok(FisherDiag {
        f_hat: Tensor::from_parts(vec![f_tilde.len(), width], data),
        f_tilde,
        samples: parsed.samples,
    })
}
