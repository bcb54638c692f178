//! Named parameter tensors with a frozen/trainable partition, and the JSON
//! tensor-file format shared by checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, frozen: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), Param { tensor, frozen });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Result<Param> {
        self.params
            .remove(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.tensor)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        self.param(name).map(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .frozen = frozen;
        Ok(())
    }

    /// Freeze every tensor whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count of trainable tensors whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| !p.frozen && k.starts_with(prefix))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    /// Bind `name` on `tape`: trainable tensors become differentiable leaves,
    /// frozen ones constants. Repeated calls return the same node.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = tape.lookup(name) {
            return Ok(v);
        }
        let p = self.param(name)?;
        if p.frozen {
            Ok(tape.named_constant(name, p.tensor.clone()))
        } else {
            tape.bind(name, p.tensor.clone())
        }
    }

    /// Replace a trainable tensor's value. Frozen tensors are rejected.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.frozen {
            return Err(Error::FrozenWrite(name.to_string()));
        }
        check_shape(name, p.tensor.shape(), tensor.shape())?;
        p.tensor = tensor;
        Ok(())
    }

    /// Overwrite a non-gradient buffer such as running batch-norm statistics.
    /// This bypasses the frozen flag and is not an optimizer step.
    pub fn set_buffer(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        check_shape(name, p.tensor.shape(), tensor.shape())?;
        p.tensor = tensor;
        Ok(())
    }

    /// `theta <- theta - lr * grad` for every entry of `grads`. Any gradient
    /// addressed to a frozen tensor aborts the whole step before writing.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.check_writable(grads)?;
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            p.tensor.axpy(-lr, g);
        }
        Ok(())
    }

    pub(crate) fn check_writable(&self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = self.param(name)?;
            if p.frozen {
                return Err(Error::FrozenWrite(name.clone()));
            }
            check_shape(name, p.tensor.shape(), g.shape())?;
        }
        Ok(())
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

fn check_shape(name: &str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Format a float with 17 significant digits, which round-trips any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON array of floats at 17 significant digits.
pub(crate) fn raw_f64_array(values: &[f64]) -> Box<RawValue> {
    let mut s = String::with_capacity(values.len() * 24 + 2);
    s.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(*v));
    }
    s.push(']');
    RawValue::from_string(s).expect("formatted floats are valid JSON")
}

#[derive(Serialize)]
struct TensorOut<'a> {
    shape: &'a [usize],
    frozen: bool,
    data: Box<RawValue>,
}

#[derive(Serialize)]
struct TensorFileOut<'a, C: Serialize> {
    format_version: u32,
    config: &'a C,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_config: Option<&'a Value>,
    tensors: BTreeMap<&'a str, TensorOut<'a>>,
}

#[derive(Deserialize)]
struct TensorIn {
    shape: Vec<usize>,
    frozen: bool,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct TensorFileIn {
    config: Value,
    #[serde(default)]
    run_config: Option<Value>,
    tensors: BTreeMap<String, TensorIn>,
}

/// Contents of a tensor file before the caller interprets its config.
#[derive(Debug)]
pub struct TensorFile {
    pub config: Value,
    pub run_config: Option<Value>,
    pub store: ParamStore,
}

pub fn write_tensor_file<C: Serialize>(
    path: &Path,
    store: &ParamStore,
    config: &C,
    run_config: Option<&Value>,
) -> Result<()> {
    let tensors = store
        .iter()
        .map(|(name, p)| {
            (
                name,
                TensorOut {
                    shape: p.tensor.shape(),
                    frozen: p.frozen,
                    data: raw_f64_array(p.tensor.data()),
                },
            )
        })
        .collect();
    let file = TensorFileOut {
        format_version: FORMAT_VERSION,
        config,
        run_config,
        tensors,
    };
    let mut text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn check_version(path: &Path, value: &Value) -> Result<()> {
    let found = value
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Record {
            path: path.to_path_buf(),
            line: 1,
            reason: "missing format_version".into(),
        })?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: found.min(u64::from(u32::MAX)) as u32,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    check_version(path, &value)?;
    let parsed: TensorFileIn = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
    let mut store = ParamStore::new();
    for (name, t) in parsed.tensors {
        let tensor = Tensor::new(t.shape, t.data).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("tensor `{name}`: {e}"),
        })?;
        store.insert(&name, tensor, t.frozen)?;
    }
    Ok(TensorFile {
        config: parsed.config,
        run_config: parsed.run_config,
        store,
    })
}
