//! Bottleneck adapters placed after each message-passing layer:
//! `z = down(h ‖ c_m ‖ c_p)`, `Δh = up(relu(z))`, `out = LayerNorm(h + Δh)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{AtomContext, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Standard deviation of the down-projection initialisation.
pub const INIT_STD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d: usize,
    pub d2: usize,
    pub context_enabled: bool,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d2 == 0 || self.d2 >= self.d {
            return Err(Error::Config(format!(
                "adapter bottleneck must satisfy 0 < d2 < d (d2={}, d={})",
                self.d2, self.d
            )));
        }
        Ok(())
    }

    /// Width of the down-projection input.
    pub fn input_width(&self) -> usize {
        if self.context_enabled {
            self.d + 2 * self.d2
        } else {
            self.d
        }
    }

    /// Trainable parameters in one layer's adapter.
    pub fn per_layer_count(&self) -> usize {
        self.input_width() * self.d2 + self.d2 + self.d2 * self.d + self.d + 2 * self.d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl AdapterParams {
    fn named(self, layer: usize) -> impl Iterator<Item = (String, Tensor)> {
        let tensors = [
            self.down_w,
            self.down_b,
            self.up_w,
            self.up_b,
            self.ln_gamma,
            self.ln_beta,
        ];
        layer_names(layer).zip(tensors)
    }

    fn shapes_ok(&self, cfg: &AdapterConfig) -> bool {
        let (d, d2) = (cfg.d, cfg.d2);
        self.down_w.shape() == [cfg.input_width(), d2]
            && self.down_b.shape() == [d2]
            && self.up_w.shape() == [d2, d]
            && self.up_b.shape() == [d]
            && self.ln_gamma.shape() == [d]
            && self.ln_beta.shape() == [d]
    }
}

/// Down-projection ~ N(0, 1e-4²), up-projection exactly zero, unit layer norm.
pub fn init_adapter(cfg: &AdapterConfig, rng: &mut impl Rng) -> Result<AdapterParams> {
    cfg.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let mut sample = |shape: &[usize]| {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = normal.sample(rng);
        }
        t
    };
    let down_w = sample(&[cfg.input_width(), cfg.d2]);
    let down_b = sample(&[cfg.d2]);
    Ok(AdapterParams {
        down_w,
        down_b,
        up_w: Tensor::zeros(&[cfg.d2, cfg.d]),
        up_b: Tensor::zeros(&[cfg.d]),
        ln_gamma: Tensor::full(&[cfg.d], 1.0),
        ln_beta: Tensor::zeros(&[cfg.d]),
    })
}

/// Handle for adapters registered in a store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    layers: usize,
}

impl AdapterSet {
    /// Handle for adapters already present in `store` (e.g. after loading a checkpoint).
    pub fn existing(store: &ParamStore, config: AdapterConfig, layers: usize) -> Result<Self> {
        for l in 0..layers {
            for name in layer_names(l) {
                store.get(&name)?;
            }
        }
        Ok(Self { config, layers })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn check_layers(&self, encoder_layers: usize) -> Result<()> {
        if self.layers != encoder_layers {
            return Err(Error::Config(format!(
                "{} adapters for {encoder_layers} encoder layers",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.layers).flat_map(layer_names).collect()
    }

    /// Remove the adapter tensors, restoring the plain encoder.
    pub fn detach(self, store: &mut ParamStore) -> Result<Vec<AdapterParams>> {
        let mut out = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let mut take = |s: &str| -> Result<Tensor> { Ok(store.remove(&format!("adapter.layer{l}.{s}"))?.tensor) };
            out.push(AdapterParams {
                down_w: take("down.w")?,
                down_b: take("down.b")?,
                up_w: take("up.w")?,
                up_b: take("up.b")?,
                ln_gamma: take("ln.gamma")?,
                ln_beta: take("ln.beta")?,
            });
        }
        Ok(out)
    }
}

const SUFFIXES: [&str; 6] = ["down.w", "down.b", "up.w", "up.b", "ln.gamma", "ln.beta"];

fn layer_names(layer: usize) -> impl Iterator<Item = String> {
    SUFFIXES.iter().map(move |s| format!("adapter.layer{layer}.{s}"))
}

/// Register one trainable adapter per encoder layer.
pub fn attach(
    store: &mut ParamStore,
    encoder: &EncoderConfig,
    config: AdapterConfig,
    params: Vec<AdapterParams>,
) -> Result<AdapterSet> {
    config.validate()?;
    if config.d != encoder.d {
        return Err(Error::Config(format!(
            "adapter width {} does not match encoder width {}",
            config.d, encoder.d
        )));
    }
    if params.len() != encoder.layers {
        return Err(Error::Config(format!(
            "{} adapters for {} encoder layers",
            params.len(),
            encoder.layers
        )));
    }
    if let Some(l) = params.iter().position(|p| !p.shapes_ok(&config)) {
        return Err(Error::Config(format!("adapter {l} has wrong tensor shapes")));
    }
    for (l, p) in params.into_iter().enumerate() {
        for (name, t) in p.named(l) {
            store.insert(&name, t, false)?;
        }
    }
    Ok(AdapterSet {
        config,
        layers: encoder.layers,
    })
}

/// Initialise and attach adapters for every layer.
pub fn attach_fresh(
    store: &mut ParamStore,
    encoder: &EncoderConfig,
    config: AdapterConfig,
    rng: &mut impl Rng,
) -> Result<AdapterSet> {
    let params = (0..encoder.layers)
        .map(|_| init_adapter(&config, rng))
        .collect::<Result<Vec<_>>>()?;
    attach(store, encoder, config, params)
}

pub fn adapter_forward(
    tape: &mut Tape,
    store: &ParamStore,
    set: &AdapterSet,
    layer: usize,
    h: Var,
    context: Option<&AtomContext>,
) -> Result<Var> {
    let p = format!("adapter.layer{layer}");
    let input = match (set.config.context_enabled, context) {
        (true, Some(ctx)) => tape.concat(&[h, ctx.molecule, ctx.property])?,
        (true, None) => {
            return Err(Error::Context(
                "context-conditioned adapter called without context".into(),
            ))
        }
        (false, _) => h,
    };
    let down_w = store.var(tape, &format!("{p}.down.w"))?;
    let down_b = store.var(tape, &format!("{p}.down.b"))?;
    let up_w = store.var(tape, &format!("{p}.up.w"))?;
    let up_b = store.var(tape, &format!("{p}.up.b"))?;
    let gamma = store.var(tape, &format!("{p}.ln.gamma"))?;
    let beta = store.var(tape, &format!("{p}.ln.beta"))?;
    let z = tape.linear(input, down_w, Some(down_b))?;
    let z = tape.relu(z)?;
    let delta = tape.linear(z, up_w, Some(up_b))?;
    let sum = tape.add(h, delta)?;
    tape.layer_norm(sum, gamma, beta)
}
