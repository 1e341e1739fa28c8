//! The DisCo network.
//!
//! Item and annotator inputs are projected into separate latent spaces,
//! concatenated, passed through a two-layer encoder with a residual
//! connection, and decoded by three softmax heads:
//!
//! ```text
//! z_I = W_I x              z_A = W_A a
//! u   = φ([z_I, z_A])
//! z_P = φ(W_P u)
//! z_E = φ(W_E z_P + z_P)
//! z_y = softmax(W_y z_E)   z_yI = softmax(W_yI z_E)   z_yA = softmax(W_yA z_E)
//! ```
//!
//! `z_y` is the per-annotator label distribution, `z_yI` the item-level soft
//! label and `z_yA` the annotator's overall label tendency. No layer has a bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{DiscoError, Result};
use crate::linalg::{softmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softsign,
    Relu,
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Softsign => t / (1.0 + t.abs()),
            Activation::Relu => t.max(0.0),
            Activation::Elu => {
                if t > 0.0 {
                    t
                } else {
                    t.exp_m1()
                }
            }
        }
    }

    /// Derivative at `t`; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Softsign => {
                let d = 1.0 + t.abs();
                1.0 / (d * d)
            }
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if t > 0.0 {
                    1.0
                } else {
                    t.exp()
                }
            }
        }
    }

    fn map(self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&t| self.apply(t)).collect()
    }
}

/// Scalar activation plus its derivative.
pub fn activation(kind: Activation, t: f64) -> (f64, f64) {
    (kind.apply(t), kind.derivative(t))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Gaussian,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoConfig {
    /// J
    pub item_input_dim: usize,
    /// D_A: N for one-hot annotators, embedding width for metadata vectors.
    pub annot_input_dim: usize,
    pub item_latent_dim: usize,
    pub annot_latent_dim: usize,
    /// Defaults to `item_latent_dim` when absent.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default = "default_init")]
    pub init: Init,
    /// Defaults to 0.05 (gaussian std) or 0.1 (uniform half-width).
    #[serde(default)]
    pub init_scale: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_activation() -> Activation {
    Activation::Softsign
}

fn default_init() -> Init {
    Init::Gaussian
}

impl DiscoConfig {
    pub fn new(
        item_input_dim: usize,
        annot_input_dim: usize,
        item_latent_dim: usize,
        annot_latent_dim: usize,
        num_classes: usize,
    ) -> Self {
        DiscoConfig {
            item_input_dim,
            annot_input_dim,
            item_latent_dim,
            annot_latent_dim,
            hidden_dim: None,
            num_classes,
            activation: Activation::Softsign,
            fusion: Fusion::Concat,
            init: Init::Gaussian,
            init_scale: None,
            seed: 0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.item_latent_dim)
    }

    pub fn scale(&self) -> f64 {
        self.init_scale.unwrap_or(match self.init {
            Init::Gaussian => 0.05,
            Init::Uniform => 0.1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("item_input_dim", self.item_input_dim),
            ("annot_input_dim", self.annot_input_dim),
            ("item_latent_dim", self.item_latent_dim),
            ("annot_latent_dim", self.annot_latent_dim),
            ("hidden_dim", self.hidden()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(DiscoError::Config(format!("{name} must be >= 1")));
        }
        if self.num_classes < 2 {
            return Err(DiscoError::Config("num_classes must be >= 2".into()));
        }
        let s = self.scale();
        if !(s.is_finite() && s >= 0.0) {
            return Err(DiscoError::Config(format!(
                "init_scale must be finite and >= 0, got {s}"
            )));
        }
        Ok(())
    }
}

/// The seven weight matrices. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoParams {
    pub w_i: Matrix,
    pub w_a: Matrix,
    pub w_p: Matrix,
    pub w_e: Matrix,
    pub w_y: Matrix,
    pub w_yi: Matrix,
    pub w_ya: Matrix,
}

impl DiscoParams {
    pub const NAMES: [&'static str; 7] = ["W_I", "W_A", "W_P", "W_E", "W_y", "W_yI", "W_yA"];

    pub fn zeros(cfg: &DiscoConfig) -> Self {
        let (ji, ja, h, c) = (
            cfg.item_latent_dim,
            cfg.annot_latent_dim,
            cfg.hidden(),
            cfg.num_classes,
        );
        DiscoParams {
            w_i: Matrix::zeros(ji, cfg.item_input_dim),
            w_a: Matrix::zeros(ja, cfg.annot_input_dim),
            w_p: Matrix::zeros(h, ji + ja),
            w_e: Matrix::zeros(h, h),
            w_y: Matrix::zeros(c, h),
            w_yi: Matrix::zeros(c, h),
            w_ya: Matrix::zeros(c, h),
        }
    }

    pub fn matrices(&self) -> [&Matrix; 7] {
        [
            &self.w_i, &self.w_a, &self.w_p, &self.w_e, &self.w_y, &self.w_yi, &self.w_ya,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.w_i,
            &mut self.w_a,
            &mut self.w_p,
            &mut self.w_e,
            &mut self.w_y,
            &mut self.w_yi,
            &mut self.w_ya,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.matrices().iter().map(|m| m.as_slice().len()).sum()
    }

    /// Whether every matrix has the shape `cfg` requires.
    pub fn matches(&self, cfg: &DiscoConfig) -> bool {
        let want = DiscoParams::zeros(cfg);
        let ok = self
            .matrices()
            .iter()
            .zip(want.matrices())
            .all(|(a, b)| a.shape() == b.shape());
        ok
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.matrices_mut() {
            m.scale(s);
        }
    }

    pub fn add_assign(&mut self, other: &DiscoParams) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.add_assign(b);
        }
    }
}

/// Draw initial weights; identical seeds give identical parameters.
pub fn init_params(cfg: &DiscoConfig) -> Result<DiscoParams> {
    cfg.validate()?;
    let mut params = DiscoParams::zeros(cfg);
    let scale = cfg.scale();
    if scale == 0.0 {
        return Ok(params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fill = |m: &mut Matrix, rng: &mut ChaCha8Rng| match cfg.init {
        Init::Gaussian => {
            let d = Normal::new(0.0, scale).expect("finite positive std");
            m.as_mut_slice().iter_mut().for_each(|w| *w = d.sample(rng));
        }
        Init::Uniform => {
            let d = Uniform::new_inclusive(-scale, scale).expect("valid range");
            m.as_mut_slice().iter_mut().for_each(|w| *w = rng.sample(d));
        }
    };
    for m in params.matrices_mut() {
        fill(m, &mut rng);
    }
    Ok(params)
}

/// Every intermediate of one forward pass, kept for the reverse pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub z_i: Vec<f64>,
    pub z_a: Vec<f64>,
    /// `[z_I, z_A]` before the activation.
    pub fused: Vec<f64>,
    pub u: Vec<f64>,
    pub p_pre: Vec<f64>,
    pub z_p: Vec<f64>,
    pub e_pre: Vec<f64>,
    pub z_e: Vec<f64>,
    pub logits_y: Vec<f64>,
    pub logits_yi: Vec<f64>,
    pub logits_ya: Vec<f64>,
    pub z_y: Vec<f64>,
    pub z_yi: Vec<f64>,
    pub z_ya: Vec<f64>,
}

pub fn forward(p: &DiscoParams, cfg: &DiscoConfig, x: &[f64], a: &[f64]) -> Result<ForwardTrace> {
    if x.len() != cfg.item_input_dim {
        return Err(DiscoError::Dimension {
            what: "item vector",
            expected: cfg.item_input_dim,
            got: x.len(),
        });
    }
    if a.len() != cfg.annot_input_dim {
        return Err(DiscoError::Dimension {
            what: "annotator vector",
            expected: cfg.annot_input_dim,
            got: a.len(),
        });
    }
    let phi = cfg.activation;
    let z_i = p.w_i.matvec(x);
    let z_a = p.w_a.matvec(a);
    let fused: Vec<f64> = z_i.iter().chain(&z_a).copied().collect();
    let u = phi.map(&fused);
    let p_pre = p.w_p.matvec(&u);
    let z_p = phi.map(&p_pre);
    let e_pre: Vec<f64> = p
        .w_e
        .matvec(&z_p)
        .iter()
        .zip(&z_p)
        .map(|(a, b)| a + b)
        .collect();
    let z_e = phi.map(&e_pre);
    let logits_y = p.w_y.matvec(&z_e);
    let logits_yi = p.w_yi.matvec(&z_e);
    let logits_ya = p.w_ya.matvec(&z_e);
    Ok(ForwardTrace {
        z_y: softmax(&logits_y),
        z_yi: softmax(&logits_yi),
        z_ya: softmax(&logits_ya),
        z_i,
        z_a,
        fused,
        u,
        p_pre,
        z_p,
        e_pre,
        z_e,
        logits_y,
        logits_yi,
        logits_ya,
    })
}
