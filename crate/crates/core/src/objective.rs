//! Training objectives, their gradients, and the Adam optimizer.
//!
//! Every loss is expressed as a function of the three head distributions, so
//! the reverse pass is: loss → d/d(probabilities) → softmax Jacobian →
//! d/d(logits) → encoder. [`backward`] handles everything from the logits down.

use serde::{Deserialize, Serialize};

use crate::corpus::{Histogram, LabelSpace};
use crate::error::{DiscoError, Result};
use crate::linalg::{dot, softmax_backward};
use crate::model::{forward, DiscoConfig, DiscoParams, ForwardTrace};

/// Gradients share the parameter layout.
pub type GradientSet = DiscoParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// NLL on `z_y` plus KL terms on the item and annotator heads.
    CompositeKl,
    /// Wasserstein between the item histogram and `z_yI`.
    Wasserstein,
    /// |expected label − gold value| on `z_y`.
    Mae,
    /// `alpha · wasserstein + (1 − alpha) · mae`.
    Combined,
    /// Wasserstein on even epochs, MAE on odd epochs.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub lambda_item: f64,
    pub lambda_annot: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::CompositeKl,
            alpha: 0.6,
            lambda_item: 1.0,
            lambda_annot: 1.0,
        }
    }
}

/// The objective actually applied in a given epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CompositeKl,
    Wasserstein,
    Mae,
    Combined,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::CompositeKl => "composite_kl",
            Objective::Wasserstein => "wasserstein",
            Objective::Mae => "mae",
            Objective::Combined => "combined",
        }
    }
}

impl LossConfig {
    pub fn composite(lambda_item: f64, lambda_annot: f64) -> Self {
        LossConfig {
            kind: LossKind::CompositeKl,
            lambda_item,
            lambda_annot,
            ..Default::default()
        }
    }

    pub fn of_kind(kind: LossKind) -> Self {
        LossConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn combined(alpha: f64) -> Self {
        LossConfig {
            kind: LossKind::Combined,
            alpha,
            ..Default::default()
        }
    }

    pub fn objective_at(&self, epoch: usize) -> Objective {
        match self.kind {
            LossKind::CompositeKl => Objective::CompositeKl,
            LossKind::Wasserstein => Objective::Wasserstein,
            LossKind::Mae => Objective::Mae,
            LossKind::Combined => Objective::Combined,
            LossKind::Alternating if epoch.is_multiple_of(2) => Objective::Wasserstein,
            LossKind::Alternating => Objective::Mae,
        }
    }

    pub fn validate(&self, ls: &LabelSpace) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DiscoError::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.lambda_item >= 0.0 && self.lambda_annot >= 0.0) {
            return Err(DiscoError::Config("KL weights must be >= 0".into()));
        }
        if self.kind != LossKind::CompositeKl {
            ls.require_ordinal("the wasserstein/mae family of losses")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Per-example losses

/// `−ln z_y[y]`.
pub fn loss_nll(trace: &ForwardTrace, y: usize) -> f64 {
    -trace.z_y[y].ln()
}

/// `KL(target ‖ pred)` with `0 · ln 0 = 0`.
pub fn loss_kl(target: &Histogram, pred: &[f64]) -> f64 {
    kl_divergence(&target.probs, pred)
}

pub fn kl_divergence(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t / p).ln())
        .sum()
}

/// 1-D Wasserstein-1 distance between two distributions on the points
/// `values` (which must be increasing): Σ |F_p(k) − F_q(k)| · (v[k+1] − v[k]).
pub fn wasserstein_1d(p: &[f64], q: &[f64], values: &[f64]) -> f64 {
    let (mut fp, mut fq, mut total) = (0.0, 0.0, 0.0);
    for k in 0..values.len().saturating_sub(1) {
        fp += p[k];
        fq += q[k];
        total += (fp - fq).abs() * (values[k + 1] - values[k]);
    }
    total
}

/// `d W / d pred` for [`wasserstein_1d`] with the target held fixed.
fn wasserstein_grad(target: &[f64], pred: &[f64], values: &[f64]) -> Vec<f64> {
    let c = values.len();
    let mut per_gap = vec![0.0; c];
    let (mut ft, mut fp) = (0.0, 0.0);
    for k in 0..c - 1 {
        ft += target[k];
        fp += pred[k];
        per_gap[k] = -sign(ft - fp) * (values[k + 1] - values[k]);
    }
    // pred[j] enters every CDF term with k >= j
    let mut grad = vec![0.0; c];
    let mut acc = 0.0;
    for j in (0..c).rev() {
        acc += per_gap[j];
        grad[j] = acc;
    }
    grad
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn loss_wasserstein(target: &Histogram, pred: &[f64], ls: &LabelSpace) -> Result<f64> {
    ls.require_ordinal("wasserstein loss")?;
    Ok(wasserstein_1d(&target.probs, pred, ls.values()))
}

/// Expected label value under `dist`.
pub fn expected_value(dist: &[f64], ls: &LabelSpace) -> f64 {
    dot(dist, ls.values())
}

/// `|E[v] − values[y]|` under `z_y`.
pub fn loss_mae(trace: &ForwardTrace, y: usize, ls: &LabelSpace) -> Result<f64> {
    ls.require_ordinal("mae loss")?;
    Ok((expected_value(&trace.z_y, ls) - ls.value(y)).abs())
}

pub fn loss_combined(wasserstein: f64, mae: f64, alpha: f64) -> f64 {
    alpha * wasserstein + (1.0 - alpha) * mae
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulate `scale ·` parameter gradients given loss gradients at the three
/// heads' logits.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    p: &DiscoParams,
    cfg: &DiscoConfig,
    x: &[f64],
    a: &[f64],
    trace: &ForwardTrace,
    d_logits: [&[f64]; 3],
    scale: f64,
    grads: &mut GradientSet,
) {
    let phi = cfg.activation;
    let [d_y, d_yi, d_ya] = d_logits;

    grads.w_y.add_outer(d_y, &trace.z_e, scale);
    grads.w_yi.add_outer(d_yi, &trace.z_e, scale);
    grads.w_ya.add_outer(d_ya, &trace.z_e, scale);

    let mut d_ze = p.w_y.t_matvec(d_y);
    for (acc, v) in d_ze.iter_mut().zip(p.w_yi.t_matvec(d_yi)) {
        *acc += v;
    }
    for (acc, v) in d_ze.iter_mut().zip(p.w_ya.t_matvec(d_ya)) {
        *acc += v;
    }

    let d_epre: Vec<f64> = d_ze
        .iter()
        .zip(&trace.e_pre)
        .map(|(g, &t)| g * phi.derivative(t))
        .collect();
    grads.w_e.add_outer(&d_epre, &trace.z_p, scale);

    // residual: e_pre = W_E z_P + z_P
    let d_zp: Vec<f64> = p
        .w_e
        .t_matvec(&d_epre)
        .iter()
        .zip(&d_epre)
        .map(|(a, b)| a + b)
        .collect();
    let d_ppre: Vec<f64> = d_zp
        .iter()
        .zip(&trace.p_pre)
        .map(|(g, &t)| g * phi.derivative(t))
        .collect();
    grads.w_p.add_outer(&d_ppre, &trace.u, scale);

    let d_u = p.w_p.t_matvec(&d_ppre);
    let d_fused: Vec<f64> = d_u
        .iter()
        .zip(&trace.fused)
        .map(|(g, &t)| g * phi.derivative(t))
        .collect();
    let ji = cfg.item_latent_dim;
    grads.w_i.add_outer(&d_fused[..ji], x, scale);
    grads.w_a.add_outer(&d_fused[ji..], a, scale);
}

/// One observed annotation with everything its loss can need.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub a: &'a [f64],
    pub y: usize,
    pub item_hist: &'a Histogram,
    pub annot_hist: &'a Histogram,
}

/// Loss of one example under `objective` together with its gradients at the
/// three heads' logits.
fn example_loss(
    trace: &ForwardTrace,
    ex: &Example<'_>,
    objective: Objective,
    lc: &LossConfig,
    ls: &LabelSpace,
) -> Result<(f64, [Vec<f64>; 3])> {
    let c = trace.z_y.len();
    let mut d_y = vec![0.0; c];
    let mut d_yi = vec![0.0; c];
    let mut d_ya = vec![0.0; c];
    let mut loss = 0.0;

    let add_wasserstein = |weight: f64, loss: &mut f64, d_yi: &mut Vec<f64>| -> Result<()> {
        if !ex.item_hist.is_valid() {
            return Err(DiscoError::EmptyHistogram("item".into()));
        }
        *loss += weight * wasserstein_1d(&ex.item_hist.probs, &trace.z_yi, ls.values());
        let gp = wasserstein_grad(&ex.item_hist.probs, &trace.z_yi, ls.values());
        for (d, g) in d_yi.iter_mut().zip(softmax_backward(&trace.z_yi, &gp)) {
            *d += weight * g;
        }
        Ok(())
    };
    let add_mae = |weight: f64, loss: &mut f64, d_y: &mut Vec<f64>| {
        let diff = expected_value(&trace.z_y, ls) - ls.value(ex.y);
        *loss += weight * diff.abs();
        let gp: Vec<f64> = ls.values().iter().map(|v| sign(diff) * v).collect();
        for (d, g) in d_y.iter_mut().zip(softmax_backward(&trace.z_y, &gp)) {
            *d += weight * g;
        }
    };

    match objective {
        Objective::CompositeKl => {
            if !ex.item_hist.is_valid() {
                return Err(DiscoError::EmptyHistogram("item".into()));
            }
            if !ex.annot_hist.is_valid() {
                return Err(DiscoError::EmptyHistogram("annotator".into()));
            }
            loss += loss_nll(trace, ex.y);
            d_y.copy_from_slice(&trace.z_y);
            d_y[ex.y] -= 1.0;
            if lc.lambda_item != 0.0 {
                loss += lc.lambda_item * loss_kl(ex.item_hist, &trace.z_yi);
                for ((d, p), t) in d_yi.iter_mut().zip(&trace.z_yi).zip(&ex.item_hist.probs) {
                    *d = lc.lambda_item * (p - t);
                }
            }
            if lc.lambda_annot != 0.0 {
                loss += lc.lambda_annot * loss_kl(ex.annot_hist, &trace.z_ya);
                for ((d, p), t) in d_ya.iter_mut().zip(&trace.z_ya).zip(&ex.annot_hist.probs) {
                    *d = lc.lambda_annot * (p - t);
                }
            }
        }
        Objective::Wasserstein => add_wasserstein(1.0, &mut loss, &mut d_yi)?,
        Objective::Mae => add_mae(1.0, &mut loss, &mut d_y),
        Objective::Combined => {
            add_wasserstein(lc.alpha, &mut loss, &mut d_yi)?;
            add_mae(1.0 - lc.alpha, &mut loss, &mut d_y);
        }
    }
    Ok((loss, [d_y, d_yi, d_ya]))
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
pub fn batch_loss(
    p: &DiscoParams,
    cfg: &DiscoConfig,
    batch: &[Example<'_>],
    lc: &LossConfig,
    ls: &LabelSpace,
    epoch: usize,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(DiscoError::Empty("batch is empty".into()));
    }
    lc.validate(ls)?;
    let objective = lc.objective_at(epoch);
    let scale = 1.0 / batch.len() as f64;
    let mut grads = DiscoParams::zeros(cfg);
    let mut total = 0.0;
    for ex in batch {
        if ex.y >= ls.len() {
            return Err(DiscoError::Dimension {
                what: "label index bound",
                expected: ls.len(),
                got: ex.y,
            });
        }
        let trace = forward(p, cfg, ex.x, ex.a)?;
        let (loss, [d_y, d_yi, d_ya]) = example_loss(&trace, ex, objective, lc, ls)?;
        total += loss;
        backward(
            p,
            cfg,
            ex.x,
            ex.a,
            &trace,
            [&d_y, &d_yi, &d_ya],
            scale,
            &mut grads,
        );
    }
    Ok((total * scale, grads))
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64, num_params: usize) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_params(params: &DiscoParams, lr: f64) -> Self {
        Self::new(lr, params.num_parameters())
    }

    /// One bias-corrected update of a flat parameter vector.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.update_blocks([(params, grads)]);
    }

    /// One update over several parameter blocks laid end to end.
    pub fn update_blocks<'a>(
        &mut self,
        blocks: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut offset = 0;
        for (params, grads) in blocks {
            assert_eq!(
                params.len(),
                grads.len(),
                "parameter/gradient block mismatch"
            );
            let m = &mut self.m[offset..offset + params.len()];
            let v = &mut self.v[offset..offset + params.len()];
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += params.len();
        }
        assert_eq!(
            offset,
            self.m.len(),
            "optimizer state sized for a different model"
        );
    }
}

pub fn adam_step(params: &mut DiscoParams, grads: &GradientSet, st: &mut AdamState) {
    let blocks = params
        .matrices_mut()
        .into_iter()
        .zip(grads.matrices())
        .map(|(p, g)| (p.as_mut_slice(), g.as_slice()));
    st.update_blocks(blocks);
}
