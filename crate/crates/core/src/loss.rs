//! The composite training loss: task term plus stability, smoothness and
//! alignment regularizers with trainable combination coefficients.
//!
//! A naive trainable coefficient multiplying a nonnegative loss is driven
//! to -inf by gradient descent, so each coefficient is parameterized as
//! lambda = exp(-s) with an additive +s penalty (uncertainty-style
//! weighting). Coefficients stay strictly positive and trainable.
//!
//! The smoothness term penalizes the Jacobian of the full latent-to-
//! parameter map. Because the generator's Jacobian has the closed form
//!
//!     d theta_j / d z_i = out_scale * act'(a_j) * (W0[j][i] + 2 alpha z_i)
//!
//! both the Hutchinson probe estimate and the exact value are first-order
//! expressions on the tape; no double backward is needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{
    generate_perturbed, Activation, GenerationOutput, MappingPlan,
};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::zoo::{forward_spec, TargetArchitecture};

/// Which regularizers are active. Disabled terms are absent from the
/// graph entirely, so an ablated loss is bit-equal to the masked sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub stability: bool,
    pub smoothness: bool,
    pub alignment: bool,
}

impl LossMask {
    pub fn all() -> Self {
        LossMask {
            stability: true,
            smoothness: true,
            alignment: true,
        }
    }

    pub fn task_only() -> Self {
        LossMask {
            stability: false,
            smoothness: false,
            alignment: false,
        }
    }

    pub fn enabled_terms(&self) -> usize {
        self.stability as usize + self.smoothness as usize + self.alignment as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothMode {
    Hutchinson,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Stability,
    Smoothness,
    Alignment,
}

impl TermKind {
    pub fn name(self) -> &'static str {
        match self {
            TermKind::Stability => "stability",
            TermKind::Smoothness => "smoothness",
            TermKind::Alignment => "alignment",
        }
    }
}

/// Trainable log-weights, one scalar per enabled term (shared across
/// units) or one per unit for the per-unit terms when configured.
#[derive(Debug, Clone)]
pub struct CoeffState<F> {
    pub s_stab: Option<Vec<F>>,
    pub s_smooth: Option<Vec<F>>,
    pub s_align: Option<Vec<F>>,
}

impl<F: Scalar> CoeffState<F> {
    /// Zero-initialized coefficients (lambda = 1 at step 0). Stability is
    /// always a single global term; the per-unit switch applies to the
    /// unit-local terms.
    pub fn new(mask: LossMask, units: usize, per_unit: bool) -> Self {
        let width = if per_unit { units } else { 1 };
        CoeffState {
            s_stab: mask.stability.then(|| vec![F::ZERO; 1]),
            s_smooth: mask.smoothness.then(|| vec![F::ZERO; width]),
            s_align: mask.alignment.then(|| vec![F::ZERO; width]),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.s_stab.as_ref().map_or(0, Vec::len)
            + self.s_smooth.as_ref().map_or(0, Vec::len)
            + self.s_align.as_ref().map_or(0, Vec::len)
    }

    /// Effective lambda per term (mean over units when per-unit).
    pub fn lambdas(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        for (name, s) in [
            ("stability", &self.s_stab),
            ("smoothness", &self.s_smooth),
            ("alignment", &self.s_align),
        ] {
            if let Some(v) = s {
                let mean =
                    v.iter().map(|x| (-x.to_f64()).exp()).sum::<f64>() / v.len() as f64;
                out.push((name, mean));
            }
        }
        out
    }
}

/// Mean cross-entropy task loss for classification.
pub fn task_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean squared error task loss for regression.
pub fn task_loss_mse<F: Scalar>(tape: &mut Tape<F>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Output-change penalty under a latent perturbation: parameters are
/// regenerated from z + eps (one Gaussian draw per step per unit) and the
/// same minibatch is pushed through the target again; the loss is the mean
/// squared output difference, with gradients flowing through both branches.
pub fn stability_loss<F: Scalar>(
    tape: &mut Tape<F>,
    arch: &TargetArchitecture,
    plan: &MappingPlan<F>,
    gen: &GenerationOutput,
    x: Var,
    clean_out: Var,
    sigma: f64,
    rng: &mut SeedRng,
) -> Result<Var> {
    let mut perturbed_params = Vec::with_capacity(plan.spec.layers().len());
    for (u, ug) in plan.units.iter().zip(&gen.units) {
        let d = u.state.d();
        let mut eps = vec![0.0f64; d];
        rng.fill_standard_normal(&mut eps);
        let eps: Vec<F> = eps.iter().map(|&e| F::from_f64(e * sigma)).collect();
        let pg = generate_perturbed(tape, &u.state, &ug.gen, &eps)?;
        let layer_vars = crate::mapping::partition_range(
            tape,
            pg.theta,
            &plan.spec,
            u.layer_range.clone(),
            u.offset,
        )?;
        perturbed_params.extend(layer_vars);
    }
    let out_p = forward_spec(tape, arch, &plan.spec, &perturbed_params, x)?;
    let diff = tape.sub(out_p, clean_out)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// act'(a) as tape nodes, reusing the saved activation output.
fn activation_deriv<F: Scalar>(
    tape: &mut Tape<F>,
    activation: Activation,
    act_out: Var,
) -> Option<Var> {
    match activation {
        Activation::Tanh => {
            // 1 - tanh(a)^2
            let sq = tape.square(act_out);
            let neg = tape.scale(sq, -F::ONE);
            Some(tape.add_const(neg, F::ONE))
        }
        Activation::Linear => None,
    }
}

/// Squared Frobenius norm of the generator Jacobian for one unit,
/// estimated with `probes` Hutchinson probes v ~ N(0, I_P):
/// E ||J^T v||^2 = ||J||_F^2.
pub fn smoothness_unit_hutchinson<F: Scalar>(
    tape: &mut Tape<F>,
    unit: &crate::mapping::PlanUnit<F>,
    g: &crate::mapping::Generated,
    probes: usize,
    rng: &mut SeedRng,
) -> Result<Var> {
    let st = &unit.state;
    let p = st.p();
    let two_alpha = st.alpha * F::from_f64(2.0);
    let deriv = activation_deriv(tape, st.activation, g.act);
    let mut acc: Option<Var> = None;
    for _ in 0..probes {
        let mut v = vec![0.0f64; p];
        rng.fill_standard_normal(&mut v);
        let v: Vec<F> = v.iter().map(|&x| F::from_f64(x)).collect();
        let v = tape.constant(Tensor::from_vec(v));
        let u = match deriv {
            Some(dv) => tape.mul(dv, v)?,
            None => v,
        };
        // J^T v = W0^T u + 2 alpha z * sum(u)
        let t1 = tape.map_matvec_t(&st.w0, u)?;
        let su = tape.sum(u);
        let zs = tape.mul(g.z, su)?;
        let t2 = tape.scale(zs, two_alpha);
        let jv = tape.add(t1, t2)?;
        let n = tape.frobenius_norm_sq(jv);
        acc = Some(match acc {
            Some(a) => tape.add(a, n)?,
            None => n,
        });
    }
    let total = acc.expect("probes >= 1");
    let mean = tape.scale(total, F::ONE / F::from_f64(probes as f64));
    Ok(tape.scale(mean, st.out_scale * st.out_scale))
}

/// Exact closed form:
/// ||J||_F^2 = out_scale^2 * sum_j act'(a_j)^2 (rn_j + 4 alpha m_j + 4 alpha^2 s)
/// where rn_j is the j-th squared row norm of W0, m = W0 z and s = sum z^2.
pub fn smoothness_unit_exact<F: Scalar>(
    tape: &mut Tape<F>,
    unit: &crate::mapping::PlanUnit<F>,
    g: &crate::mapping::Generated,
) -> Result<Var> {
    let st = &unit.state;
    let four_alpha = st.alpha * F::from_f64(4.0);
    let four_alpha_sq = st.alpha * st.alpha * F::from_f64(4.0);
    let rn: Vec<F> = st.w0.row_norms_sq().iter().map(|&v| F::from_f64(v)).collect();
    let rn = tape.constant(Tensor::from_vec(rn));
    let m4 = tape.scale(g.matvec, four_alpha);
    let t = tape.add(rn, m4)?;
    let s4 = tape.scale(g.sumsq, four_alpha_sq);
    let t = tape.add(t, s4)?; // scalar broadcast
    let total = match activation_deriv(tape, st.activation, g.act) {
        Some(dv) => {
            let dsq = tape.square(dv);
            let w = tape.mul(dsq, t)?;
            tape.sum(w)
        }
        None => tape.sum(t),
    };
    Ok(tape.scale(total, st.out_scale * st.out_scale))
}

/// Jacobian-norm penalty over all units (the full map's Jacobian is block
/// diagonal, so unit contributions add).
pub fn smoothness_loss<F: Scalar>(
    tape: &mut Tape<F>,
    plan: &MappingPlan<F>,
    gen: &GenerationOutput,
    probes: usize,
    mode: SmoothMode,
    rng: &mut SeedRng,
) -> Result<Var> {
    if probes == 0 {
        return Err(Error::Config("smoothness probes must be >= 1".into()));
    }
    let mut acc: Option<Var> = None;
    for (u, ug) in plan.units.iter().zip(&gen.units) {
        let term = match mode {
            SmoothMode::Hutchinson => smoothness_unit_hutchinson(tape, u, &ug.gen, probes, rng)?,
            SmoothMode::Exact => smoothness_unit_exact(tape, u, &ug.gen)?,
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("plan has at least one unit"))
}

/// 1 - cos(z, row-mean of the modulated matrix) for one unit. The row
/// mean equals col_means(W0) + alpha * z, so no P x d buffer is touched.
/// Degenerate directions (zero z or zero mean) yield the neutral value 1
/// with no gradient; the flag reports that this happened.
pub fn alignment_unit_term<F: Scalar>(
    tape: &mut Tape<F>,
    unit: &crate::mapping::PlanUnit<F>,
    g: &crate::mapping::Generated,
) -> Result<(Var, bool)> {
    let st = &unit.state;
    let cm: Vec<F> = st.w0.col_means().iter().map(|&v| F::from_f64(v)).collect();
    let cm = tape.constant(Tensor::from_vec(cm));
    let zs = tape.scale(g.z, st.alpha);
    let wm = tape.add(cm, zs)?;
    let z_norm: f64 = tape
        .value(g.z)
        .data()
        .iter()
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    let wm_norm: f64 = tape
        .value(wm)
        .data()
        .iter()
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if z_norm == 0.0 || wm_norm < 1e-12 {
        return Ok((tape.constant(Tensor::scalar(F::ONE)), true));
    }
    let c = tape.cosine_similarity(g.z, wm)?;
    let neg = tape.scale(c, -F::ONE);
    Ok((tape.add_const(neg, F::ONE), false))
}

/// Alignment averaged over units.
pub fn alignment_loss<F: Scalar>(
    tape: &mut Tape<F>,
    plan: &MappingPlan<F>,
    gen: &GenerationOutput,
) -> Result<(Var, bool)> {
    let mut degenerate = false;
    let mut acc: Option<Var> = None;
    for (u, ug) in plan.units.iter().zip(&gen.units) {
        let (term, d) = alignment_unit_term(tape, u, &ug.gen)?;
        degenerate |= d;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let total = acc.expect("plan has at least one unit");
    let n = plan.units.len();
    Ok((
        tape.scale(total, F::ONE / F::from_f64(n as f64)),
        degenerate,
    ))
}

/// L = task + sum over enabled terms of exp(-s) * term + s.
///
/// `terms` pairs each term value with its coefficient leaves; a width-n
/// coefficient vector expects n per-unit term values.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    task: Var,
    terms: &[(Var, Var)],
) -> Result<Var> {
    let mut total = task;
    for &(term, s_leaf) in terms {
        let neg_s = tape.scale(s_leaf, -F::ONE);
        let lam = tape.exp(neg_s);
        let weighted = tape.mul(lam, term)?;
        let with_reg = tape.add(weighted, s_leaf)?;
        total = tape.add(total, with_reg)?;
    }
    Ok(total)
}
