//! L-infinity perturbation machinery.
//!
//! Every attack works on a batch `x [m x d]` of clean inputs (a single
//! `[d]` input is treated as one row) and returns the adversarial points
//! together with `delta = adv - x`. Rows are independent: each row draws
//! its random numbers from its own ChaCha stream keyed by
//! `(rng_seed, purpose, row)`, so splitting a batch never changes results.
//!
//! Steps are signed-gradient steps followed by projection onto
//! `B_eps(x) ∩ clamp`. Initializations that solve an auxiliary problem
//! (backward smoothing, ODI, PGD-backward) take exactly one such step from
//! `x` and cost one gradient pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph};
use crate::error::{Error, Result};
use crate::models::{as_batch, ModelParams};
use crate::tensor::Tensor;

/// Feasibility slack for floating-point roundoff.
pub const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    Zero,
    Random,
    BackwardSmoothing,
    #[serde(alias = "ODI")]
    Odi,
    #[serde(alias = "PGDBackward")]
    PgdBackward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// L-infinity budget.
    pub epsilon: f64,
    /// Step size of each ascent step.
    pub alpha: f64,
    /// Number of ascent steps after initialization.
    pub steps: usize,
    pub init: InitKind,
    /// Logit-space smoothing magnitude for backward smoothing.
    pub gamma: f64,
    /// Random logit points averaged into the backward-smoothing target.
    pub n_psi: usize,
    /// Step size of the initialization step; `alpha` when unset.
    pub init_alpha: Option<f64>,
    /// Value bounds for `x + delta`; `None` disables clamping.
    pub clamp: Option<(f64, f64)>,
    /// Return the iterate with the highest objective instead of the last.
    pub best_iterate: bool,
    pub rng_seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            epsilon: 0.031,
            alpha: 2.0 / 255.0,
            steps: 10,
            init: InitKind::Random,
            gamma: 1.0,
            n_psi: 1,
            init_alpha: None,
            clamp: Some((0.0, 1.0)),
            best_iterate: false,
            rng_seed: 0,
        }
    }
}

impl AttackSpec {
    /// `steps`-step PGD with random start and best-iterate tracking.
    pub fn pgd(epsilon: f64, alpha: f64, steps: usize) -> Self {
        AttackSpec {
            epsilon,
            alpha,
            steps,
            init: InitKind::Random,
            best_iterate: true,
            ..AttackSpec::default()
        }
    }

    pub fn init_step(&self) -> f64 {
        self.init_alpha.unwrap_or(self.alpha)
    }

    /// Lists every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            v.push(format!("epsilon must be finite and >= 0 (got {})", self.epsilon));
        }
        let needs_init_step = matches!(
            self.init,
            InitKind::BackwardSmoothing | InitKind::Odi | InitKind::PgdBackward
        );
        if (self.steps > 0 || needs_init_step) && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha must be > 0 (got {})", self.alpha));
        }
        if let Some(a) = self.init_alpha {
            if !(a > 0.0 && a.is_finite()) {
                v.push(format!("init_alpha must be > 0 (got {a})"));
            }
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            v.push(format!("gamma must be finite and >= 0 (got {})", self.gamma));
        }
        if self.n_psi == 0 {
            v.push("n_psi must be >= 1".into());
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                v.push(format!("clamp bounds must satisfy lo < hi (got [{lo}, {hi}])"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().as_slice() {
            [] => Ok(()),
            errs => Err(Error::invalid(errs.join("; "))),
        }
    }
}

/// A batch of perturbations and the points they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    /// `adv - x`, `[m x d]`.
    pub delta: Tensor,
    /// `x + delta` exactly as projected.
    pub adv: Tensor,
    /// Whether every row satisfies the budget and clamp bounds.
    pub feasible: bool,
    /// Input-gradient passes spent, counting one per batch.
    pub grad_passes: usize,
}

impl Perturbation {
    fn from_points(x: &Tensor, adv: Tensor, spec: &AttackSpec, grad_passes: usize) -> Self {
        let delta = adv.sub(x).expect("same shape");
        let feasible = is_feasible(x, &adv, spec.epsilon, spec.clamp);
        Perturbation {
            delta,
            adv,
            feasible,
            grad_passes,
        }
    }
}

/// Checks `||adv - x||_inf <= eps` (up to roundoff) and the clamp bounds.
pub fn is_feasible(x: &Tensor, adv: &Tensor, eps: f64, clamp: Option<(f64, f64)>) -> bool {
    x.data().iter().zip(adv.data()).all(|(&a, &b)| {
        (b - a).abs() <= eps + FEASIBILITY_TOL && clamp.is_none_or(|(lo, hi)| (lo..=hi).contains(&b))
    })
}

/// Clip into `[x0 - eps, x0 + eps]`, then into the clamp bounds.
pub fn project(x0: &Tensor, x: &Tensor, eps: f64, clamp: Option<(f64, f64)>) -> Result<Tensor> {
    if x0.len() != x.len() {
        return Err(Error::shape(format!("project: {:?} vs {:?}", x0.shape(), x.shape())));
    }
    let mut out = x.clone();
    project_into(x0.data(), out.data_mut(), eps, clamp);
    Ok(out)
}

fn project_into(x0: &[f64], z: &mut [f64], eps: f64, clamp: Option<(f64, f64)>) {
    for (v, &c) in z.iter_mut().zip(x0) {
        let mut p = v.clamp(c - eps, c + eps);
        if let Some((lo, hi)) = clamp {
            p = p.clamp(lo, hi);
        }
        *v = p;
    }
}

/// Uniform sample from `[-eps, eps]^d`.
pub fn random_init<R: Rng + ?Sized>(eps: f64, d: usize, rng: &mut R) -> Tensor {
    let data = (0..d)
        .map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 })
        .collect();
    Tensor::from_raw(vec![d], data)
}

/// `alpha * sign(grad)` with `sign(0) = 0`.
pub fn fgsm_step(grad: &Tensor, alpha: f64) -> Tensor {
    grad.map(|g| alpha * sign(g))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar objective evaluated per row of a batch.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// `CE(f(z_i), y_i)`
    CrossEntropy(&'a [usize]),
    /// `KL(t_i || softmax(f(z_i)))` for fixed probability rows `t`.
    Kl(&'a Tensor),
    /// `f(z_i) . psi_i`
    LogitDot(&'a Tensor),
    /// `([f(z_i)]_{y_i} - o_i)^2`
    LogitResidual { labels: &'a [usize], offsets: &'a [f64] },
}

fn build_objective(params: &ModelParams, z: &Tensor, obj: Objective<'_>, want_grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, false);
    let zv = if want_grad {
        g.variable(z.clone())
    } else {
        g.constant(z.clone())
    };
    let logits = model.forward(&mut g, zv)?;
    let rows = match obj {
        Objective::CrossEntropy(y) => g.softmax_ce(logits, y)?,
        Objective::Kl(t) => g.kl_target(logits, t)?,
        Objective::LogitDot(psi) => {
            let p = g.constant(psi.as_matrix());
            let prod = g.mul(logits, p)?;
            let c = g.value(prod).cols();
            // row sums via a ones-vector affine map
            let w = g.constant(Tensor::full(&[1, c], 1.0));
            let b = g.constant(Tensor::zeros(&[1]));
            g.affine(prod, w, b)?
        }
        Objective::LogitResidual { labels, offsets } => {
            let picked = g.pick(logits, labels)?;
            let o = g.constant(Tensor::from_raw(vec![offsets.len()], offsets.to_vec()));
            let r = g.sub(picked, o)?;
            g.square(r)
        }
    };
    let values = g.value(rows).data().to_vec();
    if !want_grad {
        return Ok((values, None));
    }
    let total = g.sum(rows);
    let grads = g.backward(total)?;
    Ok((values, Some(grads.wrt(zv).reshape(z.shape().to_vec())?)))
}

/// Per-row objective values and their gradient with respect to `z`.
pub fn objective_grad(params: &ModelParams, z: &Tensor, obj: Objective<'_>) -> Result<(Vec<f64>, Tensor)> {
    let (v, g) = build_objective(params, z, obj, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Per-row objective values (forward pass only).
pub fn objective_values(params: &ModelParams, z: &Tensor, obj: Objective<'_>) -> Result<Vec<f64>> {
    Ok(build_objective(params, z, obj, false)?.0)
}

const STREAM_INIT: u64 = 1;
const STREAM_PSI: u64 = 2;

/// Random stream for one row and purpose.
pub(crate) fn row_rng(seed: u64, purpose: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(row as u64);
    rng
}

/// `n_psi` draws of `psi ~ U(-1, 1)^c` per row, as `n_psi` tensors `[m x c]`.
pub fn draw_psi(spec: &AttackSpec, m: usize, c: usize) -> Vec<Tensor> {
    let mut out = vec![Tensor::zeros(&[m, c]); spec.n_psi];
    for i in 0..m {
        let mut rng = row_rng(spec.rng_seed, STREAM_PSI, i);
        for psi in out.iter_mut() {
            for v in psi.row_mut(i) {
                *v = rng.random_range(-1.0..=1.0);
            }
        }
    }
    out
}

fn checked_batch(params: &ModelParams, x: &Tensor, spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    as_batch(x, params.input_dim())
}

/// One signed step from `z`, then projection around `x0`.
fn step_and_project(x0: &Tensor, z: &Tensor, grad: &Tensor, step: f64, spec: &AttackSpec) -> Tensor {
    let mut out = z.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        *v += step * sign(g);
    }
    project_into(x0.data(), out.data_mut(), spec.epsilon, spec.clamp);
    out
}

/// `x + U(-eps, eps)` per row, projected onto the clamp box.
pub fn random_start_points(x: &Tensor, spec: &AttackSpec) -> Tensor {
    let mut z = x.clone();
    let d = x.cols();
    for i in 0..x.rows() {
        let mut rng = row_rng(spec.rng_seed, STREAM_INIT, i);
        let noise = random_init(spec.epsilon, d, &mut rng);
        for (v, n) in z.row_mut(i).iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    project_into(x.data(), z.data_mut(), spec.epsilon, spec.clamp);
    z
}

/// Backward-smoothing target `mean_j softmax(f(x) + gamma psi_j)`.
pub fn smoothing_target(clean_logits: &Tensor, psis: &[Tensor], gamma: f64) -> Result<Tensor> {
    let mut acc = Tensor::zeros(&[clean_logits.rows(), clean_logits.cols()]);
    for psi in psis {
        let shifted = clean_logits.zip_map(psi, |z, p| z + gamma * p)?;
        let s = softmax_rows(&shifted);
        for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let k = psis.len() as f64;
    if psis.len() > 1 {
        acc.data_mut().iter_mut().for_each(|v| *v /= k);
    }
    Ok(acc)
}

/// Backward smoothing with explicit logit noise (`n_psi` tensors `[m x c]`).
pub fn backward_smoothing_init_with_psi(params: &ModelParams, x: &Tensor, psis: &[Tensor], spec: &AttackSpec) -> Result<Perturbation> {
    let x = checked_batch(params, x, spec)?;
    if psis.is_empty() {
        return Err(Error::invalid("at least one psi draw is required"));
    }
    let clean = params.logits(&x)?;
    let target = smoothing_target(&clean, psis, spec.gamma)?;
    let (_, grad) = objective_grad(params, &x, Objective::Kl(&target))?;
    let adv = step_and_project(&x, &x, &grad, -spec.init_step(), spec);
    Ok(Perturbation::from_points(&x, adv, spec, 1))
}

/// One signed descent step on `xi -> KL(t, softmax(f(x + xi)))` from
/// `xi = 0`, with `t` averaged over `n_psi` random logit shifts.
pub fn backward_smoothing_init(params: &ModelParams, x: &Tensor, spec: &AttackSpec) -> Result<Perturbation> {
    let m = x.rows();
    let psis = draw_psi(spec, m, params.num_classes());
    backward_smoothing_init_with_psi(params, x, &psis, spec)
}

pub fn odi_init_with_psi(params: &ModelParams, x: &Tensor, psi: &Tensor, spec: &AttackSpec) -> Result<Perturbation> {
    let x = checked_batch(params, x, spec)?;
    let (_, grad) = objective_grad(params, &x, Objective::LogitDot(psi))?;
    let adv = step_and_project(&x, &x, &grad, spec.init_step(), spec);
    Ok(Perturbation::from_points(&x, adv, spec, 1))
}

/// One signed ascent step on `xi -> f(x + xi) . psi` from `xi = 0`.
pub fn odi_init(params: &ModelParams, x: &Tensor, spec: &AttackSpec) -> Result<Perturbation> {
    let psi = draw_psi(&AttackSpec { n_psi: 1, ..spec.clone() }, x.rows(), params.num_classes());
    odi_init_with_psi(params, x, &psi[0], spec)
}

pub fn pgd_backward_init_with_psi(params: &ModelParams, x: &Tensor, y: &[usize], psi: &Tensor, spec: &AttackSpec) -> Result<Perturbation> {
    let x = checked_batch(params, x, spec)?;
    let c = params.num_classes();
    if let Some(&bad) = y.iter().find(|&&v| v >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    if y.len() != x.rows() || psi.rows() != x.rows() {
        return Err(Error::shape("labels/psi rows do not match batch"));
    }
    let offsets: Vec<f64> = y.iter().enumerate().map(|(i, &yi)| spec.gamma * psi.row(i)[yi]).collect();
    let obj = Objective::LogitResidual {
        labels: y,
        offsets: &offsets,
    };
    let (_, grad) = objective_grad(params, &x, obj)?;
    let adv = step_and_project(&x, &x, &grad, -spec.init_step(), spec);
    Ok(Perturbation::from_points(&x, adv, spec, 1))
}

/// One signed descent step on `xi -> ([f(x + xi)]_y - gamma psi_y)^2`.
pub fn pgd_backward_init(params: &ModelParams, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Perturbation> {
    let psi = draw_psi(&AttackSpec { n_psi: 1, ..spec.clone() }, x.rows(), params.num_classes());
    pgd_backward_init_with_psi(params, x, y, &psi[0], spec)
}

/// Starting point per `spec.init`, with the gradient passes it cost.
fn initial_point(params: &ModelParams, x: &Tensor, labels: Option<&[usize]>, spec: &AttackSpec) -> Result<(Tensor, usize)> {
    Ok(match spec.init {
        InitKind::Zero => (x.clone(), 0),
        InitKind::Random => (random_start_points(x, spec), 0),
        InitKind::BackwardSmoothing => {
            let p = backward_smoothing_init(params, x, spec)?;
            (p.adv, p.grad_passes)
        }
        InitKind::Odi => {
            let p = odi_init(params, x, spec)?;
            (p.adv, p.grad_passes)
        }
        InitKind::PgdBackward => {
            let y = labels.ok_or_else(|| Error::invalid("PGD-backward initialization needs labels"))?;
            let p = pgd_backward_init(params, x, y, spec)?;
            (p.adv, p.grad_passes)
        }
    })
}

/// Signed-gradient ascent on `obj` for `spec.steps` steps from `z0`.
fn ascend(params: &ModelParams, x0: &Tensor, z0: Tensor, obj: Objective<'_>, spec: &AttackSpec) -> Result<(Tensor, usize)> {
    let mut z = z0;
    let mut best: Option<(Vec<f64>, Tensor)> = None;
    for _ in 0..spec.steps {
        let (vals, grad) = objective_grad(params, &z, obj)?;
        if spec.best_iterate {
            keep_best(&mut best, &vals, &z);
        }
        z = step_and_project(x0, &z, &grad, spec.alpha, spec);
    }
    if spec.best_iterate && spec.steps > 0 {
        let vals = objective_values(params, &z, obj)?;
        keep_best(&mut best, &vals, &z);
        z = best.expect("at least one iterate").1;
    }
    Ok((z, spec.steps))
}

fn keep_best(best: &mut Option<(Vec<f64>, Tensor)>, vals: &[f64], z: &Tensor) {
    match best {
        None => *best = Some((vals.to_vec(), z.clone())),
        Some((bv, bz)) => {
            for (i, &v) in vals.iter().enumerate() {
                if v > bv[i] {
                    bv[i] = v;
                    bz.row_mut(i).copy_from_slice(z.row(i));
                }
            }
        }
    }
}

/// K-step signed PGD on the cross-entropy loss from `spec.init`.
pub fn pgd_attack(params: &ModelParams, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Perturbation> {
    let x = checked_batch(params, x, spec)?;
    if y.len() != x.rows() {
        return Err(Error::shape(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    let (z0, init_passes) = initial_point(params, &x, Some(y), spec)?;
    let (z, passes) = ascend(params, &x, z0, Objective::CrossEntropy(y), spec)?;
    Ok(Perturbation::from_points(&x, z, spec, init_passes + passes))
}

/// Like [`pgd_attack`] but starting from a given feasible point.
pub fn pgd_attack_from(params: &ModelParams, x: &Tensor, y: &[usize], start: &Tensor, spec: &AttackSpec) -> Result<Perturbation> {
    let x = checked_batch(params, x, spec)?;
    let z0 = project(&x, &start.as_matrix(), spec.epsilon, spec.clamp)?;
    let (z, passes) = ascend(params, &x, z0, Objective::CrossEntropy(y), spec)?;
    Ok(Perturbation::from_points(&x, z, spec, passes))
}

/// Inner maximization of `KL(softmax(f(x)) || softmax(f(x + delta)))`.
///
/// The clean distribution is computed once and held fixed. With a
/// backward-smoothing init the ascent starts from `x + xi*` and every step
/// projects the combined point into `B_eps(x) ∩ clamp`.
pub fn trades_inner_max(params: &ModelParams, x: &Tensor, spec: &AttackSpec) -> Result<Perturbation> {
    trades_inner_max_labeled(params, x, None, spec)
}

/// [`trades_inner_max`] with labels, which the PGD-backward init needs.
pub fn trades_inner_max_labeled(params: &ModelParams, x: &Tensor, y: Option<&[usize]>, spec: &AttackSpec) -> Result<Perturbation> {
    let x = checked_batch(params, x, spec)?;
    let anchor = softmax_rows(&params.logits(&x)?);
    let (z0, init_passes) = initial_point(params, &x, y, spec)?;
    let (z, passes) = ascend(params, &x, z0, Objective::Kl(&anchor), spec)?;
    Ok(Perturbation::from_points(&x, z, spec, init_passes + passes))
}

/// Monte-Carlo estimate of `E_{xi ~ U(-1,1)^d} L(x + u xi)`.
///
/// Returns `(mean, standard error)`; `u = 0` returns `(L(x), 0)`.
pub fn smoothed_loss_estimate<F, R>(loss_fn: F, x: &Tensor, u: f64, n_samples: usize, rng: &mut R) -> Result<(f64, f64)>
where
    F: Fn(&Tensor) -> f64,
    R: Rng + ?Sized,
{
    if !(u >= 0.0) {
        return Err(Error::invalid("smoothing radius must be >= 0"));
    }
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if u == 0.0 {
        return Ok((loss_fn(x), 0.0));
    }
    let mut probe = x.clone();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for (p, &c) in probe.data_mut().iter_mut().zip(x.data()) {
            *p = c + u * rng.random_range(-1.0..=1.0);
        }
        samples.push(loss_fn(&probe));
    }
    let n = n_samples as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if n_samples == 1 {
        return Ok((mean, 0.0));
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
