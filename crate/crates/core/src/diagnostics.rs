//! Measurement instruments: loss increment after attack, input-space
//! Hessian dominant eigenvalue, robust accuracy, catastrophic overfitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, pgd_attack, pgd_attack_from, AttackSpec, Objective, Perturbation};
use crate::autodiff::{softmax_rows, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{as_batch, ModelParams};
use crate::tensor::Tensor;

/// Which objective a loss increment is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// `CE(f(x), y)`
    CrossEntropy,
    /// `KL(softmax(f(x)) || softmax(f(x')))`
    TradesKl,
}

/// Batch-averaged loss increment of one training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaLSample {
    pub epoch: usize,
    pub batch: usize,
    pub delta_l: f64,
}

/// `mean L(x + delta) - mean L(x)` for the points of a perturbation.
pub fn loss_increment(params: &ModelParams, x: &Tensor, y: &[usize], delta: &Perturbation, kind: LossKind) -> Result<f64> {
    loss_increment_at(params, x, y, &delta.adv, kind)
}

/// Loss increment between clean inputs `x` and attacked inputs `adv`.
pub fn loss_increment_at(params: &ModelParams, x: &Tensor, y: &[usize], adv: &Tensor, kind: LossKind) -> Result<f64> {
    let x = as_batch(x, params.input_dim())?;
    let adv = as_batch(adv, params.input_dim())?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    match kind {
        LossKind::CrossEntropy => {
            let after = attacks::objective_values(params, &adv, Objective::CrossEntropy(y))?;
            let before = attacks::objective_values(params, &x, Objective::CrossEntropy(y))?;
            Ok(mean(after) - mean(before))
        }
        LossKind::TradesKl => {
            let anchor = softmax_rows(&params.logits(&x)?);
            let after = attacks::objective_values(params, &adv, Objective::Kl(&anchor))?;
            let before = attacks::objective_values(params, &x, Objective::Kl(&anchor))?;
            Ok(mean(after) - mean(before))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    /// Dominant-magnitude eigenvalue, signed.
    pub lambda: f64,
    pub iterations: usize,
    /// `||H v - lambda v||` at the last iterate.
    pub residual: f64,
}

/// Relative mismatch between one-sided gradient differences that flags a
/// gradient discontinuity inside the finite-difference stencil.
const KINK_RTOL: f64 = 0.05;

/// Largest `||Hv - lambda v|| / ||Hv||` accepted at convergence.
const EIGVEC_RTOL: f64 = 0.1;

/// Finite-difference step used for Hessian-vector products at `x`.
pub fn hvp_step(x: &Tensor) -> f64 {
    1e-4 * (1.0 + x.norm_inf())
}

/// Power iteration on the Hessian of a scalar loss at `x`.
///
/// `grad_fn` returns `dL/dx`. Hessian-vector products use central
/// differences of gradients with step [`hvp_step`]. Iteration stops when two
/// successive Rayleigh quotients differ by less than `tol` and the iterate
/// is close to an eigenvector.
pub fn hessian_max_eig<G>(grad_fn: G, x: &Tensor, max_iters: usize, tol: f64) -> Result<EigEstimate>
where
    G: Fn(&Tensor) -> Result<Tensor>,
{
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be positive"));
    }
    let h = hvp_step(x);
    let g0 = grad_fn(x)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_CAFE);
    let mut v = Tensor::from_raw(x.shape().to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let norm = v.norm2();
    v = v.scale(1.0 / norm);
    let noise_floor = 1e-9 * (1.0 + g0.norm2());

    let mut last = f64::NAN;
    for it in 1..=max_iters {
        let xp = x.zip_map(&v, |a, b| a + h * b)?;
        let xm = x.zip_map(&v, |a, b| a - h * b)?;
        let gp = grad_fn(&xp)?;
        let gm = grad_fn(&xm)?;
        let fwd = gp.sub(&g0)?;
        let bwd = g0.sub(&gm)?;
        if fwd.sub(&bwd)?.norm2() > KINK_RTOL * (fwd.norm2() + bwd.norm2()) + noise_floor {
            return Err(Error::KinkDetected);
        }
        let hv = gp.sub(&gm)?.scale(1.0 / (2.0 * h));
        let lambda = v.dot(&hv);
        let residual = hv.zip_map(&v, |a, b| a - lambda * b)?.norm2();
        let hv_norm = hv.norm2();
        // A settled quotient alone is not enough: with eigenvalues +a and -a
        // the quotient can freeze while v is no eigenvector.
        let settled = it > 1 && (lambda - last).abs() < tol && residual <= EIGVEC_RTOL * hv_norm;
        if settled || hv_norm == 0.0 {
            return Ok(EigEstimate {
                lambda,
                iterations: it,
                residual,
            });
        }
        last = lambda;
        v = hv.scale(1.0 / hv_norm);
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        last,
    })
}

/// `dCE(f(x), y)/dx` for a single `[d]` input.
pub fn input_gradient(params: &ModelParams, x: &Tensor, y: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, false);
    let xv = g.variable(as_batch(x, params.input_dim())?);
    let logits = model.forward(&mut g, xv)?;
    let ce = g.softmax_ce(logits, &[y])?;
    let s = g.sum(ce);
    g.backward(s)?.wrt(xv).reshape(x.shape().to_vec())
}

/// Hessian eigenvalue of the CE loss at `x`, moving the probe by tiny
/// deterministic offsets when the stencil straddles a ReLU kink.
pub fn probe_lambda(params: &ModelParams, x: &Tensor, y: usize, max_iters: usize, tol: f64) -> Result<EigEstimate> {
    const ATTEMPTS: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBADC0DE);
    let mut point = x.clone();
    let mut last_err = None;
    for _ in 0..ATTEMPTS {
        match hessian_max_eig(|p| input_gradient(params, p, y), &point, max_iters, tol) {
            Ok(e) => return Ok(e),
            Err(e @ (Error::KinkDetected | Error::NotConverged { .. })) => {
                last_err = Some(e);
                let jitter: Vec<f64> = x.data().iter().map(|v| (v + rng.random_range(-1e-4..1e-4)).clamp(0.0, 1.0)).collect();
                point = Tensor::from_raw(x.shape().to_vec(), jitter);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Hessian eigenvalues at clean, randomly perturbed and backward-smoothed
/// versions of the same probe inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianTrend {
    pub clean: Vec<f64>,
    pub random: Vec<f64>,
    pub backward_smoothed: Vec<f64>,
    /// Points skipped because no kink-free stencil was found.
    pub skipped: usize,
}

impl HessianTrend {
    pub fn medians(&self) -> (f64, f64, f64) {
        (median(&self.clean), median(&self.random), median(&self.backward_smoothed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianProbeSpec {
    pub points: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Measure every `every` epochs (and always after the last one).
    pub every: usize,
}

impl Default for HessianProbeSpec {
    fn default() -> Self {
        HessianProbeSpec {
            points: 64,
            max_iters: 200,
            tol: 1e-6,
            every: 1,
        }
    }
}

/// Probes `lambda_max` at `x`, `x + U(-eps, eps)` and `x + xi*`, where
/// `xi*` is the backward-smoothing initialization under `spec`.
pub fn hessian_trend(params: &ModelParams, x: &Tensor, y: &[usize], spec: &AttackSpec, probe: &HessianProbeSpec) -> Result<HessianTrend> {
    let x = as_batch(x, params.input_dim())?;
    let random = attacks::random_start_points(&x, spec);
    let bs = attacks::backward_smoothing_init(params, &x, spec)?.adv;
    let mut trend = HessianTrend {
        clean: Vec::new(),
        random: Vec::new(),
        backward_smoothed: Vec::new(),
        skipped: 0,
    };
    for i in 0..x.rows() {
        let pts = [x.row(i), random.row(i), bs.row(i)];
        let mut lams = [0.0; 3];
        let mut ok = true;
        for (k, p) in pts.iter().enumerate() {
            let t = Tensor::from_raw(vec![p.len()], p.to_vec());
            match probe_lambda(params, &t, y[i], probe.max_iters, probe.tol) {
                Ok(e) => lams[k] = e.lambda,
                Err(Error::KinkDetected | Error::NotConverged { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            trend.clean.push(lams[0]);
            trend.random.push(lams[1]);
            trend.backward_smoothed.push(lams[2]);
        } else {
            trend.skipped += 1;
        }
    }
    Ok(trend)
}

const EVAL_CHUNK: usize = 256;

/// Fraction of examples classified correctly.
pub fn natural_accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        let pred = params.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn chunk_spec(spec: &AttackSpec, start: usize) -> AttackSpec {
    AttackSpec {
        rng_seed: crate::mix_seed(spec.rng_seed, start as u64),
        ..spec.clone()
    }
}

/// Fraction of examples still correctly classified after the attack.
/// Examples misclassified at `delta = 0` count as non-robust and are not
/// attacked.
pub fn robust_accuracy(params: &ModelParams, data: &Dataset, spec: &AttackSpec) -> Result<f64> {
    spec.validate()?;
    let mut robust = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        let pred = params.predict(&x)?;
        let keep: Vec<usize> = (0..idx.len()).filter(|&i| pred[i] == y[i]).collect();
        if keep.is_empty() {
            continue;
        }
        let xs = x.select_rows(&keep);
        let ys: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
        let adv = pgd_attack(params, &xs, &ys, &chunk_spec(spec, start))?;
        let pa = params.predict(&adv.adv)?;
        robust += pa.iter().zip(&ys).filter(|(p, t)| p == t).count();
    }
    Ok(robust as f64 / data.len() as f64)
}

/// Robust accuracy at increasing budgets. Each budget's attack is
/// warm-started from the previous budget's adversarial points, and an
/// example broken at a smaller budget stays broken, so the curve is
/// non-increasing.
pub fn robust_accuracy_curve(params: &ModelParams, data: &Dataset, spec: &AttackSpec, epsilons: &[f64]) -> Result<Vec<f64>> {
    if epsilons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("budgets must be non-decreasing"));
    }
    let mut robust = vec![0usize; epsilons.len()];
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        let pred = params.predict(&x)?;
        let mut alive: Vec<bool> = (0..idx.len()).map(|i| pred[i] == y[i]).collect();
        let mut current = x.clone();
        for (k, &eps) in epsilons.iter().enumerate() {
            let s = AttackSpec {
                epsilon: eps,
                ..chunk_spec(spec, start)
            };
            s.validate()?;
            let rows: Vec<usize> = (0..idx.len()).filter(|&i| alive[i]).collect();
            if !rows.is_empty() {
                let xs = x.select_rows(&rows);
                let ys: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
                let adv = pgd_attack_from(params, &xs, &ys, &current.select_rows(&rows), &s)?;
                let pa = params.predict(&adv.adv)?;
                for (j, &r) in rows.iter().enumerate() {
                    current.row_mut(r).copy_from_slice(adv.adv.row(j));
                    if pa[j] != ys[j] {
                        alive[r] = false;
                    }
                }
            }
            robust[k] += alive.iter().filter(|&&a| a).count();
        }
    }
    Ok(robust.iter().map(|&r| r as f64 / data.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverfitKind {
    /// Fell below 0.05 after having exceeded 0.20.
    Collapse,
    /// Dropped by more than 0.30 in one epoch.
    SuddenDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitEvent {
    /// 1-based epoch.
    pub epoch: usize,
    pub robust_accuracy: f64,
    pub kind: OverfitKind,
}

pub const COLLAPSE_FLOOR: f64 = 0.05;
pub const COLLAPSE_PEAK: f64 = 0.20;
pub const SUDDEN_DROP: f64 = 0.30;

/// Flags catastrophic-overfitting epochs in a robust-probe history.
///
/// An epoch is flagged when the probe falls below [`COLLAPSE_FLOOR`]
/// (from at or above it) after some earlier epoch exceeded
/// [`COLLAPSE_PEAK`], or when it drops by more than [`SUDDEN_DROP`] from
/// the previous epoch. One event per epoch; collapse takes precedence.
pub fn detect_catastrophic_overfit(history: &[f64]) -> Vec<OverfitEvent> {
    let mut events = Vec::new();
    let mut peak = f64::NEG_INFINITY;
    for (i, &v) in history.iter().enumerate() {
        if i > 0 {
            let prev = history[i - 1];
            let kind = if v < COLLAPSE_FLOOR && prev >= COLLAPSE_FLOOR && peak > COLLAPSE_PEAK {
                Some(OverfitKind::Collapse)
            } else if prev - v > SUDDEN_DROP {
                Some(OverfitKind::SuddenDrop)
            } else {
                None
            };
            if let Some(kind) = kind {
                events.push(OverfitEvent {
                    epoch: i + 1,
                    robust_accuracy: v,
                    kind,
                });
            }
        }
        peak = peak.max(v);
    }
    events
}

/// One row of the diagnostics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub epoch: usize,
    pub delta_l_mean: f64,
    pub lambda_clean_med: Option<f64>,
    pub lambda_rand_med: Option<f64>,
    pub lambda_bs_med: Option<f64>,
    pub rob_acc_probe: f64,
}

/// Column order of the diagnostics CSV.
pub const DIAGNOSTICS_COLUMNS: [&str; 6] = [
    "epoch",
    "delta_l_mean",
    "lambda_clean_med",
    "lambda_rand_med",
    "lambda_bs_med",
    "rob_acc_probe",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, ModelSpec};

    #[test]
    fn zero_delta_has_zero_increment() {
        let p = init_model(&ModelSpec::new(vec![3, 8, 3], 0).unwrap()).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.6, 0.5, 0.4]).unwrap();
        for kind in [LossKind::CrossEntropy, LossKind::TradesKl] {
            assert_eq!(loss_increment_at(&p, &x, &[0, 2], &x, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn quadratic_eigenvalues() {
        let grad = |x: &Tensor| Ok(Tensor::vector(vec![3.0 * x.data()[0], x.data()[1]])?);
        let e = hessian_max_eig(grad, &Tensor::vector(vec![0.3, -0.2]).unwrap(), 500, 1e-10).unwrap();
        assert!((e.lambda - 3.0).abs() < 1e-3, "{e:?}");
        for d in [1, 5, 40] {
            let x = Tensor::vector((0..d).map(|i| i as f64 * 0.1).collect()).unwrap();
            let e = hessian_max_eig(|x: &Tensor| Ok(x.clone()), &x, 50, 1e-10).unwrap();
            assert!((e.lambda - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_dominant_eigenvalue_keeps_sign() {
        let grad = |x: &Tensor| Ok(Tensor::vector(vec![-4.0 * x.data()[0], 1.0 * x.data()[1]])?);
        let e = hessian_max_eig(grad, &Tensor::vector(vec![0.1, 0.1]).unwrap(), 500, 1e-10).unwrap();
        assert!((e.lambda + 4.0).abs() < 1e-3);
    }

    #[test]
    fn kink_is_detected() {
        // |x| has a gradient jump at 0.
        let grad = |x: &Tensor| Ok(x.map(|v| v.signum()));
        let r = hessian_max_eig(grad, &Tensor::vector(vec![0.0, 0.0]).unwrap(), 10, 1e-8);
        assert!(matches!(r, Err(Error::KinkDetected)));
    }

    #[test]
    fn non_convergence_reports_last_estimate() {
        // Equal-magnitude eigenvalues of opposite sign: the quotient oscillates.
        let grad = |x: &Tensor| Ok(Tensor::vector(vec![2.0 * x.data()[0], -2.0 * x.data()[1]])?);
        let r = hessian_max_eig(grad, &Tensor::vector(vec![0.0, 0.0]).unwrap(), 5, 1e-12);
        assert!(matches!(r, Err(Error::NotConverged { iterations: 5, .. })));
    }

    #[test]
    fn overfit_detection_examples() {
        assert!(detect_catastrophic_overfit(&[0.1, 0.2, 0.3, 0.4]).is_empty());
        let ev = detect_catastrophic_overfit(&[0.35, 0.36, 0.02]);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].epoch, 3);
        assert_eq!(ev[0].kind, OverfitKind::Collapse);
        let ev = detect_catastrophic_overfit(&[0.9, 0.5, 0.45]);
        assert_eq!(ev[0].kind, OverfitKind::SuddenDrop);
        assert_eq!(ev[0].epoch, 2);
        // staying collapsed is not a new event
        assert_eq!(detect_catastrophic_overfit(&[0.3, 0.01, 0.0, 0.02]).len(), 1);
        assert!(detect_catastrophic_overfit(&[0.4]).is_empty());
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
