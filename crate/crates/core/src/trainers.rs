//! Minibatch SGD with adversarial inner loops.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, trades_inner_max_labeled, AttackSpec, InitKind};
use crate::autodiff::Graph;
use crate::data::{batch_indices, Dataset};
use crate::diagnostics::{
    self, detect_catastrophic_overfit, hessian_trend, loss_increment_at, natural_accuracy, robust_accuracy, DeltaLSample, DiagnosticsRow,
    HessianProbeSpec, LossKind, OverfitEvent,
};
use crate::error::{Error, Result};
use crate::models::{Layer, ModelParams};
use crate::tensor::Tensor;
use crate::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Natural,
    AT,
    FastAT,
    TRADES,
    FastTRADES,
    BackwardSmoothing,
    BackwardSmoothingPGD,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Natural,
        Strategy::AT,
        Strategy::FastAT,
        Strategy::TRADES,
        Strategy::FastTRADES,
        Strategy::BackwardSmoothing,
        Strategy::BackwardSmoothingPGD,
    ];

    /// Outer objective: CE on adversarial points, or TRADES CE + beta KL.
    pub fn loss_kind(self) -> LossKind {
        match self {
            Strategy::Natural | Strategy::AT | Strategy::FastAT | Strategy::BackwardSmoothingPGD => LossKind::CrossEntropy,
            Strategy::TRADES | Strategy::FastTRADES | Strategy::BackwardSmoothing => LossKind::TradesKl,
        }
    }

    /// Initialization the strategy forces, if any.
    pub fn forced_init(self) -> Option<InitKind> {
        match self {
            Strategy::BackwardSmoothing => Some(InitKind::BackwardSmoothing),
            Strategy::BackwardSmoothingPGD => Some(InitKind::PgdBackward),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Natural => "Natural",
            Strategy::AT => "AT",
            Strategy::FastAT => "FastAT",
            Strategy::TRADES => "TRADES",
            Strategy::FastTRADES => "FastTRADES",
            Strategy::BackwardSmoothing => "BackwardSmoothing",
            Strategy::BackwardSmoothingPGD => "BackwardSmoothingPGD",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `base_lr` times every factor whose (0-based) milestone epoch has been
    /// reached. A single factor applies at every milestone.
    Piecewise {
        base_lr: f64,
        milestones: Vec<usize>,
        factors: Vec<f64>,
    },
    /// Triangle from 0 at step 0 up to `peak_lr` at `total_steps / 2` and
    /// back to 0 at `total_steps`. `total_steps = 0` means the whole run.
    Cyclic { peak_lr: f64, total_steps: usize },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Piecewise {
            base_lr: 0.1,
            milestones: vec![50, 75],
            factors: vec![0.1],
        }
    }
}

impl LrSchedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        match self {
            LrSchedule::Constant { lr } if !pos(*lr) => v.push(format!("lr must be > 0 (got {lr})")),
            LrSchedule::Piecewise {
                base_lr,
                milestones,
                factors,
            } => {
                if !pos(*base_lr) {
                    v.push(format!("base_lr must be > 0 (got {base_lr})"));
                }
                if factors.len() != 1 && factors.len() != milestones.len() {
                    v.push(format!("{} factors for {} milestones", factors.len(), milestones.len()));
                }
                if factors.iter().any(|f| !pos(*f)) {
                    v.push("lr factors must be > 0".into());
                }
                if milestones.windows(2).any(|w| w[1] <= w[0]) {
                    v.push("milestones must be strictly increasing".into());
                }
            }
            LrSchedule::Cyclic { peak_lr, .. } if !pos(*peak_lr) => v.push(format!("peak_lr must be > 0 (got {peak_lr})")),
            _ => {}
        }
        v
    }

    /// Fills in a run-length default.
    pub fn resolved(&self, total_steps: usize) -> LrSchedule {
        match self {
            LrSchedule::Cyclic { peak_lr, total_steps: 0 } => LrSchedule::Cyclic {
                peak_lr: *peak_lr,
                total_steps,
            },
            other => other.clone(),
        }
    }
}

/// Learning rate at global `step` within 0-based `epoch`.
pub fn lr_at(schedule: &LrSchedule, step: usize, epoch: usize) -> f64 {
    match schedule {
        LrSchedule::Constant { lr } => *lr,
        LrSchedule::Piecewise {
            base_lr,
            milestones,
            factors,
        } => milestones
            .iter()
            .enumerate()
            .filter(|(_, &m)| epoch >= m)
            .fold(*base_lr, |lr, (i, _)| lr * factors.get(i).unwrap_or(&factors[0])),
        LrSchedule::Cyclic { peak_lr, total_steps } => {
            let t = step as f64 / (*total_steps).max(1) as f64;
            if t >= 1.0 {
                0.0
            } else if t <= 0.5 {
                peak_lr * 2.0 * t
            } else {
                peak_lr * 2.0 * (1.0 - t)
            }
        }
    }
}

/// Gradients of the outer loss, laid out like the model layers.
pub type ParamGrads = Vec<Layer>;

/// Plain step `theta <- theta - lr * g`.
pub fn sgd_step(params: &mut ModelParams, grads: &[Layer], lr: f64) {
    for (l, g) in params.layers_mut().iter_mut().zip(grads) {
        for (p, d) in l.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *p -= lr * d;
        }
        for (p, d) in l.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *p -= lr * d;
        }
    }
}

/// SGD with heavy-ball momentum (`v <- mu v + g`, `theta <- theta - lr v`)
/// and optional L2 weight decay. Zero momentum is [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Option<ParamGrads>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, mut grads: ParamGrads, lr: f64) {
        if self.weight_decay != 0.0 {
            for (g, l) in grads.iter_mut().zip(params.layers()) {
                for (d, p) in g.weight.data_mut().iter_mut().zip(l.weight.data()) {
                    *d += self.weight_decay * p;
                }
            }
        }
        if self.momentum == 0.0 {
            sgd_step(params, &grads, lr);
            return;
        }
        let v = match self.velocity.take() {
            None => grads,
            Some(mut v) => {
                for (vl, gl) in v.iter_mut().zip(&grads) {
                    for (a, b) in vl.weight.data_mut().iter_mut().zip(gl.weight.data()) {
                        *a = self.momentum * *a + b;
                    }
                    for (a, b) in vl.bias.data_mut().iter_mut().zip(gl.bias.data()) {
                        *a = self.momentum * *a + b;
                    }
                }
                v
            }
        };
        sgd_step(params, &v, lr);
        self.velocity = Some(v);
    }
}

/// Robust-accuracy probe run after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Leading evaluation examples used.
    pub size: usize,
    /// PGD steps; the step size is `epsilon / 4`.
    pub steps: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            size: 512,
            steps: 10,
            seed: 0x9E37,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub strategy: Strategy,
    /// TRADES trade-off weight on the KL term.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Inner attack used during training.
    pub attack: AttackSpec,
    pub seed: u64,
    pub probe: ProbeSpec,
    /// Hessian probe at clean, random and smoothed points; off when unset.
    pub hessian: Option<HessianProbeSpec>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            strategy: Strategy::BackwardSmoothing,
            beta: 6.0,
            epochs: 10,
            batch_size: 128,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 0.0,
            attack: AttackSpec::default(),
            seed: 0,
            probe: ProbeSpec::default(),
            hessian: None,
        }
    }
}

impl TrainSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            v.push(format!("beta must be finite and >= 0 (got {})", self.beta));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must be in [0, 1) (got {})", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be >= 0 (got {})", self.weight_decay));
        }
        v.extend(self.lr.violations());
        v.extend(self.effective_attack().violations().into_iter().map(|e| format!("attack: {e}")));
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().as_slice() {
            [] => Ok(()),
            errs => Err(Error::invalid(errs.join("; "))),
        }
    }

    /// The attack with strategy-forced settings applied.
    pub fn effective_attack(&self) -> AttackSpec {
        let mut a = self.attack.clone();
        if let Some(init) = self.strategy.forced_init() {
            a.init = init;
        }
        a
    }

    /// Input-gradient passes per batch spent by the inner attack.
    pub fn attack_passes_per_batch(&self) -> usize {
        if self.strategy == Strategy::Natural {
            return 0;
        }
        let a = self.effective_attack();
        let init = usize::from(matches!(a.init, InitKind::BackwardSmoothing | InitKind::Odi | InitKind::PgdBackward));
        init + a.steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// 1-based.
    pub epoch: usize,
    /// 0-based within the epoch.
    pub batch: usize,
    pub lr: f64,
    pub loss: f64,
    pub delta_l: f64,
    pub attack_passes: usize,
    pub update_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub delta_l_mean: f64,
    pub nat_train_acc: f64,
    pub nat_test_acc: f64,
    pub rob_acc_probe: f64,
    pub lambda_clean_med: Option<f64>,
    pub lambda_rand_med: Option<f64>,
    pub lambda_bs_med: Option<f64>,
}

impl EpochRecord {
    pub fn diagnostics_row(&self) -> DiagnosticsRow {
        DiagnosticsRow {
            epoch: self.epoch,
            delta_l_mean: self.delta_l_mean,
            lambda_clean_med: self.lambda_clean_med,
            lambda_rand_med: self.lambda_rand_med,
            lambda_bs_med: self.lambda_bs_med,
            rob_acc_probe: self.rob_acc_probe,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochRecord>,
    pub overfit_events: Vec<OverfitEvent>,
}

impl RunRecord {
    pub fn delta_l_samples(&self) -> Vec<DeltaLSample> {
        self.batches
            .iter()
            .map(|b| DeltaLSample {
                epoch: b.epoch,
                batch: b.batch,
                delta_l: b.delta_l,
            })
            .collect()
    }

    pub fn attack_passes(&self) -> usize {
        self.batches.iter().map(|b| b.attack_passes).sum()
    }

    /// Attack plus update gradient passes.
    pub fn grad_passes(&self) -> usize {
        self.batches.iter().map(|b| b.attack_passes + b.update_passes).sum()
    }
}

/// State at the moment a loss went non-finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub record: RunRecord,
    /// Parameters before the offending update.
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub record: RunRecord,
}

const STREAM_DATA: u64 = 0xDA7A;
const STREAM_ATTACK: u64 = 0xA77C;
const STREAM_HESSIAN: u64 = 0x4E55;

/// Mean outer loss and its parameter gradients at clean `x` and attacked `adv`.
///
/// CE family: `mean CE(f(adv), y)`. TRADES family:
/// `mean [CE(f(x), y) + beta KL(s(f(x)), s(f(adv)))]`, differentiated
/// through both arguments of the KL.
pub fn outer_loss_grad(params: &ModelParams, x: &Tensor, y: &[usize], adv: &Tensor, kind: LossKind, beta: f64) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, true);
    let rows = match kind {
        LossKind::CrossEntropy => {
            let xa = g.constant(adv.clone());
            let za = model.forward(&mut g, xa)?;
            g.softmax_ce(za, y)?
        }
        LossKind::TradesKl => {
            let xc = g.constant(x.clone());
            let zc = model.forward(&mut g, xc)?;
            let ce = g.softmax_ce(zc, y)?;
            let xa = g.constant(adv.clone());
            let za = model.forward(&mut g, xa)?;
            let kl = g.kl_logits(zc, za)?;
            let kl = g.scale(kl, beta);
            g.add(ce, kl)?
        }
    };
    let loss = g.mean(rows);
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let out = model
        .vars()
        .iter()
        .map(|&(w, b)| Layer {
            weight: grads.take(w),
            bias: grads.take(b),
        })
        .collect();
    Ok((value, out))
}

/// Inner attack for one batch, per the strategy.
fn inner_attack(spec: &TrainSpec, params: &ModelParams, x: &Tensor, y: &[usize], attack: &AttackSpec) -> Result<(Tensor, usize)> {
    let p = match spec.strategy {
        Strategy::Natural => return Ok((x.clone(), 0)),
        Strategy::AT | Strategy::FastAT | Strategy::BackwardSmoothingPGD => pgd_attack(params, x, y, attack)?,
        Strategy::TRADES | Strategy::FastTRADES | Strategy::BackwardSmoothing => trades_inner_max_labeled(params, x, Some(y), attack)?,
    };
    if !p.feasible {
        return Err(Error::invalid("attack produced an infeasible perturbation"));
    }
    Ok((p.adv, p.grad_passes))
}

/// Probe attack: PGD with random start, step `epsilon / 4`, best iterate.
pub fn probe_attack(train: &TrainSpec) -> AttackSpec {
    let eps = train.attack.epsilon;
    AttackSpec {
        rng_seed: train.probe.seed,
        clamp: train.attack.clamp,
        ..AttackSpec::pgd(eps, if eps > 0.0 { eps / 4.0 } else { 1.0 }, train.probe.steps)
    }
}

/// Batch order of epoch `epoch` (0-based) for a training set of `n` rows.
pub fn epoch_order(spec: &TrainSpec, n: usize, epoch: usize) -> Result<Vec<Vec<usize>>> {
    batch_indices(n, spec.batch_size, mix_seed(mix_seed(spec.seed, STREAM_DATA), epoch as u64))
}

/// The inner attack used at global step `step` (0-based, counted over batches).
pub fn step_attack(spec: &TrainSpec, step: usize) -> AttackSpec {
    AttackSpec {
        rng_seed: mix_seed(mix_seed(spec.seed, STREAM_ATTACK), step as u64),
        ..spec.effective_attack()
    }
}

/// Trains `init` on `train_set`, evaluating on `eval_set` after every epoch.
pub fn train(spec: &TrainSpec, init: ModelParams, train_set: &Dataset, eval_set: &Dataset) -> Result<TrainOutcome> {
    spec.validate()?;
    if train_set.dim() != init.input_dim() || eval_set.dim() != init.input_dim() {
        return Err(Error::shape("dataset dimension does not match the model input"));
    }
    let n = train_set.len();
    let per_epoch = n.div_ceil(spec.batch_size);
    let schedule = spec.lr.resolved(spec.epochs * per_epoch);
    let kind = spec.strategy.loss_kind();
    let probe_set = eval_set.subset(&(0..spec.probe.size.min(eval_set.len())).collect::<Vec<_>>());
    let probe = probe_attack(spec);

    let mut params = init;
    let mut opt = Sgd::new(spec.momentum, spec.weight_decay);
    let mut record = RunRecord::default();
    let mut step = 0usize;

    for epoch in 0..spec.epochs {
        let order = epoch_order(spec, n, epoch)?;
        let (mut loss_sum, mut dl_sum) = (0.0, 0.0);
        let mut lr = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let (x, y) = train_set.batch(idx);
            lr = lr_at(&schedule, step, epoch);
            let (adv, attack_passes) = inner_attack(spec, &params, &x, &y, &step_attack(spec, step))?;
            let delta_l = loss_increment_at(&params, &x, &y, &adv, kind)?;
            let (loss, grads) = outer_loss_grad(&params, &x, &y, &adv, kind, spec.beta)?;
            if !loss.is_finite() || grads.iter().any(|l| !l.weight.all_finite() || !l.bias.all_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    loss,
                    report: Box::new(DivergenceReport { record, params }),
                });
            }
            opt.step(&mut params, grads, lr);
            record.batches.push(BatchRecord {
                epoch: epoch + 1,
                batch: b,
                lr,
                loss,
                delta_l,
                attack_passes,
                update_passes: 1,
            });
            loss_sum += loss;
            dl_sum += delta_l;
            step += 1;
        }

        let (mut lc, mut lr_, mut lb) = (None, None, None);
        if let Some(h) = &spec.hessian {
            if (epoch + 1) % h.every.max(1) == 0 || epoch + 1 == spec.epochs {
                let k = h.points.min(eval_set.len());
                let (x, y) = eval_set.batch(&(0..k).collect::<Vec<_>>());
                let a = AttackSpec {
                    rng_seed: mix_seed(spec.seed, STREAM_HESSIAN),
                    init: InitKind::BackwardSmoothing,
                    ..spec.attack.clone()
                };
                let t = hessian_trend(&params, &x, &y, &a, h)?;
                let (c, r, s) = t.medians();
                let opt = |v: f64| (!v.is_nan()).then_some(v);
                (lc, lr_, lb) = (opt(c), opt(r), opt(s));
            }
        }

        record.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / per_epoch as f64,
            delta_l_mean: dl_sum / per_epoch as f64,
            nat_train_acc: natural_accuracy(&params, train_set)?,
            nat_test_acc: natural_accuracy(&params, eval_set)?,
            rob_acc_probe: robust_accuracy(&params, &probe_set, &probe)?,
            lambda_clean_med: lc,
            lambda_rand_med: lr_,
            lambda_bs_med: lb,
        });
    }
    let history: Vec<f64> = record.epochs.iter().map(|e| e.rob_acc_probe).collect();
    record.overfit_events = detect_catastrophic_overfit(&history);
    Ok(TrainOutcome { params, record })
}

/// Robust accuracy of trained parameters under an evaluation attack.
pub fn evaluate(params: &ModelParams, data: &Dataset, attack: &AttackSpec) -> Result<(f64, f64)> {
    Ok((natural_accuracy(params, data)?, diagnostics::robust_accuracy(params, data, attack)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::models::{init_model, ModelSpec};

    fn blobs() -> (Dataset, Dataset) {
        let d = synth_blobs(400, 0.1, 3).unwrap();
        d.split(300, 100, 1).unwrap()
    }

    fn small_spec(strategy: Strategy) -> TrainSpec {
        TrainSpec {
            strategy,
            epochs: 3,
            batch_size: 32,
            lr: LrSchedule::Constant { lr: 0.05 },
            attack: AttackSpec {
                epsilon: 0.05,
                alpha: 0.02,
                steps: 2,
                ..AttackSpec::default()
            },
            probe: ProbeSpec {
                size: 50,
                ..ProbeSpec::default()
            },
            ..TrainSpec::default()
        }
    }

    fn model() -> ModelParams {
        init_model(&ModelSpec::new(vec![2, 16, 2], 5).unwrap()).unwrap()
    }

    #[test]
    fn piecewise_schedule() {
        let s = LrSchedule::default();
        assert_eq!(lr_at(&s, 0, 0), 0.1);
        assert_eq!(lr_at(&s, 0, 49), 0.1);
        assert!((lr_at(&s, 0, 50) - 0.01).abs() < 1e-15);
        assert!((lr_at(&s, 0, 75) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn cyclic_schedule_is_a_triangle() {
        let s = LrSchedule::Cyclic {
            peak_lr: 0.2,
            total_steps: 100,
        };
        assert_eq!(lr_at(&s, 0, 0), 0.0);
        assert_eq!(lr_at(&s, 100, 0), 0.0);
        assert_eq!(lr_at(&s, 50, 0), 0.2);
        assert!((lr_at(&s, 25, 0) - 0.1).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|t| lr_at(&s, t, 0)).collect();
        assert!(lrs[..50].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[50..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut p = model();
        let before = p.clone();
        let grads: ParamGrads = p
            .layers()
            .iter()
            .map(|l| Layer {
                weight: l.weight.map(|_| 1.0),
                bias: l.bias.map(|_| -2.0),
            })
            .collect();
        sgd_step(&mut p, &grads, 0.5);
        assert_eq!(p.layers()[0].weight.data()[0], before.layers()[0].weight.data()[0] - 0.5);
        assert_eq!(p.layers()[1].bias.data()[0], before.layers()[1].bias.data()[0] + 1.0);
    }

    fn scalar_model(theta: f64) -> ModelParams {
        ModelParams::from_layers(vec![Layer {
            weight: Tensor::matrix(1, 1, vec![theta]).unwrap(),
            bias: Tensor::vector(vec![0.0]).unwrap(),
        }])
        .unwrap()
    }

    fn theta(p: &ModelParams) -> f64 {
        p.layers()[0].weight.data()[0]
    }

    #[test]
    fn sgd_on_scalar_quadratic() {
        // L = theta^2 / 2, so dL/dtheta = theta
        let grad = |t: f64| vec![Layer {
            weight: Tensor::matrix(1, 1, vec![t]).unwrap(),
            bias: Tensor::vector(vec![0.0]).unwrap(),
        }];
        let mut p = scalar_model(1.0);
        sgd_step(&mut p, &grad(1.0), 0.1);
        assert!((theta(&p) - 0.9).abs() < 1e-15);

        let mut p = scalar_model(0.7);
        sgd_step(&mut p, &grad(0.0), 0.1);
        assert_eq!(theta(&p), 0.7);

        for momentum in [0.0, 0.9] {
            let mut p = scalar_model(3.0);
            let mut opt = Sgd::new(momentum, 0.0);
            let mut last = f64::INFINITY;
            for _ in 0..100 {
                let t = theta(&p);
                let loss = 0.5 * t * t;
                if momentum == 0.0 {
                    assert!(loss < last);
                }
                last = loss;
                opt.step(&mut p, grad(t), 0.1);
            }
            assert!(theta(&p).abs() < 0.05, "{momentum}: {}", theta(&p));
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (tr, te) = blobs();
        let spec = TrainSpec {
            epochs: 0,
            ..small_spec(Strategy::AT)
        };
        let out = train(&spec, model(), &tr, &te).unwrap();
        assert_eq!(out.params, model());
        assert!(out.record.epochs.is_empty() && out.record.batches.is_empty());
    }

    #[test]
    fn natural_training_separates_blobs() {
        let data = synth_blobs(400, 0.2, 11).unwrap();
        let spec = TrainSpec {
            strategy: Strategy::Natural,
            beta: 0.0,
            epochs: 50,
            batch_size: 32,
            lr: LrSchedule::Constant { lr: 0.05 },
            attack: AttackSpec {
                epsilon: 0.0,
                ..AttackSpec::default()
            },
            ..TrainSpec::default()
        };
        let out = train(&spec, model(), &data, &data).unwrap();
        assert!(out.record.epochs.last().unwrap().nat_train_acc >= 0.99);
    }

    #[test]
    fn zero_momentum_equals_plain_sgd() {
        let (tr, _) = blobs();
        let (x, y) = tr.batch(&(0..16).collect::<Vec<_>>());
        let mut a = model();
        let mut b = model();
        let mut opt = Sgd::new(0.0, 0.0);
        for _ in 0..3 {
            let (_, ga) = outer_loss_grad(&a, &x, &y, &x, LossKind::CrossEntropy, 0.0).unwrap();
            opt.step(&mut a, ga, 0.1);
            let (_, gb) = outer_loss_grad(&b, &x, &y, &x, LossKind::CrossEntropy, 0.0).unwrap();
            sgd_step(&mut b, &gb, 0.1);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn validation_lists_every_problem() {
        let s = TrainSpec {
            beta: -1.0,
            batch_size: 0,
            weight_decay: -1.0,
            momentum: 1.5,
            attack: AttackSpec {
                epsilon: -0.1,
                ..AttackSpec::default()
            },
            ..TrainSpec::default()
        };
        assert_eq!(s.violations().len(), 5);
    }

    #[test]
    fn pass_counts_follow_cost_model() {
        let (tr, te) = blobs();
        for (s, steps, want) in [
            (Strategy::Natural, 0, 0),
            (Strategy::FastAT, 1, 1),
            (Strategy::FastTRADES, 1, 1),
            (Strategy::BackwardSmoothing, 1, 2),
            (Strategy::BackwardSmoothingPGD, 1, 2),
            (Strategy::AT, 3, 3),
        ] {
            let mut spec = small_spec(s);
            spec.epochs = 1;
            spec.attack.steps = steps;
            let out = train(&spec, model(), &tr, &te).unwrap();
            assert_eq!(spec.attack_passes_per_batch(), want);
            assert!(out.record.batches.iter().all(|b| b.attack_passes == want && b.update_passes == 1), "{s}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, te) = blobs();
        let spec = small_spec(Strategy::BackwardSmoothing);
        let a = train(&spec, model(), &tr, &te).unwrap();
        let b = train(&spec, model(), &tr, &te).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.record, b.record);
    }

    #[test]
    fn trades_with_zero_beta_matches_natural() {
        let (tr, te) = blobs();
        let nat = train(&small_spec(Strategy::Natural), model(), &tr, &te).unwrap();
        let trades = train(
            &TrainSpec {
                beta: 0.0,
                ..small_spec(Strategy::TRADES)
            },
            model(),
            &tr,
            &te,
        )
        .unwrap();
        assert_eq!(nat.params, trades.params);
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, te) = blobs();
        let spec = TrainSpec {
            lr: LrSchedule::Constant { lr: 1e300 },
            momentum: 0.0,
            ..small_spec(Strategy::Natural)
        };
        match train(&spec, model(), &tr, &te) {
            Err(Error::Diverged { report, epoch, .. }) => {
                assert!(epoch >= 1);
                assert!(report.params.layers().iter().all(|l| l.weight.all_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let (tr, _) = blobs();
        let (x, y) = tr.batch(&[0, 1, 2, 3]);
        let adv = x.map(|v| (v + 0.03).min(1.0));
        let p = model();
        for kind in [LossKind::CrossEntropy, LossKind::TradesKl] {
            let (_, g) = outer_loss_grad(&p, &x, &y, &adv, kind, 2.0).unwrap();
            let h = 1e-6;
            for (li, wi) in [(0usize, 0usize), (0, 7), (1, 3)] {
                let mut pp = p.clone();
                pp.layers_mut()[li].weight.data_mut()[wi] += h;
                let mut pm = p.clone();
                pm.layers_mut()[li].weight.data_mut()[wi] -= h;
                let lp = outer_loss_grad(&pp, &x, &y, &adv, kind, 2.0).unwrap().0;
                let lm = outer_loss_grad(&pm, &x, &y, &adv, kind, 2.0).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let a = g[li].weight.data()[wi];
                assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{kind:?} {li} {wi}: {a} vs {fd}");
            }
        }
    }
}
