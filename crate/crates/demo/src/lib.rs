//! Browser demo on the 2-D toy problem.
//!
//! [`ToyLab`] trains a small MLP on two blobs in the unit square and
//! exposes the pieces the page draws: the decision surface, the loss over
//! the ε-ball around a clicked point with the zero-init and random-init
//! single-step attack paths, and the backward-smoothing step.
//! All buffers are flat `f64` arrays (a `Float64Array` in JS).

use robustlab::attacks::{backward_smoothing_init, objective_values, pgd_attack, AttackSpec, InitKind, Objective};
use robustlab::data::{synth_blobs, Dataset};
use robustlab::diagnostics::{natural_accuracy, robust_accuracy};
use robustlab::trainers::{train, LrSchedule, TrainSpec};
use robustlab::{init_model, ModelParams, ModelSpec, Strategy, Tensor};
use wasm_bindgen::prelude::*;

const LAYERS: [usize; 4] = [2, 32, 32, 2];

#[wasm_bindgen]
pub struct ToyLab {
    params: ModelParams,
    train_set: Dataset,
    test_set: Dataset,
    seed: u64,
    epochs_done: usize,
}

#[wasm_bindgen]
impl ToyLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, margin: f64) -> Result<ToyLab, String> {
        let seed = seed as u64;
        let err = |e: robustlab::Error| e.to_string();
        let all = synth_blobs(600, margin, seed).map_err(err)?;
        let (train_set, test_set) = all.split(400, 200, seed).map_err(err)?;
        let params = init_model(&ModelSpec::new(LAYERS.to_vec(), seed).map_err(err)?).map_err(err)?;
        Ok(ToyLab {
            params,
            train_set,
            test_set,
            seed,
            epochs_done: 0,
        })
    }

    /// Trains `epochs` more epochs with `strategy` (any name the CLI accepts).
    /// Returns `[natural accuracy, PGD-20 robust accuracy]` on the test split.
    pub fn train(&mut self, strategy: &str, epochs: u32, epsilon: f64) -> Result<Vec<f64>, String> {
        let strategy: Strategy = strategy.parse().map_err(|e: robustlab::Error| e.to_string())?;
        let spec = TrainSpec {
            strategy,
            epochs: epochs as usize,
            batch_size: 32,
            lr: LrSchedule::Constant { lr: 0.05 },
            attack: AttackSpec {
                epsilon,
                alpha: 1.25 * epsilon,
                steps: 1,
                ..AttackSpec::default()
            },
            seed: self.seed.wrapping_add(self.epochs_done as u64),
            ..TrainSpec::default()
        };
        let out = train(&spec, self.params.clone(), &self.train_set, &self.test_set).map_err(|e| e.to_string())?;
        self.params = out.params;
        self.epochs_done += epochs as usize;
        self.accuracy(epsilon)
    }

    pub fn accuracy(&self, epsilon: f64) -> Result<Vec<f64>, String> {
        let nat = natural_accuracy(&self.params, &self.test_set).map_err(|e| e.to_string())?;
        let rob = robust_accuracy(&self.params, &self.test_set, &AttackSpec::pgd(epsilon, epsilon / 4.0, 20))
            .map_err(|e| e.to_string())?;
        Ok(vec![nat, rob])
    }

    #[wasm_bindgen(getter)]
    pub fn epochs(&self) -> u32 {
        self.epochs_done as u32
    }

    /// Training points as `[x, y, label]` triples.
    pub fn points(&self) -> Vec<f64> {
        let x = self.train_set.inputs();
        self.train_set
            .labels()
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| [x.row(i)[0], x.row(i)[1], l as f64])
            .collect()
    }

    /// `P(class 1)` on an `n x n` grid over the unit square, row-major with
    /// `y` growing downwards.
    pub fn decision_grid(&self, n: u32) -> Vec<f64> {
        let pts = grid_over(0.5, 0.5, 0.5, n as usize, false);
        let z = self.params.logits(&pts).expect("2-D grid");
        (0..z.rows()).map(|i| sigmoid(z.row(i)[1] - z.row(i)[0])).collect()
    }

    /// Cross-entropy of the predicted class over an `n x n` grid of `B_eps(px, py)`.
    pub fn loss_surface(&self, px: f64, py: f64, epsilon: f64, n: u32) -> Vec<f64> {
        let pts = grid_over(px, py, epsilon, n as usize, true);
        let y = vec![self.label_at(px, py); pts.rows()];
        objective_values(&self.params, &pts, Objective::CrossEntropy(&y)).expect("2-D grid")
    }

    /// Single-step attack of size `alpha` from a zero and from a random start.
    ///
    /// Returns `[z0x, z0y, z1x, z1y, dl_zero, r0x, r0y, r1x, r1y, dl_random]`:
    /// start and end of each path plus the loss increment it achieved.
    pub fn attack_paths(&self, px: f64, py: f64, epsilon: f64, alpha: f64, seed: u32) -> Vec<f64> {
        let x = point(px, py);
        let y = [self.label_at(px, py)];
        let mut out = Vec::with_capacity(10);
        for init in [InitKind::Zero, InitKind::Random] {
            let spec = AttackSpec {
                epsilon,
                alpha,
                steps: 0,
                init,
                rng_seed: seed as u64,
                ..AttackSpec::default()
            };
            let start = pgd_attack(&self.params, &x, &y, &spec).expect("valid attack").adv;
            let end = pgd_attack(&self.params, &x, &y, &AttackSpec { steps: 1, ..spec }).expect("valid attack").adv;
            let loss = |z: &Tensor| objective_values(&self.params, z, Objective::CrossEntropy(&y)).expect("one row")[0];
            out.extend_from_slice(start.data());
            out.extend_from_slice(end.data());
            out.push(loss(&end) - loss(&x));
        }
        out
    }

    /// Backward-smoothing step `xi*` at a point: `[x + xi*_x, y + xi*_y]`.
    pub fn smoothing_step(&self, px: f64, py: f64, epsilon: f64, gamma: f64, seed: u32) -> Vec<f64> {
        let spec = AttackSpec {
            epsilon,
            alpha: epsilon,
            steps: 1,
            gamma,
            rng_seed: seed as u64,
            ..AttackSpec::default()
        };
        backward_smoothing_init(&self.params, &point(px, py), &spec)
            .expect("valid smoothing step")
            .adv
            .into_data()
    }
}

impl ToyLab {
    fn label_at(&self, px: f64, py: f64) -> usize {
        self.params.predict(&point(px, py)).expect("2-D point")[0]
    }
}

fn point(px: f64, py: f64) -> Tensor {
    Tensor::matrix(1, 2, vec![px, py]).expect("1 x 2")
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `n x n` grid over the square of half-width `r` around `(cx, cy)`.
fn grid_over(cx: f64, cy: f64, r: f64, n: usize, clamp: bool) -> Tensor {
    let n = n.max(2);
    let at = |i: usize, c: f64| {
        let v = c - r + 2.0 * r * i as f64 / (n - 1) as f64;
        if clamp {
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    };
    let data = (0..n * n).flat_map(|k| [at(k % n, cx), at(k / n, cy)]).collect();
    Tensor::matrix(n * n, 2, data).expect("grid shape")
}
