//! Gradient-interference diagnostics.
//!
//! Quadratic task families make the one-step interference bound exact:
//! for R_i(x) = (x - c_i)^T A_i (x - c_i) / 2 with L >= lambda_max(A_i)
//! and a shared update x+ = x - eta * sum_j w_j g_j,
//!
//! ```text
//!   R_i(x+) <= R_i(x) - eta (w_i ||g_i||^2 + sum_{j!=i} w_j <g_i, g_j>)
//!            + (L eta^2 / 2) ||sum_j w_j g_j||^2
//! ```
//!
//! and the slack reduces to eta^2/2 (L ||v||^2 - v^T A_i v) >= 0, which
//! this module evaluates in f64 with no estimation error. The same
//! module hosts the cross-task gradient-cosine diagnostic for neural
//! toys and the scaffold-to-target transfer sweep.


use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domains::{Dataset, DomainSpec, Example, LabelHead};
use crate::model::{ModelConfig, ToyModel};
use crate::tensor::{svd_f64, Tensor};
use crate::train::{
    eval_loss, loss_square_avg_on_tape, sft_train, SftOptions, TrainError, TrainRow, TrainSet,
};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("curvature matrix {index} is not symmetric (max asymmetry {dev})")]
    NotSymmetric { index: usize, dev: f64 },
    #[error("weights must be nonnegative and sum to 1 (sum = {sum})")]
    BadWeights { sum: f64 },
    #[error("smoothness constant {l} below curvature spectral radius {lambda_max}")]
    SmoothnessTooSmall { l: f64, lambda_max: f64 },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One quadratic risk: R(x) = (x - center)^T A (x - center) / 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticTask {
    /// Symmetric PSD curvature, row-major dim x dim.
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticTask {
    pub fn risk(&self, x: &[f64]) -> f64 {
        let d = self.center.len();
        let mut acc = 0.0;
        for i in 0..d {
            let di = x[i] - self.center[i];
            for j in 0..d {
                acc += di * self.curvature[i * d + j] * (x[j] - self.center[j]);
            }
        }
        acc / 2.0
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let d = self.center.len();
        (0..d)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += self.curvature[i * d + j] * (x[j] - self.center[j]);
                }
                acc
            })
            .collect()
    }

    pub fn lambda_max(&self) -> f64 {
        let d = self.center.len();
        let (_, s, _) = svd_f64(&self.curvature, d, d).expect("symmetric eigensolve");
        s.first().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticTaskFamily {
    pub dim: usize,
    pub tasks: Vec<QuadraticTask>,
    /// Simplex weights, one per task.
    pub weights: Vec<f64>,
    /// Shared step size eta.
    pub step: f64,
    /// Smoothness constant; must dominate every task's spectral radius.
    pub smoothness: f64,
}

impl QuadraticTaskFamily {
    pub fn validate(&self) -> Result<(), LabError> {
        for (index, t) in self.tasks.iter().enumerate() {
            let d = self.dim;
            let mut dev = 0.0f64;
            for i in 0..d {
                for j in 0..d {
                    dev = dev.max((t.curvature[i * d + j] - t.curvature[j * d + i]).abs());
                }
            }
            if dev > 1e-8 {
                return Err(LabError::NotSymmetric { index, dev });
            }
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(LabError::BadWeights { sum });
        }
        let lambda_max = self
            .tasks
            .iter()
            .map(|t| t.lambda_max())
            .fold(0.0f64, f64::max);
        if self.smoothness < lambda_max * (1.0 - 1e-12) {
            return Err(LabError::SmoothnessTooSmall {
                l: self.smoothness,
                lambda_max,
            });
        }
        Ok(())
    }

    pub fn joint_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim];
        for (task, &w) in self.tasks.iter().zip(&self.weights) {
            for (slot, g) in acc.iter_mut().zip(task.grad(x)) {
                *slot += w * g;
            }
        }
        acc
    }
}

/// x+ = x - eta * sum_j w_j g_j(x).
pub fn one_step_joint_update(x: &[f64], family: &QuadraticTaskFamily) -> Vec<f64> {
    let joint = family.joint_gradient(x);
    x.iter()
        .zip(&joint)
        .map(|(xi, gi)| xi - family.step * gi)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskTerms {
    /// R_i(x+) - R_i(x), exact for quadratics.
    pub actual_delta: f64,
    /// w_i ||g_i||^2.
    pub self_term: f64,
    /// sum_{j != i} w_j <g_i, g_j>.
    pub cross_term: f64,
    /// (L eta^2 / 2) ||sum_j w_j g_j||^2.
    pub quadratic_term: f64,
    /// Bound RHS minus R_i(x+); the theorem says this is nonnegative.
    pub bound_slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub per_task: Vec<TaskTerms>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn interference_decomposition(
    x: &[f64],
    family: &QuadraticTaskFamily,
) -> InterferenceReport {
    let grads: Vec<Vec<f64>> = family.tasks.iter().map(|t| t.grad(x)).collect();
    let joint = family.joint_gradient(x);
    let x_next = one_step_joint_update(x, family);
    let quad = family.smoothness * family.step * family.step / 2.0 * dot(&joint, &joint);
    let per_task = family
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let self_term = family.weights[i] * dot(&grads[i], &grads[i]);
            let mut cross_term = 0.0;
            for (j, g) in grads.iter().enumerate() {
                if j != i {
                    cross_term += family.weights[j] * dot(&grads[i], g);
                }
            }
            let before = task.risk(x);
            let after = task.risk(&x_next);
            let rhs = before - family.step * (self_term + cross_term) + quad;
            TaskTerms {
                actual_delta: after - before,
                self_term,
                cross_term,
                quadratic_term: quad,
                bound_slack: rhs - after,
            }
        })
        .collect();
    InterferenceReport { per_task }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundSpec {
    pub max_dim: usize,
    pub max_tasks: usize,
    pub trials: usize,
    /// Multiplier on 1/L when drawing eta; 2.0 probes beyond the descent
    /// regime (the bound itself holds for any step size).
    pub eta_scale: f64,
}

impl Default for BoundSpec {
    fn default() -> Self {
        Self {
            max_dim: 32,
            max_tasks: 5,
            trials: 1000,
            eta_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    pub violations: usize,
    pub worst_slack: f64,
    pub elapsed_secs: f64,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub fn random_family(rng: &mut ChaCha8Rng, spec: &BoundSpec) -> QuadraticTaskFamily {
    let dim = rng.gen_range(2..=spec.max_dim);
    let k = rng.gen_range(1..=spec.max_tasks);
    let tasks: Vec<QuadraticTask> = (0..k)
        .map(|_| {
            let m: Vec<f64> = (0..dim * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut a = vec![0.0f64; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    let mut acc = 0.0;
                    for p in 0..dim {
                        acc += m[p * dim + i] * m[p * dim + j];
                    }
                    a[i * dim + j] = acc / dim as f64;
                }
            }
            let center: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            QuadraticTask {
                curvature: a,
                center,
            }
        })
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / sum).collect();
    let lambda_max = tasks.iter().map(|t| t.lambda_max()).fold(0.0f64, f64::max);
    let step = rng.gen_range(0.05..=1.0) * spec.eta_scale / lambda_max.max(1e-12);
    QuadraticTaskFamily {
        dim,
        tasks,
        weights,
        step,
        smoothness: lambda_max,
    }
}

/// Sample random families and check every task's slack against -1e-9.
pub fn verify_bound_quadratic(spec: &BoundSpec, seed: u64) -> BoundReport {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut worst = f64::INFINITY;
    for _ in 0..spec.trials {
        let family = random_family(&mut rng, spec);
        let x: Vec<f64> = (0..family.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let report = interference_decomposition(&x, &family);
        for terms in &report.per_task {
            worst = worst.min(terms.bound_slack);
            if terms.bound_slack < -1e-9 {
                violations += 1;
            }
        }
    }
    BoundReport {
        trials: spec.trials,
        violations,
        worst_slack: worst,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------
// Gradient-conflict diagnostics on toy models
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictMatrix {
    /// Cosine similarities, row-major K x K, unit diagonal.
    pub cosines: Vec<Vec<f64>>,
    /// Tasks whose gradient was identically zero (cosines reported as 0).
    pub zero_gradient: Vec<bool>,
}

/// Flattened gradient of one task's loss over all shared parameters.
fn task_gradient(model: &ToyModel, rows: &[&TrainRow]) -> Result<Vec<f64>, TrainError> {
    let tape = crate::autodiff::Tape::new();
    let handles = model.register(&tape);
    let loss = loss_square_avg_on_tape(model, &tape, &handles, rows)?;
    tape.backward(loss)?;
    let mut flat = Vec::new();
    for (_, handle) in &handles.handles {
        let g = tape.grad(*handle);
        flat.extend(g.data().iter().map(|&v| v as f64));
    }
    Ok(flat)
}

/// Pairwise cosine similarity of per-task gradients, evaluated at each
/// task's own model (pass the same model K times to probe one point).
pub fn gradient_conflict_matrix(
    models: &[&ToyModel],
    batches: &[&TrainSet],
) -> Result<ConflictMatrix, TrainError> {
    assert_eq!(models.len(), batches.len(), "one batch per model");
    let k = models.len();
    let mut grads = Vec::with_capacity(k);
    for (model, set) in models.iter().zip(batches) {
        let rows: Vec<&TrainRow> = set.rows.iter().collect();
        grads.push(task_gradient(model, &rows)?);
    }
    let norms: Vec<f64> = grads.iter().map(|g| dot(g, g).sqrt()).collect();
    let zero_gradient: Vec<bool> = norms.iter().map(|&n| n == 0.0).collect();
    let mut cosines = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in 0..k {
            if zero_gradient[i] || zero_gradient[j] {
                cosines[i][j] = 0.0;
            } else {
                let c = dot(&grads[i], &grads[j]) / (norms[i] * norms[j]);
                cosines[i][j] = c.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(ConflictMatrix {
        cosines,
        zero_gradient,
    })
}

/// Two datasets over one observation distribution whose labels are
/// bitwise opposites, routed through the same model head. Their
/// gradients anti-align (the conflict matrix reads cosine ~ -1), so a
/// shared parameter set cannot satisfy both: joint training on the
/// union is capped near chance while per-task experts are separable.
pub fn opposing_task_pair(seed: u64, count: usize, noise: f32) -> (Dataset, Dataset) {
    let cfg = crate::domains::SuiteConfig {
        train_count: count,
        eval_count: count,
        noises: [noise; 4],
        ..Default::default()
    };
    let suite = crate::domains::make_synthetic_domains(seed, &cfg);
    let forward = suite[&crate::domains::DomainId::Embodied].train.clone();
    let mut flipped = forward.clone();
    for ex in &mut flipped.examples {
        for t in &mut ex.target {
            *t = 1 - *t;
        }
    }
    (forward, flipped)
}

// ---------------------------------------------------------------------
// Scaffold-to-target transfer experiment
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferExperimentSpec {
    pub latent_dim: usize,
    pub noise: f32,
    pub train_count: usize,
    pub eval_count: usize,
    /// Channel rotation angles (radians) swept for the geometric shift.
    pub deltas: Vec<f64>,
    /// Latent corruption magnitudes swept for recoverability.
    pub eps_gs: Vec<f64>,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub batch_size: usize,
    /// Independent eval re-draws used to estimate evaluation noise.
    pub eval_repeats: usize,
    /// Samples and step size for the finite-difference Lipschitz probe.
    pub lipschitz_probes: usize,
    pub lipschitz_h: f64,
}

impl Default for TransferExperimentSpec {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            noise: 0.05,
            train_count: 512,
            eval_count: 2048,
            deltas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            eps_gs: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            probe_steps: 240,
            probe_lr: 5e-3,
            batch_size: 32,
            eval_repeats: 5,
            lipschitz_probes: 64,
            lipschitz_h: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub scaffold_risk: f64,
    pub eval_noise: f64,
    /// Risk at (delta = 0, eps_g = 0) minus the scaffold risk.
    pub origin_gap: f64,
    pub delta_curve: Vec<(f64, f64)>,
    pub eps_curve: Vec<(f64, f64)>,
    pub spearman_delta: f64,
    pub spearman_eps: f64,
    /// Finite-difference estimate of the loss's sensitivity to g.
    pub lipschitz_estimate: f64,
    /// Nonnegative least-squares fit of risk - R_sp - 2 L eps over the
    /// sweep to C * delta + eps_m.
    pub fitted_cm: f64,
    pub fitted_eps_m: f64,
    pub fit_residual: f64,
    /// RHS - LHS of the transfer bound at the origin (>= 0 by fit).
    pub rhs_minus_lhs_origin: f64,
}

/// Average ranks (ties averaged), then Pearson on the ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &slot in &idx[i..=j] {
                out[slot] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt()).max(1e-30)
}

struct TransferWorld {
    spec: DomainSpec,
    dirs: Vec<Vec<f32>>,
}

impl TransferWorld {
    /// Dataset from channel rotated by `delta`, latents corrupted by
    /// `eps_g` before observation (labels always from the true latent).
    fn dataset(&self, delta: f64, eps_g: f64, count: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.spec.latent_dim;
        let channel = crate::domains::rotate_channel(&self.spec.channel, delta as f32);
        let examples = (0..count)
            .map(|_| {
                let g: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let mut g_seen = g.clone();
                if eps_g > 0.0 {
                    let mut u: Vec<f32> =
                        (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                    let norm: f32 = u.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
                    for (slot, v) in g_seen.iter_mut().zip(&u) {
                        *slot += (eps_g as f32) * v / norm;
                    }
                    u.clear();
                }
                let mut obs = vec![0.0f32; d];
                for i in 0..d {
                    let mut acc = self.spec.offset[i] as f64;
                    for j in 0..d {
                        acc += channel.at2(i, j) as f64 * g_seen[j] as f64;
                    }
                    acc += (self.spec.noise * rng.sample::<f32, _>(StandardNormal)) as f64;
                    obs[i] = acc as f32;
                }
                let target = self.spec.label_head.label(&g);
                Example {
                    observation: obs,
                    cond: vec![0],
                    target,
                    latent: g,
                }
            })
            .collect();
        Dataset {
            domain: crate::domains::DomainId::Spatial,
            examples,
        }
    }
}

pub fn scaffold_transfer_experiment(
    spec: &TransferExperimentSpec,
    seed: u64,
) -> Result<TransferReport, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.latent_dim;
    let gauss: Vec<f32> = (0..d * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let (channel, _, _) = Tensor::new(vec![d, d], gauss)
        .expect("finite")
        .svd()
        .expect("orthogonalize");
    let dirs: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let offset: Vec<f32> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let world = TransferWorld {
        spec: DomainSpec {
            id: crate::domains::DomainId::Spatial,
            latent_dim: d,
            channel,
            offset,
            noise: spec.noise,
            label_head: LabelHead::Quantile {
                dirs: dirs.clone(),
                edges: crate::domains::QUARTILE_EDGES.to_vec(),
            },
        },
        dirs,
    };

    // Train the probe on the scaffold distribution.
    let train = world.dataset(0.0, 0.0, spec.train_count, seed.wrapping_add(1));
    let model = ToyModel::init(ModelConfig {
        obs_dim: d,
        heads: vec!["spatial".into()],
        seed,
        ..ModelConfig::default()
    });
    let opts = SftOptions {
        steps: spec.probe_steps,
        lr: spec.probe_lr,
        batch_size: spec.batch_size,
        weight_decay: 0.0,
        seed,
    };
    let (probe, _) = sft_train(&model, &TrainSet::from_dataset(&train), &opts)?;

    // Scaffold risk and its evaluation-noise band.
    let repeats: Vec<f64> = (0..spec.eval_repeats)
        .map(|r| {
            let ds = world.dataset(0.0, 0.0, spec.eval_count, seed.wrapping_add(100 + r as u64));
            eval_loss(&probe, &ds)
        })
        .collect();
    let scaffold_risk = repeats.iter().sum::<f64>() / repeats.len() as f64;
    let eval_noise = {
        let var = repeats
            .iter()
            .map(|r| (r - scaffold_risk) * (r - scaffold_risk))
            .sum::<f64>()
            / repeats.len() as f64;
        var.sqrt()
    };

    let risk_at = |delta: f64, eps: f64, tag: u64| {
        let ds = world.dataset(delta, eps, spec.eval_count, seed.wrapping_add(500 + tag));
        eval_loss(&probe, &ds)
    };
    let delta_curve: Vec<(f64, f64)> = spec
        .deltas
        .iter()
        .enumerate()
        .map(|(i, &dl)| (dl, risk_at(dl, 0.0, i as u64)))
        .collect();
    let eps_curve: Vec<(f64, f64)> = spec
        .eps_gs
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, risk_at(0.0, e, 1000 + i as u64)))
        .collect();
    let origin_gap = delta_curve[0].1 - scaffold_risk;

    let spearman_delta = spearman(
        &delta_curve.iter().map(|p| p.0).collect::<Vec<_>>(),
        &delta_curve.iter().map(|p| p.1).collect::<Vec<_>>(),
    );
    let spearman_eps = spearman(
        &eps_curve.iter().map(|p| p.0).collect::<Vec<_>>(),
        &eps_curve.iter().map(|p| p.1).collect::<Vec<_>>(),
    );

    // Finite-difference Lipschitz probe of loss vs g at fixed labels.
    let probe_ds = world.dataset(0.0, 0.0, spec.lipschitz_probes, seed.wrapping_add(9000));
    let h = spec.lipschitz_h;
    let mut lipschitz_estimate = 0.0f64;
    for ex in &probe_ds.examples {
        for axis in 0..d {
            let mut losses = [0.0f64; 2];
            for (slot, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let mut g = ex.latent.clone();
                g[axis] += (sign * h) as f32;
                let mut obs = vec![0.0f32; d];
                for i in 0..d {
                    let mut acc = world.spec.offset[i] as f64;
                    for j in 0..d {
                        acc += world.spec.channel.at2(i, j) as f64 * g[j] as f64;
                    }
                    obs[i] = acc as f32;
                }
                let mut loss = 0.0f64;
                let t = ex.target.len() as f64;
                for pos in 0..ex.target.len() {
                    let logits = probe.logits(&obs, &ex.cond, &ex.target, pos, "spatial");
                    let logp = crate::model::log_softmax(&logits);
                    loss -= logp[ex.target[pos]] as f64;
                }
                losses[slot] = loss / t.sqrt() / t.sqrt().max(1.0);
                // normalized like a single-sample square-average
                losses[slot] = loss / t;
            }
            let slope = (losses[0] - losses[1]).abs() / (2.0 * h);
            lipschitz_estimate = lipschitz_estimate.max(slope);
        }
    }

    // Fit risk - R_sp - 2 L eps ~= C * delta + eps_m with C, eps_m >= 0.
    let mut pts: Vec<(f64, f64, f64)> = Vec::new(); // (delta, eps, excess)
    for &(dl, r) in &delta_curve {
        pts.push((dl, 0.0, r - scaffold_risk));
    }
    for &(e, r) in &eps_curve {
        pts.push((0.0, e, r - scaffold_risk));
    }
    let (fitted_cm, fitted_eps_m, fit_residual) =
        fit_nonnegative(&pts, 2.0 * lipschitz_estimate);
    let fitted_eps_m = fitted_eps_m.max(origin_gap).max(0.0);
    let rhs_minus_lhs_origin = scaffold_risk + fitted_eps_m - delta_curve[0].1;

    let _ = &world.dirs;
    Ok(TransferReport {
        scaffold_risk,
        eval_noise,
        origin_gap,
        delta_curve,
        eps_curve,
        spearman_delta,
        spearman_eps,
        lipschitz_estimate,
        fitted_cm,
        fitted_eps_m,
        fit_residual,
        rhs_minus_lhs_origin,
    })
}

/// Least squares of excess - 2L*eps against C*delta + eps_m, with both
/// coefficients clamped nonnegative (refit after clamping). Returns
/// (C, eps_m, rms residual).
fn fit_nonnegative(pts: &[(f64, f64, f64)], two_l: f64) -> (f64, f64, f64) {
    let ys: Vec<f64> = pts.iter().map(|&(_, e, x)| x - two_l * e).collect();
    let xs: Vec<f64> = pts.iter().map(|&(dl, _, _)| dl).collect();
    let n = pts.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let (mut c, mut b) = if det.abs() < 1e-30 {
        (0.0, sy / n)
    } else {
        ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
    };
    if c < 0.0 {
        c = 0.0;
        b = sy / n;
    }
    if b < 0.0 {
        b = 0.0;
        c = if sxx > 1e-30 { (sxy / sxx).max(0.0) } else { 0.0 };
    }
    let mut rss = 0.0;
    for ((x, y), _) in xs.iter().zip(&ys).zip(pts) {
        let r = y - (c * x + b);
        rss += r * r;
    }
    (c, b, (rss / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{make_synthetic_domains, DomainId, SuiteConfig};

    fn identity_family(dim: usize, k: usize, l: f64, eta: f64) -> QuadraticTaskFamily {
        let mut a = vec![0.0f64; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = l;
        }
        QuadraticTaskFamily {
            dim,
            tasks: (0..k)
                .map(|i| QuadraticTask {
                    curvature: a.clone(),
                    center: (0..dim).map(|j| (i + j) as f64).collect(),
                })
                .collect(),
            weights: vec![1.0 / k as f64; k],
            step: eta,
            smoothness: l,
        }
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let family = identity_family(3, 1, 1.0, 0.7);
        let x = family.tasks[0].center.clone();
        let next = one_step_joint_update(&x, &family);
        assert_eq!(next, x);
    }

    #[test]
    fn single_task_is_plain_gradient_step() {
        let family = identity_family(2, 1, 2.0, 0.3);
        let x = vec![5.0, -1.0];
        let next = one_step_joint_update(&x, &family);
        let g = family.tasks[0].grad(&x);
        for i in 0..2 {
            assert!((next[i] - (x[i] - 0.3 * g[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn update_matches_hand_assembled_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BoundSpec {
            max_dim: 6,
            max_tasks: 3,
            trials: 1,
            eta_scale: 1.0,
        };
        let family = random_family(&mut rng, &spec);
        family.validate().unwrap();
        let x: Vec<f64> = (0..family.dim).map(|i| i as f64 * 0.1 - 0.2).collect();
        let next = one_step_joint_update(&x, &family);
        // Hand-assembled: sum_j w_j A_j (x - c_j)
        let d = family.dim;
        let mut joint = vec![0.0f64; d];
        for (t, &w) in family.tasks.iter().zip(&family.weights) {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += t.curvature[i * d + j] * (x[j] - t.center[j]);
                }
                joint[i] += w * acc;
            }
        }
        for i in 0..d {
            assert!((next[i] - (x[i] - family.step * joint[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_gradients_zero_cross_term() {
        // Two 2-d tasks whose gradients at x are e1 and e2.
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let family = QuadraticTaskFamily {
            dim: 2,
            tasks: vec![
                QuadraticTask {
                    curvature: a.clone(),
                    center: vec![-1.0, 0.0],
                },
                QuadraticTask {
                    curvature: a,
                    center: vec![0.0, -1.0],
                },
            ],
            weights: vec![0.5, 0.5],
            step: 0.1,
            smoothness: 1.0,
        };
        let report = interference_decomposition(&[0.0, 0.0], &family);
        for t in &report.per_task {
            assert!(t.cross_term.abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_conflict_cancels_first_order_progress() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let family = QuadraticTaskFamily {
            dim: 2,
            tasks: vec![
                QuadraticTask {
                    curvature: a.clone(),
                    center: vec![-1.0, 0.0],
                },
                QuadraticTask {
                    curvature: a,
                    center: vec![1.0, 0.0],
                },
            ],
            weights: vec![0.5, 0.5],
            step: 0.1,
            smoothness: 1.0,
        };
        let report = interference_decomposition(&[0.0, 0.0], &family);
        for t in &report.per_task {
            assert!((t.self_term + t.cross_term).abs() < 1e-12);
            // Gradients cancel, so the update is a no-op.
            assert!(t.actual_delta.abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_curvature_slack_is_exactly_zero() {
        let family = identity_family(4, 3, 2.5, 0.13);
        let x = vec![0.3, -0.9, 2.0, 0.0];
        let report = interference_decomposition(&x, &family);
        for t in &report.per_task {
            assert!(t.bound_slack.abs() < 1e-9, "slack {}", t.bound_slack);
        }
    }

    #[test]
    fn decomposition_self_plus_cross_matches_joint_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let spec = BoundSpec {
                max_dim: 8,
                max_tasks: 4,
                trials: 1,
                eta_scale: 1.0,
            };
            let family = random_family(&mut rng, &spec);
            let x: Vec<f64> = (0..family.dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let report = interference_decomposition(&x, &family);
            let joint = family.joint_gradient(&x);
            for (i, t) in report.per_task.iter().enumerate() {
                let g = family.tasks[i].grad(&x);
                let expected = dot(&g, &joint);
                assert!(
                    (t.self_term + t.cross_term - expected).abs() < 1e-10,
                    "task {i}"
                );
            }
        }
    }

    #[test]
    fn single_trial_identity_eta_one() {
        let family = identity_family(2, 1, 1.0, 1.0);
        let report = interference_decomposition(&[3.0, 4.0], &family);
        assert!(report.per_task[0].bound_slack >= 0.0);
    }

    #[test]
    fn bound_holds_on_small_random_batch() {
        let spec = BoundSpec {
            trials: 50,
            ..BoundSpec::default()
        };
        let report = verify_bound_quadratic(&spec, 0);
        assert!(report.passed(), "worst slack {}", report.worst_slack);
    }

    #[test]
    fn bound_holds_beyond_descent_step_sizes() {
        let spec = BoundSpec {
            trials: 50,
            eta_scale: 2.0,
            ..BoundSpec::default()
        };
        let report = verify_bound_quadratic(&spec, 1);
        assert!(report.passed(), "worst slack {}", report.worst_slack);
    }

    #[test]
    fn conflict_matrix_same_task_twice() {
        let cfg = SuiteConfig {
            train_count: 16,
            eval_count: 8,
            general_counts: [4, 4, 4, 4],
            ..SuiteConfig::default()
        };
        let suite = make_synthetic_domains(0, &cfg);
        let model = ToyModel::init(ModelConfig::default());
        let set = TrainSet::from_dataset(&suite[&DomainId::Ad].train);
        let report = gradient_conflict_matrix(&[&model, &model], &[&set, &set]).unwrap();
        assert!((report.cosines[0][1] - 1.0).abs() < 1e-9);
        assert!((report.cosines[0][0] - 1.0).abs() < 1e-9);
        assert!((report.cosines[1][1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conflict_matrix_opposing_labels_near_minus_one() {
        // Two-token support head makes flipped sign labels produce
        // exactly opposite logit gradients.
        let cfg = SuiteConfig {
            train_count: 16,
            eval_count: 8,
            general_counts: [4, 4, 4, 4],
            ..SuiteConfig::default()
        };
        let suite = make_synthetic_domains(0, &cfg);
        let mut model = ToyModel::init(ModelConfig::default());
        let vocab = model.cfg.vocab;
        let mut bias = vec![-30.0f32; vocab];
        bias[0] = 0.0;
        bias[1] = 0.0;
        let mut params = model.params.clone();
        params.insert("head.embodied.b", Tensor::new(vec![vocab], bias).unwrap());
        params.insert(
            "head.embodied.w",
            Tensor::zeros(vec![model.cfg.hidden, vocab]),
        );
        model = model.with_params(params);

        let set = TrainSet::from_dataset(&suite[&DomainId::Embodied].train);
        let mut flipped = set.clone();
        for row in &mut flipped.rows {
            for t in &mut row.example.target {
                *t = 1 - *t;
            }
        }
        let report = gradient_conflict_matrix(&[&model, &model], &[&set, &flipped]).unwrap();
        assert!(
            report.cosines[0][1] < -0.99,
            "cosine {}",
            report.cosines[0][1]
        );
    }

    #[test]
    fn spearman_handles_monotone_and_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[5.0, 5.0, 7.0, 8.0]);
        assert!(s > 0.9);
    }
}
