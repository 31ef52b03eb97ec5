//! Task vectors and data-free merging: vanilla averaging, TSVM, and the
//! optimization-based WUDI merge, plus a closed-form stationary-point
//! oracle for the WUDI objective.
//!
//! WUDI minimizes, per matrix-shaped layer,
//!
//! ```text
//!   f(tau) = sum_i (1 / ||tau_i||_F^2) * ||(tau - tau_i) tau_i^T||_F^2
//! ```
//!
//! whose gradient is `sum_i (2 / ||tau_i||_F^2) (tau - tau_i) tau_i^T tau_i`
//! and whose stationary point solves `tau* (sum_i w_i G_i) = sum_i w_i tau_i G_i`
//! with `G_i = tau_i^T tau_i`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{validate_compatibility, CompatReport};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::params::ParameterMap;
use crate::tensor::{lstsq_f64, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("incompatible parameter maps: {0:?}")]
    Incompatible(Box<CompatReport>),
    #[error("no models given")]
    NoModels,
    #[error("task vector list is empty")]
    NoExperts,
    #[error("zero-norm task vector passed to the WUDI objective")]
    ZeroNormTau,
    #[error("non-finite gradient for {name} at iteration {iter}")]
    NonFiniteGradient { name: String, iter: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Avg,
    Tsvm,
    Wudi,
}

impl std::str::FromStr for MergeMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(Self::Avg),
            "tsvm" => Ok(Self::Tsvm),
            "wudi" => Ok(Self::Wudi),
            other => Err(format!("unknown merge method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub zero_tau_threshold: f64,
    /// None picks 1/K, K = number of experts stacked for the layer.
    pub tsvm_rank_fraction: Option<f64>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::Wudi,
            iterations: 1000,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            zero_tau_threshold: 1e-12,
            tsvm_rank_fraction: None,
        }
    }
}

impl MergeConfig {
    /// Effective Frobenius-norm floor below which a layer's task vector
    /// counts as zero and is dropped from WUDI / TSVM.
    pub fn norm_floor(&self, numel: usize) -> f64 {
        self.zero_tau_threshold * numel as f64
    }
}

/// Per-layer difference between an expert and the base model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskVector {
    pub expert_id: String,
    pub tensors: ParameterMap,
    pub norms: BTreeMap<String, f64>,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LayerReport {
    /// Objective after each iteration; entry 0 is the value at init.
    pub trace: Vec<f64>,
    pub final_objective: f64,
    /// Relative Frobenius deviation from the closed-form stationary point;
    /// absent for layers that fell back to averaging.
    pub oracle_deviation: Option<f64>,
    /// True when the layer bypassed optimization (rank < 2 or all-zero).
    pub averaged: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub per_layer: BTreeMap<String, LayerReport>,
    pub final_objective: f64,
    pub wall_time_secs: f64,
}

fn check_compatible(maps: &[&ParameterMap]) -> Result<(), MergeError> {
    if maps.len() >= 2 {
        let report = validate_compatibility(maps);
        if !report.compatible {
            return Err(MergeError::Incompatible(Box::new(report)));
        }
    }
    Ok(())
}

/// tau = expert - base, layer-indexed, with per-layer Frobenius norms.
pub fn compute_task_vector(
    expert: &ParameterMap,
    base: &ParameterMap,
    expert_id: impl Into<String>,
) -> Result<TaskVector, MergeError> {
    check_compatible(&[expert, base])?;
    let mut tensors = ParameterMap::new();
    let mut norms = BTreeMap::new();
    for (name, e) in expert.iter() {
        let b = base.get(name).expect("compatibility checked");
        let tau = e.sub(b)?;
        norms.insert(name.to_string(), tau.frob_norm());
        tensors.insert(name, tau);
    }
    Ok(TaskVector {
        expert_id: expert_id.into(),
        tensors,
        norms,
    })
}

/// Entry-wise arithmetic mean of >= 1 compatible maps (f64 accumulation).
pub fn merge_average(models: &[&ParameterMap]) -> Result<ParameterMap, MergeError> {
    if models.is_empty() {
        return Err(MergeError::NoModels);
    }
    check_compatible(models)?;
    let k = models.len() as f64;
    let mut out = ParameterMap::new();
    for (name, first) in models[0].iter() {
        let numel = first.numel();
        let mut acc = vec![0.0f64; numel];
        for m in models {
            let t = m.get(name).expect("compatibility checked");
            for (slot, &v) in acc.iter_mut().zip(t.data()) {
                *slot += v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| (v / k) as f32).collect();
        out.insert(name, Tensor::new(first.shape().to_vec(), data)?);
    }
    Ok(out)
}

fn tau_mean(taus: &[&Tensor]) -> Tensor {
    let k = taus.len() as f64;
    let shape = taus[0].shape().to_vec();
    let mut acc = vec![0.0f64; taus[0].numel()];
    for t in taus {
        for (slot, &v) in acc.iter_mut().zip(t.data()) {
            *slot += v as f64;
        }
    }
    let data: Vec<f32> = acc.iter().map(|&v| (v / k) as f32).collect();
    Tensor::new(shape, data).expect("mean of finite tensors is finite")
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Gram matrix tau^T tau in f64 (n x n for an m x n tau).
fn gram_f64(tau: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..m {
                acc += tau[p * n + i] * tau[p * n + j];
            }
            g[i * n + j] = acc;
        }
    }
    g
}

fn frob2_f64(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// sum_i (1 / ||tau_i||_F^2) * ||(tau_merge - tau_i) tau_i^T||_F^2.
///
/// Errors on a zero-norm tau: the 1/||tau||^2 weight diverges, so callers
/// must filter degenerate vectors first.
pub fn wudi_objective(tau_merge: &Tensor, taus: &[&Tensor]) -> Result<f64, MergeError> {
    let (m, n) = tau_merge.matrix_dims("wudi_objective")?;
    let tm = to_f64(tau_merge);
    let mut total = 0.0f64;
    for tau in taus {
        if tau.shape() != tau_merge.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "wudi_objective",
                left: tau_merge.shape().to_vec(),
                right: tau.shape().to_vec(),
            }
            .into());
        }
        let ti = to_f64(tau);
        let norm2 = frob2_f64(&ti);
        if norm2 <= 0.0 {
            return Err(MergeError::ZeroNormTau);
        }
        // (tau_merge - tau_i) tau_i^T is m x m.
        let mut acc = 0.0f64;
        for r in 0..m {
            for c in 0..m {
                let mut dot = 0.0f64;
                for p in 0..n {
                    dot += (tm[r * n + p] - ti[r * n + p]) * ti[c * n + p];
                }
                acc += dot * dot;
            }
        }
        total += acc / norm2;
    }
    Ok(total)
}

/// Stationary point of the WUDI objective:
/// tau* = (sum_i w_i tau_i G_i) pinv(sum_i w_i G_i), w_i = 1/||tau_i||_F^2.
pub fn wudi_closed_form(taus: &[&Tensor]) -> Result<Tensor, MergeError> {
    if taus.is_empty() {
        return Err(MergeError::NoExperts);
    }
    let (m, n) = taus[0].matrix_dims("wudi_closed_form")?;
    let mut a = vec![0.0f64; n * n]; // sum w_i G_i
    let mut b = vec![0.0f64; m * n]; // sum w_i tau_i G_i
    for tau in taus {
        let ti = to_f64(tau);
        let norm2 = frob2_f64(&ti);
        if norm2 <= 0.0 {
            return Err(MergeError::ZeroNormTau);
        }
        let w = 1.0 / norm2;
        let g = gram_f64(&ti, m, n);
        for (slot, &v) in a.iter_mut().zip(&g) {
            *slot += w * v;
        }
        for r in 0..m {
            for c in 0..n {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += ti[r * n + p] * g[p * n + c];
                }
                b[r * n + c] += w * acc;
            }
        }
    }
    let x = lstsq_f64(&a, n, &b, m)?;
    let data: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    Ok(Tensor::new(vec![m, n], data)?)
}

/// True when WUDI / TSVM treat this parameter as a mergeable matrix.
/// Vectors, scalars, and degenerate 1 x n / m x 1 matrices fall back to
/// plain averaging: the Gram-based objective degenerates off matrices.
fn matrix_eligible(t: &Tensor) -> bool {
    t.rank() == 2 && t.shape()[0] >= 2 && t.shape()[1] >= 2
}

struct LayerTaus<'a> {
    all: Vec<&'a Tensor>,
    /// Indices into `all` with norm above the zero floor.
    kept: Vec<usize>,
}

impl<'a> LayerTaus<'a> {
    /// Averaging fallback for non-matrix layers: like the WUDI and TSVM
    /// sums, zero task vectors carry no constraint and are excluded, so
    /// merging with and without a zero-tau expert stays identical here
    /// too. All-zero layers merge to a zero delta.
    fn fallback_mean(&self, base_t: &Tensor) -> Tensor {
        if self.kept.is_empty() {
            return Tensor::zeros(base_t.shape().to_vec());
        }
        let kept: Vec<&Tensor> = self.kept.iter().map(|&i| self.all[i]).collect();
        tau_mean(&kept)
    }
}

fn collect_layer<'a>(
    name: &str,
    taus: &'a [TaskVector],
    cfg: &MergeConfig,
    numel: usize,
) -> LayerTaus<'a> {
    let all: Vec<&Tensor> = taus
        .iter()
        .map(|tv| tv.get(name).expect("compatibility checked"))
        .collect();
    let floor = cfg.norm_floor(numel);
    let kept = all
        .iter()
        .enumerate()
        .filter(|(_, t)| t.frob_norm() > floor)
        .map(|(i, _)| i)
        .collect();
    LayerTaus { all, kept }
}

/// WUDI gradient in f64: sum_i 2 w_i (tau - tau_i) G_i.
fn wudi_grad_f64(
    tau: &[f64],
    m: usize,
    n: usize,
    taus: &[Vec<f64>],
    grams: &[Vec<f64>],
    weights: &[f64],
) -> Vec<f64> {
    let mut grad = vec![0.0f64; m * n];
    for ((ti, g), &w) in taus.iter().zip(grams).zip(weights) {
        for r in 0..m {
            for c in 0..n {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += (tau[r * n + p] - ti[r * n + p]) * g[p * n + c];
                }
                grad[r * n + c] += 2.0 * w * acc;
            }
        }
    }
    grad
}

fn wudi_obj_f64(tau: &[f64], m: usize, n: usize, taus: &[Vec<f64>], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (ti, &w) in taus.iter().zip(weights) {
        let mut acc = 0.0;
        for r in 0..m {
            for c in 0..m {
                let mut dot = 0.0;
                for p in 0..n {
                    dot += (tau[r * n + p] - ti[r * n + p]) * ti[c * n + p];
                }
                acc += dot * dot;
            }
        }
        total += w * acc;
    }
    total
}

/// Optimization-based merge. Matrix layers run Adam on the WUDI objective
/// from the average of the (non-zero) expert task vectors; other layers
/// average plainly. Output is base + tau_merge.
pub fn merge_wudi(
    base: &ParameterMap,
    taus: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<(ParameterMap, MergeReport), MergeError> {
    merge_wudi_with_schedule(base, taus, cfg, LrSchedule::Constant)
}

/// [`merge_wudi`] with an explicit learning-rate schedule. The decay-tail
/// schedule is what the oracle-comparison tests use: a fixed-rate Adam
/// limit-cycles around the stationary point instead of settling onto it.
pub fn merge_wudi_with_schedule(
    base: &ParameterMap,
    taus: &[TaskVector],
    cfg: &MergeConfig,
    schedule: LrSchedule,
) -> Result<(ParameterMap, MergeReport), MergeError> {
    if taus.is_empty() {
        return Err(MergeError::NoExperts);
    }
    let start = Instant::now();
    let mut maps: Vec<&ParameterMap> = vec![base];
    maps.extend(taus.iter().map(|tv| &tv.tensors));
    check_compatible(&maps)?;

    let mut out = ParameterMap::new();
    let mut report = MergeReport::default();
    for (name, base_t) in base.iter() {
        let layer = collect_layer(name, taus, cfg, base_t.numel());
        let mut lr_report = LayerReport::default();
        let tau_merge = if !matrix_eligible(base_t) || layer.kept.is_empty() {
            lr_report.averaged = true;
            layer.fallback_mean(base_t)
        } else {
            let kept: Vec<&Tensor> = layer.kept.iter().map(|&i| layer.all[i]).collect();
            let (m, n) = kept[0].matrix_dims("merge_wudi")?;
            let taus64: Vec<Vec<f64>> = kept.iter().map(|t| to_f64(t)).collect();
            let grams: Vec<Vec<f64>> = taus64.iter().map(|t| gram_f64(t, m, n)).collect();
            let weights: Vec<f64> = taus64.iter().map(|t| 1.0 / frob2_f64(t)).collect();

            let mut tau = tau_mean(&kept);
            lr_report
                .trace
                .push(wudi_obj_f64(&to_f64(&tau), m, n, &taus64, &weights));
            let mut opt = Adam::new(AdamConfig {
                lr: cfg.learning_rate,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.epsilon,
                weight_decay: cfg.weight_decay,
            });
            for iter in 0..cfg.iterations {
                let tau64 = to_f64(&tau);
                let grad64 = wudi_grad_f64(&tau64, m, n, &taus64, &grams, &weights);
                if grad64.iter().any(|v| !v.is_finite()) {
                    return Err(MergeError::NonFiniteGradient {
                        name: name.to_string(),
                        iter,
                    });
                }
                let grad = Tensor::new(vec![m, n], grad64.iter().map(|&v| v as f32).collect())?;
                let mut single = ParameterMap::new();
                single.insert("tau", tau);
                let mut grads = ParameterMap::new();
                grads.insert("tau", grad);
                let lr = schedule.lr_at(cfg.learning_rate, iter, cfg.iterations);
                opt.step_with_lr(&mut single, &grads, lr)?;
                tau = single.get("tau").expect("still present").clone();
                lr_report
                    .trace
                    .push(wudi_obj_f64(&to_f64(&tau), m, n, &taus64, &weights));
            }
            lr_report.final_objective = *lr_report.trace.last().unwrap();
            let oracle = wudi_closed_form(&kept)?;
            let denom = oracle.frob_norm().max(1e-30);
            lr_report.oracle_deviation = Some(tau.sub(&oracle)?.frob_norm() / denom);
            tau
        };
        report.final_objective += lr_report.final_objective;
        report.per_layer.insert(name.to_string(), lr_report);
        out.insert(name, base_t.add(&tau_merge)?);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((out, report))
}

/// Symmetric inverse square root of a PSD matrix with an eigenvalue floor.
fn inv_sqrt_psd(mat: &[f64], n: usize, floor: f64) -> Result<Vec<f64>, MergeError> {
    // For symmetric PSD input the one-sided Jacobi's V factor is a full
    // eigenvector basis (its rotations cover null directions too, unlike
    // the U columns, which get filled arbitrarily at zero singular values).
    let (_u, s, vt) = crate::tensor::svd_f64(mat, n, n)?;
    // M^(-1/2) = V diag(1/sqrt(max(s, floor))) V^T
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vt[k * n + i] * vt[k * n + j] / s[k].max(floor).sqrt();
            }
            out[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// SVD-based merging: per matrix layer, keep the top singular triplets of
/// each expert's task vector, stack the factors, whiten the stacks, and
/// reassemble. Rank-deficient layers fall back to averaging.
pub fn merge_tsvm(
    base: &ParameterMap,
    taus: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<ParameterMap, MergeError> {
    if taus.is_empty() {
        return Err(MergeError::NoExperts);
    }
    let mut maps: Vec<&ParameterMap> = vec![base];
    maps.extend(taus.iter().map(|tv| &tv.tensors));
    check_compatible(&maps)?;

    let mut out = ParameterMap::new();
    for (name, base_t) in base.iter() {
        let layer = collect_layer(name, taus, cfg, base_t.numel());
        let tau_merge = if !matrix_eligible(base_t) || layer.kept.is_empty() {
            layer.fallback_mean(base_t)
        } else {
            let kept: Vec<&Tensor> = layer.kept.iter().map(|&i| layer.all[i]).collect();
            let (m, n) = kept[0].matrix_dims("merge_tsvm")?;
            let rmin = m.min(n);
            let fraction = cfg
                .tsvm_rank_fraction
                .unwrap_or(1.0 / kept.len() as f64);
            let keep_k = ((fraction * rmin as f64).floor() as usize).max(1);
            // Stack kept factors: U_bar m x T, s_bar T, V_bar n x T.
            let mut u_bar: Vec<Vec<f64>> = Vec::new(); // columns
            let mut s_bar: Vec<f64> = Vec::new();
            let mut v_bar: Vec<Vec<f64>> = Vec::new();
            for t in &kept {
                let (u, s, vt) = t.svd()?;
                for j in 0..keep_k.min(s.numel()) {
                    u_bar.push((0..m).map(|i| u.at2(i, j) as f64).collect());
                    s_bar.push(s.data()[j] as f64);
                    v_bar.push((0..n).map(|i| vt.at2(j, i) as f64).collect());
                }
            }
            let t_cols = s_bar.len();
            let gram_of = |cols: &[Vec<f64>]| {
                let mut g = vec![0.0f64; t_cols * t_cols];
                for i in 0..t_cols {
                    for j in 0..t_cols {
                        g[i * t_cols + j] =
                            cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                    }
                }
                g
            };
            let wu = inv_sqrt_psd(&gram_of(&u_bar), t_cols, 1e-8)?;
            let wv = inv_sqrt_psd(&gram_of(&v_bar), t_cols, 1e-8)?;
            // tau = (U_bar wu) diag(s) (V_bar wv)^T
            //     = U_bar (wu diag(s) wv^T) V_bar^T; wv is symmetric.
            let mut core = vec![0.0f64; t_cols * t_cols];
            for i in 0..t_cols {
                for j in 0..t_cols {
                    let mut acc = 0.0;
                    for k in 0..t_cols {
                        acc += wu[i * t_cols + k] * s_bar[k] * wv[k * t_cols + j];
                    }
                    core[i * t_cols + j] = acc;
                }
            }
            let mut tau = vec![0.0f64; m * n];
            for r in 0..m {
                for c in 0..n {
                    let mut acc = 0.0;
                    for i in 0..t_cols {
                        for j in 0..t_cols {
                            acc += u_bar[i][r] * core[i * t_cols + j] * v_bar[j][c];
                        }
                    }
                    tau[r * n + c] = acc;
                }
            }
            Tensor::new(vec![m, n], tau.iter().map(|&v| v as f32).collect())?
        };
        out.insert(name, base_t.add(&tau_merge)?);
    }
    Ok(out)
}

/// Dispatch on the configured method. Avg averages the full models
/// (base + tau for each expert), matching how the plain-averaging baseline
/// treats every parameter uniformly.
pub fn merge(
    base: &ParameterMap,
    taus: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<(ParameterMap, Option<MergeReport>), MergeError> {
    match cfg.method {
        MergeMethod::Avg => {
            let models: Vec<ParameterMap> = taus
                .iter()
                .map(|tv| base.add(&tv.tensors))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&ParameterMap> = models.iter().collect();
            Ok((merge_average(&refs)?, None))
        }
        MergeMethod::Tsvm => Ok((merge_tsvm(base, taus, cfg)?, None)),
        MergeMethod::Wudi => {
            let (map, report) = merge_wudi(base, taus, cfg)?;
            Ok((map, Some(report)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rmat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(
            vec![m, n],
            (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn rmap(rng: &mut ChaCha8Rng, names: &[(&str, usize, usize)]) -> ParameterMap {
        let mut map = ParameterMap::new();
        for &(name, m, n) in names {
            map.insert(name, rmat(rng, m, n));
        }
        map
    }

    fn e11() -> Tensor {
        Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap()
    }

    fn e22() -> Tensor {
        Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]).unwrap()
    }

    fn oracle_cfg() -> MergeConfig {
        MergeConfig {
            iterations: 5000,
            learning_rate: 1e-2,
            ..MergeConfig::default()
        }
    }

    fn tv(base: &ParameterMap, expert: &ParameterMap, id: impl Into<String>) -> TaskVector {
        compute_task_vector(expert, base, id).unwrap()
    }

    #[test]
    fn task_vector_of_identical_maps_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = rmap(&mut rng, &[("a", 3, 3), ("b", 2, 4)]);
        let tv = compute_task_vector(&m, &m, "e").unwrap();
        for (name, t) in tv.tensors.iter() {
            assert_eq!(t.frob_norm(), 0.0);
            assert_eq!(tv.norms[name], 0.0);
        }
    }

    #[test]
    fn task_vector_from_zero_base_is_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let expert = rmap(&mut rng, &[("a", 3, 3)]);
        let mut base = ParameterMap::new();
        base.insert("a", Tensor::zeros(vec![3, 3]));
        let tv = compute_task_vector(&expert, &base, "e").unwrap();
        assert_eq!(tv.get("a").unwrap().data(), expert.get("a").unwrap().data());
    }

    #[test]
    fn task_vector_reconstructs_expert_within_ulp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = rmap(&mut rng, &[("a", 4, 5)]);
        let expert = rmap(&mut rng, &[("a", 4, 5)]);
        let tv = compute_task_vector(&expert, &base, "e").unwrap();
        let recon = base.add(&tv.tensors).unwrap();
        for (r, e) in recon
            .get("a")
            .unwrap()
            .data()
            .iter()
            .zip(expert.get("a").unwrap().data())
        {
            let ulp = (e.abs().max(f32::MIN_POSITIVE)) * f32::EPSILON;
            assert!((r - e).abs() <= ulp, "{r} vs {e}");
        }
    }

    #[test]
    fn average_of_single_map_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = rmap(&mut rng, &[("a", 3, 2)]);
        let avg = merge_average(&[&m]).unwrap();
        assert_eq!(avg.get("a").unwrap().data(), m.get("a").unwrap().data());
    }

    #[test]
    fn average_of_scalars() {
        let mut a = ParameterMap::new();
        a.insert("w", Tensor::scalar(1.0).unwrap());
        let mut b = ParameterMap::new();
        b.insert("w", Tensor::scalar(3.0).unwrap());
        let avg = merge_average(&[&a, &b]).unwrap();
        assert_eq!(avg.get("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn average_matches_entrywise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<ParameterMap> = (0..4).map(|_| rmap(&mut rng, &[("a", 5, 3)])).collect();
        let refs: Vec<&ParameterMap> = maps.iter().collect();
        let avg = merge_average(&refs).unwrap();
        for k in 0..15 {
            let mean: f64 = maps
                .iter()
                .map(|m| m.get("a").unwrap().data()[k] as f64)
                .sum::<f64>()
                / 4.0;
            assert!((avg.get("a").unwrap().data()[k] as f64 - mean).abs() < 1e-7);
        }
    }

    #[test]
    fn objective_zero_when_merge_equals_single_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rmat(&mut rng, 4, 4);
        assert_eq!(wudi_objective(&t, &[&t]).unwrap(), 0.0);
    }

    #[test]
    fn objective_zero_for_identity_on_orthogonal_rank_ones() {
        let i = Tensor::eye(2);
        let obj = wudi_objective(&i, &[&e11(), &e22()]).unwrap();
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn objective_half_at_averaged_orthogonal_pair() {
        let mean = e11().add(&e22()).unwrap().scale(0.5);
        let obj = wudi_objective(&mean, &[&e11(), &e22()]).unwrap();
        assert!((obj - 0.5).abs() < 1e-9, "obj = {obj}");
    }

    #[test]
    fn objective_rejects_zero_tau() {
        let z = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            wudi_objective(&Tensor::eye(2), &[&z]),
            Err(MergeError::ZeroNormTau)
        ));
    }

    #[test]
    fn closed_form_single_full_rank_expert_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rmat(&mut rng, 5, 4);
        let star = wudi_closed_form(&[&t]).unwrap();
        assert!(star.sub(&t).unwrap().frob_norm() < 1e-4);
    }

    #[test]
    fn closed_form_identical_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = rmat(&mut rng, 4, 4);
        let star = wudi_closed_form(&[&t, &t, &t]).unwrap();
        assert!(star.sub(&t).unwrap().frob_norm() < 1e-4);
    }

    #[test]
    fn closed_form_orthogonal_rank_ones_sum_to_identity() {
        let star = wudi_closed_form(&[&e11(), &e22()]).unwrap();
        assert!(star.sub(&Tensor::eye(2)).unwrap().frob_norm() < 1e-6);
    }

    #[test]
    fn closed_form_gradient_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let taus: Vec<Tensor> = (0..3).map(|_| rmat(&mut rng, 6, 6)).collect();
            let refs: Vec<&Tensor> = taus.iter().collect();
            let star = wudi_closed_form(&refs).unwrap();
            let star64 = to_f64(&star);
            let taus64: Vec<Vec<f64>> = refs.iter().map(|t| to_f64(t)).collect();
            let grams: Vec<Vec<f64>> = taus64.iter().map(|t| gram_f64(t, 6, 6)).collect();
            let ws: Vec<f64> = taus64.iter().map(|t| 1.0 / frob2_f64(t)).collect();
            let g = wudi_grad_f64(&star64, 6, 6, &taus64, &grams, &ws);
            let gnorm = frob2_f64(&g).sqrt();
            let budget: f64 = refs.iter().map(|t| t.frob_norm()).sum();
            assert!(gnorm <= 1e-6 * budget, "grad {gnorm} vs budget {budget}");
        }
    }

    #[test]
    fn wudi_single_expert_returns_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = rmap(&mut rng, &[("w", 4, 4)]);
        let expert = rmap(&mut rng, &[("w", 4, 4)]);
        let tvs = vec![tv(&base, &expert, "e0")];
        let (merged, report) = merge_wudi(&base, &tvs, &MergeConfig::default()).unwrap();
        // Objective is 0 at init, so Adam never moves.
        assert!(
            merged
                .get("w")
                .unwrap()
                .sub(expert.get("w").unwrap())
                .unwrap()
                .frob_norm()
                < 1e-6
        );
        assert!(report.final_objective.abs() < 1e-12);
    }

    #[test]
    fn wudi_sums_orthogonal_experts_where_averaging_halves() {
        let mut base = ParameterMap::new();
        base.insert("w", Tensor::zeros(vec![2, 2]));
        let mut ea = ParameterMap::new();
        ea.insert("w", e11());
        let mut eb = ParameterMap::new();
        eb.insert("w", e22());
        let tvs = vec![tv(&base, &ea, "a"), tv(&base, &eb, "b")];
        let (merged, report) =
            merge_wudi_with_schedule(&base, &tvs, &oracle_cfg(), LrSchedule::DecayTail).unwrap();
        let dev = merged
            .get("w")
            .unwrap()
            .sub(&Tensor::eye(2))
            .unwrap()
            .frob_norm();
        assert!(dev < 1e-4, "dev = {dev}");
        assert!(report.final_objective < 1e-8);

        let avg = merge_average(&[&ea, &eb]).unwrap();
        let half = Tensor::eye(2).scale(0.5);
        assert!(avg.get("w").unwrap().sub(&half).unwrap().frob_norm() < 1e-7);
    }

    #[test]
    fn wudi_matches_closed_form_on_random_taus() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base = rmap(&mut rng, &[("w", 8, 8)]);
        let experts: Vec<ParameterMap> = (0..3).map(|_| rmap(&mut rng, &[("w", 8, 8)])).collect();
        let tvs: Vec<TaskVector> = experts
            .iter()
            .enumerate()
            .map(|(i, e)| tv(&base, e, format!("e{i}")))
            .collect();
        let (_, report) =
            merge_wudi_with_schedule(&base, &tvs, &oracle_cfg(), LrSchedule::DecayTail).unwrap();
        let dev = report.per_layer["w"].oracle_deviation.unwrap();
        assert!(dev <= 1e-3, "oracle deviation {dev}");
    }

    #[test]
    fn wudi_trace_non_increasing_after_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = rmap(&mut rng, &[("w", 6, 6)]);
        let experts: Vec<ParameterMap> = (0..3).map(|_| rmap(&mut rng, &[("w", 6, 6)])).collect();
        let tvs: Vec<TaskVector> = experts
            .iter()
            .enumerate()
            .map(|(i, e)| tv(&base, e, format!("e{i}")))
            .collect();
        let (_, report) =
            merge_wudi_with_schedule(&base, &tvs, &oracle_cfg(), LrSchedule::DecayTail).unwrap();
        let trace = &report.per_layer["w"].trace;
        for i in 10..trace.len() - 1 {
            // Monotone up to the fixed-lr limit-cycle wiggle (~1e-8 relative).
            let budget = 1e-7 * trace[i].max(1e-12);
            assert!(
                trace[i + 1] <= trace[i] + budget,
                "trace rose at {i}: {} -> {}",
                trace[i],
                trace[i + 1]
            );
        }
        // Never worse than the averaged init.
        assert!(report.per_layer["w"].final_objective <= trace[0]);
    }

    #[test]
    fn wudi_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base = rmap(&mut rng, &[("w", 5, 5)]);
        let experts: Vec<ParameterMap> = (0..3).map(|_| rmap(&mut rng, &[("w", 5, 5)])).collect();
        let tvs: Vec<TaskVector> = experts
            .iter()
            .enumerate()
            .map(|(i, e)| tv(&base, e, format!("e{i}")))
            .collect();
        let cfg = oracle_cfg();
        let (m1, _) = merge_wudi_with_schedule(&base, &tvs, &cfg, LrSchedule::DecayTail).unwrap();
        let permuted = vec![tvs[2].clone(), tvs[0].clone(), tvs[1].clone()];
        let (m2, _) =
            merge_wudi_with_schedule(&base, &permuted, &cfg, LrSchedule::DecayTail).unwrap();
        let dev = m1
            .get("w")
            .unwrap()
            .sub(m2.get("w").unwrap())
            .unwrap()
            .frob_norm();
        assert!(dev < 1e-6, "dev = {dev}");
    }

    #[test]
    fn wudi_ignores_zero_task_vector_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let base = rmap(&mut rng, &[("w", 6, 6)]);
        let experts: Vec<ParameterMap> = (0..2).map(|_| rmap(&mut rng, &[("w", 6, 6)])).collect();
        let mut tvs: Vec<TaskVector> = experts
            .iter()
            .enumerate()
            .map(|(i, e)| tv(&base, e, format!("e{i}")))
            .collect();
        let cfg = oracle_cfg();
        let (without, _) =
            merge_wudi_with_schedule(&base, &tvs, &cfg, LrSchedule::DecayTail).unwrap();
        // Include the base itself as an expert: its task vector is zero.
        tvs.push(tv(&base, &base, "base"));
        let (with, _) = merge_wudi_with_schedule(&base, &tvs, &cfg, LrSchedule::DecayTail).unwrap();
        let dev = with
            .get("w")
            .unwrap()
            .sub(without.get("w").unwrap())
            .unwrap()
            .frob_norm();
        assert!(dev <= 1e-7, "dev = {dev}");
    }

    #[test]
    fn identical_experts_merge_to_base_plus_tau_for_all_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let base = rmap(&mut rng, &[("w", 6, 6)]);
        let expert = rmap(&mut rng, &[("w", 6, 6)]);
        let tvs: Vec<TaskVector> = (0..3).map(|i| tv(&base, &expert, format!("e{i}"))).collect();
        let expected = expert.get("w").unwrap();
        let denom = expected.frob_norm().max(1e-12);

        let (wudi, _) = merge_wudi(&base, &tvs, &MergeConfig::default()).unwrap();
        assert!(wudi.get("w").unwrap().sub(expected).unwrap().frob_norm() / denom < 1e-5);

        let cfg_full_rank = MergeConfig {
            tsvm_rank_fraction: Some(1.0),
            ..MergeConfig::default()
        };
        let tsvm = merge_tsvm(&base, &tvs, &cfg_full_rank).unwrap();
        assert!(tsvm.get("w").unwrap().sub(expected).unwrap().frob_norm() / denom < 1e-5);

        let models: Vec<ParameterMap> = tvs.iter().map(|t| base.add(&t.tensors).unwrap()).collect();
        let refs: Vec<&ParameterMap> = models.iter().collect();
        let avg = merge_average(&refs).unwrap();
        assert!(avg.get("w").unwrap().sub(expected).unwrap().frob_norm() / denom < 1e-5);
    }

    #[test]
    fn tsvm_single_expert_full_fraction_reproduces_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = rmap(&mut rng, &[("w", 5, 5)]);
        let expert = rmap(&mut rng, &[("w", 5, 5)]);
        let tvs = vec![tv(&base, &expert, "e")];
        let cfg = MergeConfig {
            tsvm_rank_fraction: Some(1.0),
            ..MergeConfig::default()
        };
        let merged = merge_tsvm(&base, &tvs, &cfg).unwrap();
        let dev = merged
            .get("w")
            .unwrap()
            .sub(expert.get("w").unwrap())
            .unwrap()
            .frob_norm();
        assert!(dev < 1e-5 * expert.get("w").unwrap().frob_norm().max(1.0));
    }

    #[test]
    fn tsvm_orthogonal_rank_ones_stack_to_identity() {
        let mut base = ParameterMap::new();
        base.insert("w", Tensor::zeros(vec![2, 2]));
        let mut ea = ParameterMap::new();
        ea.insert("w", e11());
        let mut eb = ParameterMap::new();
        eb.insert("w", e22());
        let tvs = vec![tv(&base, &ea, "a"), tv(&base, &eb, "b")];
        let merged = merge_tsvm(&base, &tvs, &MergeConfig::default()).unwrap();
        let dev = merged
            .get("w")
            .unwrap()
            .sub(&Tensor::eye(2))
            .unwrap()
            .frob_norm();
        assert!(dev < 1e-5, "dev = {dev}");
    }

    #[test]
    fn tsvm_identical_experts_keep_column_space_and_half_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let base = rmap(&mut rng, &[("w", 6, 6)]);
        let expert = rmap(&mut rng, &[("w", 6, 6)]);
        let tvs: Vec<TaskVector> = (0..2).map(|i| tv(&base, &expert, format!("e{i}"))).collect();
        let merged = merge_tsvm(&base, &tvs, &MergeConfig::default()).unwrap();
        let tau_m = merged
            .get("w")
            .unwrap()
            .sub(base.get("w").unwrap())
            .unwrap();
        let tau = expert.get("w").unwrap().sub(base.get("w").unwrap()).unwrap();
        assert!(tau_m.frob_norm() >= tau.frob_norm() / 2.0);
    }

    #[test]
    fn merge_errors_on_incompatible_maps() {
        let mut base = ParameterMap::new();
        base.insert("w", Tensor::zeros(vec![2, 2]));
        let mut expert = ParameterMap::new();
        expert.insert("w", Tensor::zeros(vec![3, 3]));
        assert!(matches!(
            compute_task_vector(&expert, &base, "e"),
            Err(MergeError::Incompatible(_))
        ));
    }
}

