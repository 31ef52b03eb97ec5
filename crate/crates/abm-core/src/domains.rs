//! Synthetic multi-domain task generator.
//!
//! Every domain shares one latent geometric variable g ~ N(0, I_d). A
//! domain observes g through its own orthogonal channel (a rotation of
//! the scaffold channel plus an offset and Gaussian noise) and labels
//! samples with a function of g alone:
//!
//! - spatial:  three quartile-binned projections of g (3-token answer)
//! - ad:       one quartile-binned steering projection (1 token)
//! - uav:      one quartile-binned altitude projection (1 token)
//! - embodied: the sign pattern of g (4-token structured answer)
//!
//! Because labels depend only on g, anything that learns to decode g from
//! one channel transfers to the others; channel rotation angle is the
//! knob controlling how hard that transfer is.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Spatial,
    Ad,
    Uav,
    Embodied,
}

impl DomainId {
    pub const ALL: [DomainId; 4] = [
        DomainId::Spatial,
        DomainId::Ad,
        DomainId::Uav,
        DomainId::Embodied,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DomainId::Spatial => "spatial",
            DomainId::Ad => "ad",
            DomainId::Uav => "uav",
            DomainId::Embodied => "embodied",
        }
    }

    /// Conditioning-token id fed to the model.
    pub fn cond_token(&self) -> usize {
        match self {
            DomainId::Spatial => 0,
            DomainId::Ad => 1,
            DomainId::Uav => 2,
            DomainId::Embodied => 3,
        }
    }

    pub fn parse(s: &str) -> Option<DomainId> {
        DomainId::ALL.iter().copied().find(|d| d.as_str() == s)
    }
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label function parameters (what the generative mechanism computes
/// from g to produce the answer tokens).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LabelHead {
    /// Tokens = quantile bins of unit-direction projections of g, one
    /// token per direction; `edges` are the N(0,1) quantile boundaries.
    Quantile { dirs: Vec<Vec<f32>>, edges: Vec<f32> },
    /// Token j = 1 if g_j > 0 else 0, one per latent coordinate.
    SignPattern,
}

/// N(0,1) quartile edges; projections use unit directions so these apply.
pub const QUARTILE_EDGES: [f32; 3] = [-0.674_489_8, 0.0, 0.674_489_8];
/// Median split.
pub const MEDIAN_EDGE: [f32; 1] = [0.0];

impl LabelHead {
    pub fn label(&self, g: &[f32]) -> Vec<usize> {
        match self {
            LabelHead::Quantile { dirs, edges } => dirs
                .iter()
                .map(|dir| {
                    let p: f32 = dir.iter().zip(g).map(|(a, b)| a * b).sum();
                    edges.iter().filter(|&&e| p > e).count()
                })
                .collect(),
            LabelHead::SignPattern => g.iter().map(|&v| usize::from(v > 0.0)).collect(),
        }
    }

    pub fn answer_len(&self, latent_dim: usize) -> usize {
        match self {
            LabelHead::Quantile { dirs, .. } => dirs.len(),
            LabelHead::SignPattern => latent_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: DomainId,
    pub latent_dim: usize,
    /// Orthogonal observation channel Q_m (latent_dim x latent_dim).
    pub channel: Tensor,
    /// Channel offset b_m.
    pub offset: Vec<f32>,
    /// Observation noise sigma.
    pub noise: f32,
    pub label_head: LabelHead,
}

impl DomainSpec {
    /// Recover g from an observation by inverting the channel (exact when
    /// noise is zero). This plays the decoder role in the transfer bound.
    pub fn decode_latent(&self, obs: &[f32]) -> Vec<f32> {
        let d = self.latent_dim;
        let mut g = vec![0.0f32; d];
        for i in 0..d {
            let mut acc = 0.0f64;
            for j in 0..d {
                // Q^T (o - b)
                acc += self.channel.at2(j, i) as f64 * (obs[j] - self.offset[j]) as f64;
            }
            g[i] = acc as f32;
        }
        g
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example {
    pub observation: Vec<f32>,
    pub cond: Vec<usize>,
    pub target: Vec<usize>,
    /// True latent, kept for oracle classifiers; models never see it.
    pub latent: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub domain: DomainId,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            domain: self.domain,
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Dataset,
    pub eval: Dataset,
    /// Extra split used for mixed "general" warmup batches.
    pub general: Dataset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub latent_dim: usize,
    /// Per-domain observation noise, in DomainId::ALL order.
    pub noises: [f32; 4],
    pub train_count: usize,
    pub eval_count: usize,
    /// Per-domain sizes of the mixed "general" warmup split, in
    /// DomainId::ALL order.
    pub general_counts: [usize; 4],
    /// Rotation angle (radians) of each domain's channel away from the
    /// scaffold channel, in DomainId::ALL order.
    pub channel_angles: [f32; 4],
    /// Use one shared channel for every domain (the degenerate case).
    pub identical_channels: bool,
    /// Quartile-binned steering/altitude labels instead of median splits.
    /// Fine bins need accurate latent decoding, so scaffold quality shows;
    /// median splits have fat margins that survive parameter merging.
    pub fine_planning_labels: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            noises: [0.05, 0.05, 0.05, 0.1],
            train_count: 256,
            eval_count: 1024,
            general_counts: [128, 24, 24, 208],
            channel_angles: [0.0, 0.1, 0.1, 0.25],
            identical_channels: false,
            fine_planning_labels: false,
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Random orthogonal d x d matrix: the U factor of a Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let data: Vec<f32> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let m = Tensor::new(vec![d, d], data).expect("finite");
    let (u, _, _) = m.svd().expect("svd of random matrix");
    u
}

/// Rotation by `angle` in the coordinate plane `(i, j)`, composed with
/// a base channel. Distinct domains rotate in distinct planes, so their
/// channel adaptations occupy near-orthogonal weight subspaces.
pub fn rotate_channel_in_plane(base: &Tensor, angle: f32, plane: (usize, usize)) -> Tensor {
    let d = base.shape()[0];
    let mut r = Tensor::eye(d);
    if angle != 0.0 {
        let (i, j) = plane;
        let mut data = r.data().to_vec();
        let (c, s) = (angle.cos(), angle.sin());
        data[i * d + i] = c;
        data[i * d + j] = -s;
        data[j * d + i] = s;
        data[j * d + j] = c;
        r = Tensor::new(vec![d, d], data).expect("finite");
    }
    r.matmul(base).expect("square matmul")
}

/// Rotation in the plane of the first two coordinates.
pub fn rotate_channel(base: &Tensor, angle: f32) -> Tensor {
    rotate_channel_in_plane(base, angle, (0, 1))
}

fn sample_examples(rng: &mut ChaCha8Rng, spec: &DomainSpec, count: usize) -> Vec<Example> {
    let d = spec.latent_dim;
    (0..count)
        .map(|_| {
            let g: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let mut obs = vec![0.0f32; d];
            for i in 0..d {
                let mut acc = spec.offset[i] as f64;
                for j in 0..d {
                    acc += spec.channel.at2(i, j) as f64 * g[j] as f64;
                }
                acc += (spec.noise * rng.sample::<f32, _>(StandardNormal)) as f64;
                obs[i] = acc as f32;
            }
            let target = spec.label_head.label(&g);
            Example {
                observation: obs,
                cond: vec![spec.id.cond_token()],
                target,
                latent: g,
            }
        })
        .collect()
}

/// Build all four domains from one seed: shared latent prior, per-domain
/// channels rotated away from the scaffold channel, labels decodable
/// from g by construction.
pub fn make_synthetic_domains(seed: u64, cfg: &SuiteConfig) -> BTreeMap<DomainId, DomainData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.latent_dim;
    let scaffold_channel = random_orthogonal(&mut rng, d);
    let spatial_dirs: Vec<Vec<f32>> = (0..3).map(|_| random_unit(&mut rng, d)).collect();
    let steering_dir = random_unit(&mut rng, d);
    let altitude_dir = random_unit(&mut rng, d);

    let planning_edges: Vec<f32> = if cfg.fine_planning_labels {
        QUARTILE_EDGES.to_vec()
    } else {
        MEDIAN_EDGE.to_vec()
    };
    let mut out = BTreeMap::new();
    for (k, id) in DomainId::ALL.into_iter().enumerate() {
        let angle = if cfg.identical_channels {
            0.0
        } else {
            cfg.channel_angles[k]
        };
        // Each domain adapts a different coordinate plane of the latent.
        let plane = match id {
            DomainId::Spatial => (0, 1),
            DomainId::Ad => (0, 2),
            DomainId::Uav => (1, 3),
            DomainId::Embodied => (1, 2),
        };
        let channel = rotate_channel_in_plane(&scaffold_channel, angle, plane);
        let offset: Vec<f32> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let label_head = match id {
            DomainId::Spatial => LabelHead::Quantile {
                dirs: spatial_dirs.clone(),
                edges: QUARTILE_EDGES.to_vec(),
            },
            DomainId::Ad => LabelHead::Quantile {
                dirs: vec![steering_dir.clone()],
                edges: planning_edges.clone(),
            },
            DomainId::Uav => LabelHead::Quantile {
                dirs: vec![altitude_dir.clone()],
                edges: planning_edges.clone(),
            },
            DomainId::Embodied => LabelHead::SignPattern,
        };
        let spec = DomainSpec {
            id,
            latent_dim: d,
            channel,
            offset,
            noise: cfg.noises[k],
            label_head,
        };
        let train = Dataset {
            domain: id,
            examples: sample_examples(&mut rng, &spec, cfg.train_count),
        };
        let eval = Dataset {
            domain: id,
            examples: sample_examples(&mut rng, &spec, cfg.eval_count),
        };
        let general = Dataset {
            domain: id,
            examples: sample_examples(&mut rng, &spec, cfg.general_counts[k]),
        };
        out.insert(
            id,
            DomainData {
                spec,
                train,
                eval,
                general,
            },
        );
    }
    out
}

/// Per-token accuracy of the channel-inverting quantile/sign classifier:
/// decode g from the (noisy) observation, then apply the label function.
/// This is the brute-force oracle model accuracies are judged against.
pub fn oracle_accuracy(data: &DomainData, dataset: &Dataset) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in &dataset.examples {
        let g_hat = data.spec.decode_latent(&ex.observation);
        let pred = data.spec.label_head.label(&g_hat);
        for (p, t) in pred.iter().zip(&ex.target) {
            correct += usize::from(p == t);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_datasets() {
        let cfg = SuiteConfig::default();
        let a = make_synthetic_domains(42, &cfg);
        let b = make_synthetic_domains(42, &cfg);
        for id in DomainId::ALL {
            let (da, db) = (&a[&id], &b[&id]);
            assert_eq!(da.train.examples.len(), db.train.examples.len());
            for (x, y) in da.train.examples.iter().zip(&db.train.examples) {
                assert_eq!(x.observation, y.observation);
                assert_eq!(x.target, y.target);
            }
        }
    }

    #[test]
    fn channels_are_orthogonal() {
        let cfg = SuiteConfig::default();
        let suite = make_synthetic_domains(0, &cfg);
        for data in suite.values() {
            let q = &data.spec.channel;
            let qtq = q.transpose().unwrap().matmul(q).unwrap();
            let dev = qtq.sub(&Tensor::eye(cfg.latent_dim)).unwrap().frob_norm();
            assert!(dev < 1e-6, "channel not orthogonal: {dev}");
        }
    }

    #[test]
    fn zero_noise_identical_channels_oracle_is_perfect() {
        let cfg = SuiteConfig {
            noises: [0.0; 4],
            identical_channels: true,
            ..SuiteConfig::default()
        };
        let suite = make_synthetic_domains(7, &cfg);
        for data in suite.values() {
            let acc = oracle_accuracy(data, &data.eval);
            assert_eq!(acc, 1.0, "domain {}", data.spec.id);
        }
    }

    #[test]
    fn default_config_oracle_exceeds_95_percent() {
        let suite = make_synthetic_domains(0, &SuiteConfig::default());
        for data in suite.values() {
            let acc = oracle_accuracy(data, &data.eval);
            assert!(acc > 0.95, "domain {} oracle {acc}", data.spec.id);
        }
    }

    #[test]
    fn answer_lengths_match_domain_structure() {
        let suite = make_synthetic_domains(0, &SuiteConfig::default());
        assert_eq!(suite[&DomainId::Spatial].train.examples[0].target.len(), 3);
        assert_eq!(suite[&DomainId::Ad].train.examples[0].target.len(), 1);
        assert_eq!(suite[&DomainId::Uav].train.examples[0].target.len(), 1);
        assert_eq!(suite[&DomainId::Embodied].train.examples[0].target.len(), 4);
    }
}
