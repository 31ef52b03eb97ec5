//! Small autoregressive softmax models over a shared MLP trunk with one
//! linear head per domain.
//!
//! Token t sees the observation (lifted to the hidden width), the mean of
//! the conditioning-token embeddings, the mean of the already-emitted
//! target tokens' embeddings, and a position embedding. Everything is a
//! named tensor in a ParameterMap, so checkpoints, task vectors, and
//! merging treat models uniformly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Value};
use crate::params::ParameterMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub cond_vocab: usize,
    pub max_len: usize,
    pub heads: Vec<String>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_dim: 4,
            hidden: 16,
            vocab: 8,
            cond_vocab: 8,
            max_len: 4,
            heads: vec![
                "spatial".into(),
                "ad".into(),
                "uav".into(),
                "embodied".into(),
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyModel {
    pub params: ParameterMap,
    pub cfg: ModelConfig,
}

/// Parameter handles for one forward pass on a tape.
pub struct ModelHandles {
    pub handles: std::collections::BTreeMap<String, Value>,
}

impl ToyModel {
    pub fn init(cfg: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParameterMap::new();
        let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f32| {
            Tensor::new(
                vec![r, c],
                (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
            .expect("finite init")
        };
        let h = cfg.hidden;
        let s_in = 1.0 / (cfg.obs_dim as f32).sqrt();
        let s_h = 1.0 / (h as f32).sqrt();
        params.insert("emb.cond", mat(&mut rng, cfg.cond_vocab, h, 0.3));
        params.insert("emb.tok", mat(&mut rng, cfg.vocab, h, 0.3));
        params.insert("emb.pos", mat(&mut rng, cfg.max_len, h, 0.3));
        params.insert("obs.w", mat(&mut rng, cfg.obs_dim, h, s_in));
        params.insert("obs.b", Tensor::zeros(vec![h]));
        params.insert("trunk.l1.w", mat(&mut rng, h, h, s_h));
        params.insert("trunk.l1.b", Tensor::zeros(vec![h]));
        params.insert("trunk.l2.w", mat(&mut rng, h, h, s_h));
        params.insert("trunk.l2.b", Tensor::zeros(vec![h]));
        for head in &cfg.heads {
            params.insert(format!("head.{head}.w"), mat(&mut rng, h, cfg.vocab, s_h));
            params.insert(format!("head.{head}.b"), Tensor::zeros(vec![cfg.vocab]));
        }
        params.set_meta("seed", cfg.seed.to_string());
        params.set_meta("stage", "init");
        ToyModel { params, cfg }
    }

    pub fn with_params(&self, params: ParameterMap) -> ToyModel {
        ToyModel {
            params,
            cfg: self.cfg.clone(),
        }
    }

    pub fn register(&self, tape: &Tape) -> ModelHandles {
        let mut handles = std::collections::BTreeMap::new();
        for (name, t) in self.params.iter() {
            handles.insert(name.to_string(), tape.leaf(t.clone()));
        }
        ModelHandles { handles }
    }

    /// Logits for position `pos` of a batch on the tape: rows are
    /// examples, all sharing the same position and head.
    ///
    /// `prefixes[b]` holds the tokens already emitted for row b
    /// (teacher-forced targets during SFT, sampled tokens during rollout).
    pub fn logits_on_tape(
        &self,
        tape: &Tape,
        hs: &ModelHandles,
        observations: &[&[f32]],
        conds: &[&[usize]],
        prefixes: &[&[usize]],
        pos: usize,
        head: &str,
    ) -> Result<Value, AutodiffError> {
        let h = &hs.handles;
        let bsz = observations.len();
        let d = self.cfg.obs_dim;
        let mut obs_data = Vec::with_capacity(bsz * d);
        for o in observations {
            obs_data.extend_from_slice(o);
        }
        let obs = tape.constant(Tensor::new(vec![bsz, d], obs_data)?);
        let mut x = tape.add_row(tape.matmul(obs, h["obs.w"])?, h["obs.b"])?;

        // Mean of conditioning-token embeddings (every row has >= 1).
        let cond_len = conds[0].len();
        for j in 0..cond_len {
            let ids: Vec<usize> = conds.iter().map(|c| c[j]).collect();
            let e = tape.embed_rows(h["emb.cond"], &ids)?;
            x = tape.add(x, tape.scale(e, 1.0 / cond_len as f32))?;
        }
        // Mean of the prefix-token embeddings.
        if pos > 0 {
            for j in 0..pos {
                let ids: Vec<usize> = prefixes.iter().map(|p| p[j]).collect();
                let e = tape.embed_rows(h["emb.tok"], &ids)?;
                x = tape.add(x, tape.scale(e, 1.0 / pos as f32))?;
            }
        }
        // Position embedding for the slot being predicted.
        let pos_ids = vec![pos; bsz];
        let pe = tape.embed_rows(h["emb.pos"], &pos_ids)?;
        x = tape.add(x, pe)?;

        let h1 = tape.tanh(tape.add_row(tape.matmul(x, h["trunk.l1.w"])?, h["trunk.l1.b"])?)?;
        let h2 = tape.tanh(tape.add_row(tape.matmul(h1, h["trunk.l2.w"])?, h["trunk.l2.b"])?)?;
        let wk = format!("head.{head}.w");
        let bk = format!("head.{head}.b");
        tape.add_row(tape.matmul(h2, h[&wk])?, h[&bk])
    }

    /// Tape-free forward for evaluation; must agree with `logits_on_tape`.
    pub fn logits(
        &self,
        observation: &[f32],
        cond: &[usize],
        prefix: &[usize],
        pos: usize,
        head: &str,
    ) -> Vec<f32> {
        let p = &self.params;
        let h = self.cfg.hidden;
        let d = self.cfg.obs_dim;
        let ow = p.get("obs.w").expect("obs.w");
        let ob = p.get("obs.b").expect("obs.b");
        let mut x = vec![0.0f32; h];
        for j in 0..h {
            let mut acc = ob.data()[j] as f64;
            for i in 0..d {
                acc += observation[i] as f64 * ow.at2(i, j) as f64;
            }
            x[j] = acc as f32;
        }
        let add_rows = |x: &mut [f32], table: &Tensor, ids: &[usize], scale: f32| {
            for &id in ids {
                for (j, slot) in x.iter_mut().enumerate() {
                    *slot += table.at2(id, j) * scale;
                }
            }
        };
        add_rows(
            &mut x,
            p.get("emb.cond").expect("emb.cond"),
            cond,
            1.0 / cond.len() as f32,
        );
        if pos > 0 {
            add_rows(
                &mut x,
                p.get("emb.tok").expect("emb.tok"),
                &prefix[..pos],
                1.0 / pos as f32,
            );
        }
        add_rows(&mut x, p.get("emb.pos").expect("emb.pos"), &[pos], 1.0);

        let dense = |x: &[f32], w: &Tensor, b: &Tensor, act: bool| {
            let cols = w.shape()[1];
            let mut out = vec![0.0f32; cols];
            for (j, slot) in out.iter_mut().enumerate() {
                let mut acc = b.data()[j] as f64;
                for (i, &v) in x.iter().enumerate() {
                    acc += v as f64 * w.at2(i, j) as f64;
                }
                *slot = if act { (acc as f32).tanh() } else { acc as f32 };
            }
            out
        };
        let h1 = dense(
            &x,
            p.get("trunk.l1.w").expect("w1"),
            p.get("trunk.l1.b").expect("b1"),
            true,
        );
        let h2 = dense(
            &h1,
            p.get("trunk.l2.w").expect("w2"),
            p.get("trunk.l2.b").expect("b2"),
            true,
        );
        dense(
            &h2,
            p.get(&format!("head.{head}.w")).expect("head w"),
            p.get(&format!("head.{head}.b")).expect("head b"),
            false,
        )
    }

    /// Greedy per-token prediction of a full answer (teacher-free).
    pub fn predict(
        &self,
        observation: &[f32],
        cond: &[usize],
        answer_len: usize,
        head: &str,
    ) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(answer_len);
        for pos in 0..answer_len {
            let logits = self.logits(observation, cond, &out, pos, head);
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            out.push(best);
        }
        out
    }
}

pub fn log_softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut lse = 0.0f64;
    for &v in logits {
        lse += ((v - max) as f64).exp();
    }
    let lse = lse.ln() as f32 + max;
    logits.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_is_deterministic() {
        let model = ToyModel::init(ModelConfig::default());
        let obs = [0.3, -0.7, 0.1, 0.9];
        let a = model.logits(&obs, &[0], &[2], 1, "spatial");
        let b = model.logits(&obs, &[0], &[2], 1, "spatial");
        assert_eq!(a, b);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let model = ToyModel::init(ModelConfig::default());
        let tape = Tape::new();
        let hs = model.register(&tape);
        let obs: Vec<f32> = vec![0.5, -0.2, 0.8, -0.9];
        let cond = vec![1usize];
        let prefix = vec![3usize, 1];
        let v = model
            .logits_on_tape(&tape, &hs, &[&obs], &[&cond], &[&prefix], 2, "ad")
            .unwrap();
        let tape_logits = tape.value(v);
        let plain = model.logits(&obs, &cond, &prefix, 2, "ad");
        for (a, b) in tape_logits.data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn distinct_seeds_distinct_params() {
        let a = ToyModel::init(ModelConfig::default());
        let b = ToyModel::init(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        });
        assert_ne!(
            a.params.get("trunk.l1.w").unwrap().data(),
            b.params.get("trunk.l1.w").unwrap().data()
        );
    }
}
