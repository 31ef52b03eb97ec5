//! Group Relative Policy Optimization on toy autoregressive policies.
//!
//! For each prompt, G completions are sampled from the current policy,
//! scored by the environment, and normalized within the group:
//!
//! ```text
//!   A_i = (r_i - mean(r)) / std(r)          (population std)
//! ```
//!
//! The update maximizes the clipped surrogate, averaged 1/G over the
//! group and 1/|o_i| over tokens, with no KL penalty and no value
//! network:
//!
//! ```text
//!   min(ratio * A_i, clip(ratio, 1-eps, 1+eps) * A_i)
//! ```
//!
//! Degenerate groups (all rewards equal) get zero advantages, so an
//! uninformative group produces exactly no update.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Value};
use crate::domains::{Dataset, DomainId};
use crate::model::{log_softmax, ModelConfig, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size must be >= 2, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("clip epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("completion length {len} exceeds model max length {max}")]
    MaxLengthExceeded { len: usize, max: usize },
    #[error("advantages not filled for group on prompt {0}")]
    AdvantagesMissing(usize),
    #[error("old log-probabilities missing for completion {0}")]
    OldLogProbsMissing(usize),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// Toy-scale default; the production-scale recipe documents 1e-6.
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Prompts sampled per optimizer step (round-robin over the env).
    pub prompts_per_step: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            lr: 1e-3,
            steps: 500,
            seed: 0,
            prompts_per_step: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::BadEpsilon(self.clip_epsilon));
        }
        Ok(())
    }
}

/// One sampled group: prompt, G completions, rewards, normalized
/// advantages, and the sampling policy's per-token log-probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub prompt_id: usize,
    pub completions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub old_logps: Vec<Vec<f64>>,
}

/// Rewards normalized within the group (population standard deviation).
/// All-equal rewards yield all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    for &r in rewards {
        if !r.is_finite() {
            return Err(GrpoError::NonFiniteReward(r));
        }
    }
    // All-equal rewards are degenerate: no signal, zero advantages.
    // Checked by equality, not by std, so float round-off in the mean
    // cannot turn a constant group into spurious +-1 advantages.
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// A task the policy is optimized against. Rewards must lie in [0, 1].
pub trait Environment {
    fn name(&self) -> &str;
    fn num_prompts(&self) -> usize;
    fn observation(&self, prompt: usize) -> Vec<f32>;
    fn cond_tokens(&self, prompt: usize) -> Vec<usize>;
    fn completion_len(&self, prompt: usize) -> usize;
    /// Which model head emits tokens for this prompt.
    fn head(&self, prompt: usize) -> &str;
    fn reward(&self, prompt: usize, completion: &[usize]) -> f64;
}

/// RNG stream for one (seed, prompt, step) sampling job.
fn group_rng(seed: u64, prompt: usize, step: usize) -> ChaCha8Rng {
    let mixed = seed
        ^ (prompt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Sample G completions token-by-token from the policy's softmax.
/// Rewards and advantages are left unfilled.
pub fn sample_group(
    policy: &ToyModel,
    env: &dyn Environment,
    prompt: usize,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryGroup, GrpoError> {
    let len = env.completion_len(prompt);
    if len > policy.cfg.max_len {
        return Err(GrpoError::MaxLengthExceeded {
            len,
            max: policy.cfg.max_len,
        });
    }
    let obs = env.observation(prompt);
    let cond = env.cond_tokens(prompt);
    let mut completions = Vec::with_capacity(group_size);
    let mut old_logps = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let mut tokens: Vec<usize> = Vec::with_capacity(len);
        let mut logps = Vec::with_capacity(len);
        for pos in 0..len {
            let logits = policy.logits(&obs, &cond, &tokens, pos, env.head(prompt));
            let logp = log_softmax(&logits);
            let u: f64 = rng.gen_range(0.0..1.0);
            let mut cum = 0.0f64;
            let mut picked = logp.len() - 1;
            for (tok, &lp) in logp.iter().enumerate() {
                cum += (lp as f64).exp();
                if u < cum {
                    picked = tok;
                    break;
                }
            }
            tokens.push(picked);
            logps.push(logp[picked] as f64);
        }
        completions.push(tokens);
        old_logps.push(logps);
    }
    Ok(TrajectoryGroup {
        prompt_id: prompt,
        completions,
        rewards: Vec::new(),
        advantages: Vec::new(),
        old_logps,
    })
}

/// Score completions with the environment and normalize within-group.
pub fn fill_rewards(group: &mut TrajectoryGroup, env: &dyn Environment) -> Result<(), GrpoError> {
    group.rewards = group
        .completions
        .iter()
        .map(|c| env.reward(group.prompt_id, c))
        .collect();
    group.advantages = group_advantages(&group.rewards)?;
    Ok(())
}

/// Negated clipped-surrogate objective for one group, built on a tape.
pub fn grpo_loss_on_tape(
    policy: &ToyModel,
    tape: &Tape,
    handles: &crate::model::ModelHandles,
    env: &dyn Environment,
    group: &TrajectoryGroup,
    clip_epsilon: f64,
) -> Result<Value, GrpoError> {
    let g = group.completions.len();
    if group.advantages.len() != g {
        return Err(GrpoError::AdvantagesMissing(group.prompt_id));
    }
    if group.old_logps.len() != g {
        return Err(GrpoError::OldLogProbsMissing(group.prompt_id));
    }
    let len = env.completion_len(group.prompt_id);
    let obs = env.observation(group.prompt_id);
    let cond = env.cond_tokens(group.prompt_id);
    let observations: Vec<&[f32]> = (0..g).map(|_| obs.as_slice()).collect();
    let conds: Vec<&[usize]> = (0..g).map(|_| cond.as_slice()).collect();
    let prefixes: Vec<&[usize]> = group.completions.iter().map(|c| c.as_slice()).collect();
    let adv = Tensor::new(
        vec![g],
        group.advantages.iter().map(|&a| a as f32).collect(),
    )
    .map_err(AutodiffError::from)?;

    let lo = (1.0 - clip_epsilon) as f32;
    let hi = (1.0 + clip_epsilon) as f32;
    let mut token_sum: Option<Value> = None;
    for pos in 0..len {
        let logits =
            policy.logits_on_tape(tape, handles, &observations, &conds, &prefixes, pos, env.head(group.prompt_id))?;
        let logp = tape.log_softmax_rows(logits)?;
        let picked: Vec<usize> = group.completions.iter().map(|c| c[pos]).collect();
        let new_logp = tape.gather_rows(logp, &picked)?;
        let old: Vec<f32> = group.old_logps.iter().map(|l| l[pos] as f32).collect();
        if old.iter().any(|v| !v.is_finite()) {
            return Err(GrpoError::OldLogProbsMissing(group.prompt_id));
        }
        let old_const = tape.constant(Tensor::new(vec![g], old).map_err(AutodiffError::from)?);
        let ratio = tape.exp(tape.sub(new_logp, old_const)?)?;
        let unclipped = tape.mul_const(ratio, &adv)?;
        let clipped = tape.mul_const(tape.clamp(ratio, lo, hi)?, &adv)?;
        let term = tape.minimum(unclipped, clipped)?;
        token_sum = Some(match token_sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    // 1/|o_i| over tokens, 1/G over the group, negated.
    let per_completion = tape.scale(token_sum.expect("len >= 1"), 1.0 / len as f32);
    let total = tape.sum(per_completion)?;
    Ok(tape.neg(tape.scale(total, 1.0 / g as f32)))
}

/// Scalar convenience wrapper: loss value for a filled group.
pub fn grpo_loss(
    policy: &ToyModel,
    env: &dyn Environment,
    group: &TrajectoryGroup,
    clip_epsilon: f64,
) -> Result<f64, GrpoError> {
    let tape = Tape::new();
    let handles = policy.register(&tape);
    let v = grpo_loss_on_tape(policy, &tape, &handles, env, group, clip_epsilon)?;
    Ok(tape.scalar_value(v) as f64)
}

/// On-policy training loop: sample, score, one Adam step per batch of
/// groups; the sampling policy refreshes every step. Returns the tuned
/// policy and the mean group reward per step.
pub fn grpo_train(
    policy: &ToyModel,
    env: &dyn Environment,
    cfg: &GrpoConfig,
) -> Result<(ToyModel, Vec<f64>), GrpoError> {
    cfg.validate()?;
    let mut model = policy.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut groups = Vec::with_capacity(cfg.prompts_per_step);
        let mut reward_acc = 0.0f64;
        for k in 0..cfg.prompts_per_step {
            let prompt = (step * cfg.prompts_per_step + k) % env.num_prompts();
            let mut rng = group_rng(cfg.seed, prompt, step);
            let mut group = sample_group(&model, env, prompt, cfg.group_size, &mut rng)?;
            fill_rewards(&mut group, env)?;
            reward_acc += group.rewards.iter().sum::<f64>() / group.rewards.len() as f64;
            groups.push(group);
        }
        curve.push(reward_acc / cfg.prompts_per_step as f64);

        let tape = Tape::new();
        let handles = model.register(&tape);
        let mut loss: Option<Value> = None;
        for group in &groups {
            let l = grpo_loss_on_tape(&model, &tape, &handles, env, group, cfg.clip_epsilon)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(loss.expect("at least one group"), 1.0 / groups.len() as f32);
        if !tape.scalar_value(loss).is_finite() {
            return Err(GrpoError::Diverged { step });
        }
        tape.backward(loss)?;
        let mut grads = crate::params::ParameterMap::new();
        for (name, handle) in &handles.handles {
            grads.insert(name.clone(), tape.grad(*handle));
        }
        let mut params = model.params.clone();
        opt.step(&mut params, &grads)
            .map_err(|_| GrpoError::Diverged { step })?;
        model = model.with_params(params);
    }
    Ok((model, curve))
}

/// Probability the policy emits `token` first for the given prompt.
pub fn first_token_probability(
    policy: &ToyModel,
    env: &dyn Environment,
    prompt: usize,
    token: usize,
) -> f64 {
    let obs = env.observation(prompt);
    let cond = env.cond_tokens(prompt);
    let logits = policy.logits(&obs, &cond, &[], 0, env.head(prompt));
    let logp = log_softmax(&logits);
    (logp[token] as f64).exp()
}

// ---------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------

/// K-armed bandit: one prompt, length-1 completions, reward 1 on the
/// winning arm.
pub struct BanditEnv {
    pub arms: usize,
    pub best_arm: usize,
    pub obs_dim: usize,
}

impl BanditEnv {
    pub fn new(arms: usize, best_arm: usize, obs_dim: usize) -> Self {
        Self {
            arms,
            best_arm,
            obs_dim,
        }
    }
}

impl Environment for BanditEnv {
    fn name(&self) -> &str {
        "bandit4"
    }
    fn num_prompts(&self) -> usize {
        1
    }
    fn observation(&self, _prompt: usize) -> Vec<f32> {
        vec![0.0; self.obs_dim]
    }
    fn cond_tokens(&self, _prompt: usize) -> Vec<usize> {
        vec![4]
    }
    fn completion_len(&self, _prompt: usize) -> usize {
        1
    }
    fn head(&self, _prompt: usize) -> &str {
        "policy"
    }
    fn reward(&self, _prompt: usize, completion: &[usize]) -> f64 {
        f64::from(completion[0] == self.best_arm)
    }
}

/// Exact-match reward on a fixed target sequence.
pub struct SequenceEnv {
    pub target: Vec<usize>,
    pub obs_dim: usize,
}

impl Environment for SequenceEnv {
    fn name(&self) -> &str {
        "seq3"
    }
    fn num_prompts(&self) -> usize {
        1
    }
    fn observation(&self, _prompt: usize) -> Vec<f32> {
        vec![0.0; self.obs_dim]
    }
    fn cond_tokens(&self, _prompt: usize) -> Vec<usize> {
        vec![5]
    }
    fn completion_len(&self, _prompt: usize) -> usize {
        self.target.len()
    }
    fn head(&self, _prompt: usize) -> &str {
        "policy"
    }
    fn reward(&self, _prompt: usize, completion: &[usize]) -> f64 {
        f64::from(completion == self.target)
    }
}

/// Same reward for everything; useful as the no-signal control.
pub struct ConstantEnv {
    pub value: f64,
    pub obs_dim: usize,
}

impl Environment for ConstantEnv {
    fn name(&self) -> &str {
        "constant"
    }
    fn num_prompts(&self) -> usize {
        1
    }
    fn observation(&self, _prompt: usize) -> Vec<f32> {
        vec![0.0; self.obs_dim]
    }
    fn cond_tokens(&self, _prompt: usize) -> Vec<usize> {
        vec![4]
    }
    fn completion_len(&self, _prompt: usize) -> usize {
        1
    }
    fn head(&self, _prompt: usize) -> &str {
        "policy"
    }
    fn reward(&self, _prompt: usize, _completion: &[usize]) -> f64 {
        self.value
    }
}

/// Rewards completions on real domain examples by per-token agreement
/// with the reference answer. Drives the optional post-merge RFT stage.
pub struct DomainEnv {
    examples: Vec<(DomainId, crate::domains::Example)>,
}

impl DomainEnv {
    pub fn new(datasets: &[&Dataset]) -> Self {
        let mut examples = Vec::new();
        for ds in datasets {
            for ex in &ds.examples {
                examples.push((ds.domain, ex.clone()));
            }
        }
        Self { examples }
    }
}

impl Environment for DomainEnv {
    fn name(&self) -> &str {
        "domain"
    }
    fn num_prompts(&self) -> usize {
        self.examples.len()
    }
    fn observation(&self, prompt: usize) -> Vec<f32> {
        self.examples[prompt].1.observation.clone()
    }
    fn cond_tokens(&self, prompt: usize) -> Vec<usize> {
        self.examples[prompt].1.cond.clone()
    }
    fn completion_len(&self, prompt: usize) -> usize {
        self.examples[prompt].1.target.len()
    }
    fn head(&self, prompt: usize) -> &str {
        self.examples[prompt].0.as_str()
    }
    fn reward(&self, prompt: usize, completion: &[usize]) -> f64 {
        let target = &self.examples[prompt].1.target;
        let hits = completion
            .iter()
            .zip(target)
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / target.len() as f64
    }
}

/// CLI-facing registry.
pub fn make_env(name: &str, obs_dim: usize) -> Option<Box<dyn Environment>> {
    match name {
        "bandit4" => Some(Box::new(BanditEnv::new(4, 2, obs_dim))),
        "seq3" => Some(Box::new(SequenceEnv {
            target: vec![2, 0, 3],
            obs_dim,
        })),
        "constant" => Some(Box::new(ConstantEnv {
            value: 0.7,
            obs_dim,
        })),
        _ => None,
    }
}

/// Policy scaffold for the self-contained envs above.
pub fn policy_model(seed: u64) -> ToyModel {
    ToyModel::init(ModelConfig {
        obs_dim: 4,
        hidden: 16,
        vocab: 4,
        cond_vocab: 8,
        max_len: 4,
        heads: vec!["policy".into()],
        seed,
    })
}
