//! Square-averaging supervised training and the staged multi-domain
//! pipelines: the scaffold/specialize/reconcile route plus the sequential
//! and joint baselines it is compared against, all on matched step
//! budgets.
//!
//! The supervised loss weights each token of a length-T response by
//! 1/sqrt(T) and normalizes the batch by sum(sqrt(T)):
//!
//! ```text
//!   L = (sum_s sum_t l_{s,t} / sqrt(T_s)) / (sum_s sqrt(T_s))
//! ```
//!
//! which interpolates between token-mean and sample-mean weighting and
//! keeps long and short responses' gradient contributions balanced.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Value};
use crate::checkpoint::{encode, write_checkpoint, CkptError};
use crate::domains::{make_synthetic_domains, Dataset, DomainData, DomainId, Example, SuiteConfig};
use crate::grpo::{grpo_train, DomainEnv, GrpoConfig, GrpoError};
use crate::merge::{compute_task_vector, merge, MergeConfig, MergeError, MergeMethod, MergeReport};
use crate::model::{log_softmax, ModelConfig, ModelHandles, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParameterMap;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("stage references unknown domain {0}")]
    UnknownDomain(String),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

fn stage_err(stage: &str, source: TrainError) -> TrainError {
    TrainError::Stage {
        stage: stage.to_string(),
        source: Box::new(source),
    }
}

/// One labeled row: the example plus the domain whose head scores it.
#[derive(Debug, Clone)]
pub struct TrainRow {
    pub example: Example,
    pub domain: DomainId,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub rows: Vec<TrainRow>,
}

impl TrainSet {
    pub fn from_dataset(ds: &Dataset) -> Self {
        TrainSet {
            rows: ds
                .examples
                .iter()
                .map(|e| TrainRow {
                    example: e.clone(),
                    domain: ds.domain,
                })
                .collect(),
        }
    }

    pub fn from_datasets(datasets: &[&Dataset]) -> Self {
        let mut rows = Vec::new();
        for ds in datasets {
            rows.extend(TrainSet::from_dataset(ds).rows);
        }
        TrainSet { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Combine per-token losses with 1/sqrt(T) weights and sum(sqrt(T))
/// normalization. This is the reference arithmetic the tape loss must
/// reproduce.
pub fn square_avg_combine(token_losses: &[Vec<f64>]) -> f64 {
    let mut numerator = 0.0f64;
    let mut denominator = 0.0f64;
    for losses in token_losses {
        let t = losses.len() as f64;
        let root = t.sqrt();
        numerator += losses.iter().sum::<f64>() / root;
        denominator += root;
    }
    numerator / denominator.max(f64::MIN_POSITIVE)
}

/// Square-averaging cross-entropy over a (possibly mixed-domain) batch,
/// built on the tape. Rows are grouped by domain so each group runs its
/// own head; the normalization spans the whole batch.
pub fn loss_square_avg_on_tape(
    model: &ToyModel,
    tape: &Tape,
    handles: &ModelHandles,
    rows: &[&TrainRow],
) -> Result<Value, TrainError> {
    if rows.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut by_domain: BTreeMap<DomainId, Vec<&TrainRow>> = BTreeMap::new();
    for row in rows {
        by_domain.entry(row.domain).or_default().push(row);
    }
    let denom: f64 = rows
        .iter()
        .map(|r| (r.example.target.len() as f64).sqrt())
        .sum();

    let mut total: Option<Value> = None;
    for (domain, group) in by_domain {
        let answer_len = group[0].example.target.len();
        let weight = -1.0 / (answer_len as f64).sqrt();
        let observations: Vec<&[f32]> = group
            .iter()
            .map(|r| r.example.observation.as_slice())
            .collect();
        let conds: Vec<&[usize]> = group.iter().map(|r| r.example.cond.as_slice()).collect();
        let prefixes: Vec<&[usize]> =
            group.iter().map(|r| r.example.target.as_slice()).collect();
        for pos in 0..answer_len {
            let logits = model.logits_on_tape(
                tape,
                handles,
                &observations,
                &conds,
                &prefixes,
                pos,
                domain.as_str(),
            )?;
            let logp = tape.log_softmax_rows(logits)?;
            let picked: Vec<usize> = group.iter().map(|r| r.example.target[pos]).collect();
            let nll = tape.gather_rows(logp, &picked)?;
            let contrib = tape.scale(tape.sum(nll)?, weight as f32);
            total = Some(match total {
                None => contrib,
                Some(acc) => tape.add(acc, contrib)?,
            });
        }
    }
    Ok(tape.scale(total.expect("non-empty batch"), (1.0 / denom) as f32))
}

/// Scalar loss of a batch without building gradients (plain forward).
pub fn loss_square_avg(model: &ToyModel, rows: &[&TrainRow]) -> f64 {
    let token_losses: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            let ex = &row.example;
            (0..ex.target.len())
                .map(|pos| {
                    let logits =
                        model.logits(&ex.observation, &ex.cond, &ex.target, pos, row.domain.as_str());
                    let logp = log_softmax(&logits);
                    -(logp[ex.target[pos]] as f64)
                })
                .collect()
        })
        .collect();
    square_avg_combine(&token_losses)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SftOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Step-driven supervised training: shuffled epochs over the set, one
/// AdamW-style update per minibatch, stopping at exactly `steps` updates.
pub fn sft_train(
    model: &ToyModel,
    train_set: &TrainSet,
    opts: &SftOptions,
) -> Result<(ToyModel, Vec<f64>), TrainError> {
    if train_set.is_empty() && opts.steps > 0 {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut tuned = model.clone();
    let mut curve = Vec::with_capacity(opts.steps);
    if opts.steps == 0 {
        return Ok((tuned, curve));
    }
    // Toy-scale epsilon: with the production 1e-8, coordinates whose
    // gradients are pure minibatch noise still take full lr-sized steps
    // (the sign-step regime), and that churn dominates parameter drift
    // at these widths. 1e-4 keeps noise-level coordinates proportional
    // to their gradients while leaving real signal untouched.
    let mut opt = Adam::new(AdamConfig {
        lr: opts.lr,
        weight_decay: opts.weight_decay,
        eps: 1e-4,
        ..AdamConfig::with_lr(opts.lr)
    });
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = usize::MAX;
    let mut step = 0usize;
    while step < opts.steps {
        if cursor >= order.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(epoch));
            order.shuffle(&mut rng);
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + opts.batch_size).min(order.len());
        let rows: Vec<&TrainRow> = order[cursor..end].iter().map(|&i| &train_set.rows[i]).collect();
        cursor = end;

        let tape = Tape::new();
        let handles = tuned.register(&tape);
        let loss = loss_square_avg_on_tape(&tuned, &tape, &handles, &rows)?;
        let loss_val = tape.scalar_value(loss) as f64;
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        tape.backward(loss)?;
        let mut grads = ParameterMap::new();
        for (name, handle) in &handles.handles {
            grads.insert(name.clone(), tape.grad(*handle));
        }
        let mut params = tuned.params.clone();
        opt.step(&mut params, &grads)
            .map_err(|_| TrainError::Diverged { step })?;
        tuned = tuned.with_params(params);
        curve.push(loss_val);
        step += 1;
    }
    Ok((tuned, curve))
}

/// Teacher-forced per-token accuracy on a dataset: each position is
/// predicted from the reference prefix, the standard token-accuracy
/// protocol for autoregressive models.
pub fn evaluate(model: &ToyModel, dataset: &Dataset) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in &dataset.examples {
        for pos in 0..ex.target.len() {
            let logits = model.logits(
                &ex.observation,
                &ex.cond,
                &ex.target,
                pos,
                dataset.domain.as_str(),
            );
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            correct += usize::from(best == ex.target[pos]);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

/// Square-averaging eval loss on a dataset (teacher-forced).
pub fn eval_loss(model: &ToyModel, dataset: &Dataset) -> f64 {
    let set = TrainSet::from_dataset(dataset);
    let rows: Vec<&TrainRow> = set.rows.iter().collect();
    loss_square_avg(model, &rows)
}

// ---------------------------------------------------------------------
// Staged pipelines
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub domain: DomainId,
    /// How many training examples of the domain's train split to use.
    pub dataset_size: usize,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoStage {
    pub steps: usize,
    pub lr: f64,
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// Examples per domain in the mixed reward environment.
    pub prompts_per_domain: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsrConfig {
    pub seed: u64,
    pub suite: SuiteConfig,
    pub hidden: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Mixed-domain warmup producing the activated base model.
    pub general_steps: usize,
    pub general_lr: f64,
    pub scaffold: StageSpec,
    pub specialize: Vec<StageSpec>,
    pub embodied: StageSpec,
    pub merge_method: MergeMethod,
    pub merge_config: MergeConfig,
    /// Let the base model participate in merging as a zero task vector.
    pub include_base_in_merge: bool,
    pub grpo: Option<GrpoStage>,
}

impl Default for SsrConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            suite: SuiteConfig::default(),
            hidden: 24,
            batch_size: 32,
            weight_decay: 0.0,
            general_steps: 240,
            general_lr: 5e-3,
            scaffold: StageSpec {
                domain: DomainId::Spatial,
                dataset_size: 96,
                steps: 200,
                lr: 2e-3,
            },
            specialize: vec![
                StageSpec {
                    domain: DomainId::Ad,
                    dataset_size: 16,
                    steps: 24,
                    lr: 5e-4,
                },
                StageSpec {
                    domain: DomainId::Uav,
                    dataset_size: 16,
                    steps: 24,
                    lr: 5e-4,
                },
            ],
            embodied: StageSpec {
                domain: DomainId::Embodied,
                dataset_size: 64,
                steps: 140,
                lr: 5e-3,
            },
            merge_method: MergeMethod::Wudi,
            // Production-recipe iterations; learning rate carries the same
            // x1000 toy-norm scaling as the supervised stages (1e-5 -> 1e-2).
            merge_config: MergeConfig {
                learning_rate: 1e-2,
                ..MergeConfig::default()
            },
            include_base_in_merge: true,
            grpo: None,
        }
    }
}

impl SsrConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            obs_dim: self.suite.latent_dim,
            hidden: self.hidden,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    /// Total supervised steps after base activation; the budget that the
    /// sequential and joint paradigms must match.
    pub fn post_base_budget(&self) -> usize {
        self.scaffold.steps
            + self.specialize.iter().map(|s| s.steps).sum::<usize>()
            + self.embodied.steps
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub paradigm: String,
    pub stage: String,
    pub domain: String,
    pub accuracy: f64,
    pub loss: f64,
    pub steps_so_far: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineOutput {
    pub checkpoints: BTreeMap<String, ParameterMap>,
    pub metrics: Vec<MetricRow>,
    pub merge_report: Option<MergeReport>,
    pub total_steps: usize,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn tag_checkpoint(model: &ToyModel, stage: &str, seed: u64, parent: Option<&ParameterMap>) -> ParameterMap {
    let mut params = model.params.clone();
    params.clear_metadata();
    params.set_meta("stage", stage);
    params.set_meta("seed", seed.to_string());
    if let Some(parent) = parent {
        params.set_meta("parent", format!("{:016x}", fnv64(&encode(parent))));
    }
    params
}

struct Harness<'a> {
    suite: &'a BTreeMap<DomainId, DomainData>,
    cfg: &'a SsrConfig,
    paradigm: &'a str,
    metrics: Vec<MetricRow>,
    steps: usize,
}

impl<'a> Harness<'a> {
    fn eval_all(&mut self, model: &ToyModel, stage: &str) {
        for (id, data) in self.suite {
            self.metrics.push(MetricRow {
                paradigm: self.paradigm.to_string(),
                stage: stage.to_string(),
                domain: id.to_string(),
                accuracy: evaluate(model, &data.eval),
                loss: eval_loss(model, &data.eval),
                steps_so_far: self.steps,
            });
        }
    }

    fn run_stage(
        &mut self,
        model: &ToyModel,
        stage_name: &str,
        set: &TrainSet,
        steps: usize,
        lr: f64,
        seed: u64,
    ) -> Result<ToyModel, TrainError> {
        let opts = SftOptions {
            steps,
            lr,
            batch_size: self.cfg.batch_size,
            weight_decay: self.cfg.weight_decay,
            seed,
        };
        let (tuned, _) =
            sft_train(model, set, &opts).map_err(|e| stage_err(stage_name, e))?;
        self.steps += steps;
        self.eval_all(&tuned, stage_name);
        Ok(tuned)
    }
}

fn general_mix(suite: &BTreeMap<DomainId, DomainData>) -> TrainSet {
    let sets: Vec<&Dataset> = suite.values().map(|d| &d.general).collect();
    TrainSet::from_datasets(&sets)
}

fn stage_set(suite: &BTreeMap<DomainId, DomainData>, spec: &StageSpec) -> TrainSet {
    let data = &suite[&spec.domain];
    TrainSet::from_dataset(&data.train.take(spec.dataset_size))
}

/// Base activation shared by every paradigm: seeded init plus a short
/// mixed-domain warmup.
fn make_base(
    suite: &BTreeMap<DomainId, DomainData>,
    cfg: &SsrConfig,
    harness: &mut Harness,
) -> Result<ToyModel, TrainError> {
    let init = ToyModel::init(cfg.model_config());
    harness.run_stage(
        &init,
        "base",
        &general_mix(suite),
        cfg.general_steps,
        cfg.general_lr,
        cfg.seed.wrapping_add(1000),
    )
}

/// Scaffold -> specialize -> reconcile -> embodied SFT (-> optional RFT).
pub fn ssr_pipeline(cfg: &SsrConfig) -> Result<PipelineOutput, TrainError> {
    let suite = make_synthetic_domains(cfg.seed, &cfg.suite);
    let mut harness = Harness {
        suite: &suite,
        cfg,
        paradigm: "ssr",
        metrics: Vec::new(),
        steps: 0,
    };
    let mut checkpoints = BTreeMap::new();

    let base = make_base(&suite, cfg, &mut harness)?;
    checkpoints.insert("base".to_string(), tag_checkpoint(&base, "base", cfg.seed, None));

    let scaffold_set = stage_set(&suite, &cfg.scaffold);
    let spatial = harness.run_stage(
        &base,
        "spatial",
        &scaffold_set,
        cfg.scaffold.steps,
        cfg.scaffold.lr,
        cfg.seed.wrapping_add(2000),
    )?;
    checkpoints.insert(
        "spatial".to_string(),
        tag_checkpoint(&spatial, "spatial", cfg.seed, Some(&checkpoints["base"])),
    );

    let mut experts: Vec<(String, ToyModel)> = vec![("spatial".to_string(), spatial.clone())];
    for (k, spec) in cfg.specialize.iter().enumerate() {
        let name = spec.domain.to_string();
        let set = stage_set(&suite, spec);
        let expert = harness.run_stage(
            &spatial,
            &name,
            &set,
            spec.steps,
            spec.lr,
            cfg.seed.wrapping_add(3000 + k as u64),
        )?;
        checkpoints.insert(
            name.clone(),
            tag_checkpoint(&expert, &name, cfg.seed, Some(&checkpoints["spatial"])),
        );
        experts.push((name, expert));
    }

    // Reconcile: data-free merge of the experts' task vectors over base.
    let base_params = &base.params;
    let mut tvs = Vec::new();
    if cfg.include_base_in_merge {
        tvs.push(
            compute_task_vector(base_params, base_params, "base")
                .map_err(|e| stage_err("merge", e.into()))?,
        );
    }
    for (name, expert) in &experts {
        tvs.push(
            compute_task_vector(&expert.params, base_params, name.clone())
                .map_err(|e| stage_err("merge", e.into()))?,
        );
    }
    let merge_cfg = MergeConfig {
        method: cfg.merge_method,
        seed: cfg.seed,
        ..cfg.merge_config.clone()
    };
    let (merged_params, merge_report) =
        merge(base_params, &tvs, &merge_cfg).map_err(|e| stage_err("merge", e.into()))?;
    let merged = base.with_params(merged_params);
    harness.eval_all(&merged, "merge");
    checkpoints.insert(
        "merge".to_string(),
        tag_checkpoint(&merged, "merge", cfg.seed, Some(&checkpoints["base"])),
    );

    let embodied_set = stage_set(&suite, &cfg.embodied);
    let mut final_model = harness.run_stage(
        &merged,
        "embodied",
        &embodied_set,
        cfg.embodied.steps,
        cfg.embodied.lr,
        cfg.seed.wrapping_add(4000),
    )?;
    checkpoints.insert(
        "embodied".to_string(),
        tag_checkpoint(&final_model, "embodied", cfg.seed, Some(&checkpoints["merge"])),
    );

    if let Some(grpo) = &cfg.grpo {
        let datasets: Vec<Dataset> = suite
            .values()
            .map(|d| d.train.take(grpo.prompts_per_domain))
            .collect();
        let refs: Vec<&Dataset> = datasets.iter().collect();
        let env = DomainEnv::new(&refs);
        let grpo_cfg = GrpoConfig {
            group_size: grpo.group_size,
            clip_epsilon: grpo.clip_epsilon,
            lr: grpo.lr,
            steps: grpo.steps,
            seed: cfg.seed.wrapping_add(5000),
            prompts_per_step: 4,
        };
        let (tuned, _) =
            grpo_train(&final_model, &env, &grpo_cfg).map_err(|e| stage_err("grpo", e.into()))?;
        final_model = tuned;
        harness.eval_all(&final_model, "grpo");
        checkpoints.insert(
            "grpo".to_string(),
            tag_checkpoint(&final_model, "grpo", cfg.seed, Some(&checkpoints["embodied"])),
        );
    }

    Ok(PipelineOutput {
        checkpoints,
        metrics: harness.metrics,
        merge_report,
        total_steps: harness.steps,
    })
}

/// Stage-wise adaptation without merging: spatial -> ad -> uav ->
/// embodied on one model, same budgets as the staged pipeline.
pub fn sequential_baseline(cfg: &SsrConfig) -> Result<PipelineOutput, TrainError> {
    let suite = make_synthetic_domains(cfg.seed, &cfg.suite);
    let mut harness = Harness {
        suite: &suite,
        cfg,
        paradigm: "sequential",
        metrics: Vec::new(),
        steps: 0,
    };
    let mut checkpoints = BTreeMap::new();
    let base = make_base(&suite, cfg, &mut harness)?;
    checkpoints.insert("base".to_string(), tag_checkpoint(&base, "base", cfg.seed, None));

    let mut model = base;
    let mut stages: Vec<&StageSpec> = vec![&cfg.scaffold];
    stages.extend(cfg.specialize.iter());
    stages.push(&cfg.embodied);
    for (k, spec) in stages.iter().enumerate() {
        let name = spec.domain.to_string();
        let set = stage_set(&suite, spec);
        model = harness.run_stage(
            &model,
            &name,
            &set,
            spec.steps,
            spec.lr,
            cfg.seed.wrapping_add(2000 + 1000 * k as u64),
        )?;
        checkpoints.insert(name.clone(), tag_checkpoint(&model, &name, cfg.seed, None));
    }

    Ok(PipelineOutput {
        checkpoints,
        metrics: harness.metrics,
        merge_report: None,
        total_steps: harness.steps,
    })
}

/// One run on mixed data from every stage's subset, using the same total
/// step budget as the staged pipeline.
pub fn joint_baseline(cfg: &SsrConfig) -> Result<PipelineOutput, TrainError> {
    let suite = make_synthetic_domains(cfg.seed, &cfg.suite);
    let mut harness = Harness {
        suite: &suite,
        cfg,
        paradigm: "joint",
        metrics: Vec::new(),
        steps: 0,
    };
    let mut checkpoints = BTreeMap::new();
    let base = make_base(&suite, cfg, &mut harness)?;
    checkpoints.insert("base".to_string(), tag_checkpoint(&base, "base", cfg.seed, None));

    let mut rows = Vec::new();
    rows.extend(stage_set(&suite, &cfg.scaffold).rows);
    for spec in &cfg.specialize {
        rows.extend(stage_set(&suite, spec).rows);
    }
    rows.extend(stage_set(&suite, &cfg.embodied).rows);
    let mixed = TrainSet { rows };

    let lr = cfg.scaffold.lr;
    let model = harness.run_stage(
        &base,
        "joint",
        &mixed,
        cfg.post_base_budget(),
        lr,
        cfg.seed.wrapping_add(7000),
    )?;
    checkpoints.insert("joint".to_string(), tag_checkpoint(&model, "joint", cfg.seed, None));

    Ok(PipelineOutput {
        checkpoints,
        metrics: harness.metrics,
        merge_report: None,
        total_steps: harness.steps,
    })
}

/// Train one route (init -> domain stage) and return the tuned model;
/// shared by the transfer ablations.
pub fn train_route(
    init: &ToyModel,
    suite: &BTreeMap<DomainId, DomainData>,
    spec: &StageSpec,
    batch_size: usize,
    seed: u64,
) -> Result<ToyModel, TrainError> {
    let set = stage_set(suite, spec);
    let opts = SftOptions {
        steps: spec.steps,
        lr: spec.lr,
        batch_size,
        weight_decay: 0.0,
        seed,
    };
    Ok(sft_train(init, &set, &opts)?.0)
}

/// Write a pipeline's checkpoints and metrics under a directory:
/// `<stage>.abck` files plus `metrics.jsonl`.
pub fn write_pipeline_output(out: &PipelineOutput, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| CkptError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (stage, params) in &out.checkpoints {
        write_checkpoint(params, dir.join(format!("{stage}.abck")))?;
    }
    let mut lines = String::new();
    for row in &out.metrics {
        lines.push_str(&serde_json::to_string(row).expect("metric row serializes"));
        lines.push('\n');
    }
    std::fs::write(dir.join("metrics.jsonl"), lines).map_err(|source| CkptError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    if let Some(report) = &out.merge_report {
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        std::fs::write(dir.join("merge_report.json"), json).map_err(|source| CkptError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    Ok(())
}
