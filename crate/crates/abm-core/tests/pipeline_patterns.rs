//! Directional ablation patterns on the seed-0 synthetic suites:
//! scaffold-transfer routes, the three training paradigms under matched
//! budgets, and the merge-method ordering. Margins measured on the first
//! verified run are frozen below as regression fixtures.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use abm_core::domains::{make_synthetic_domains, DomainId, SuiteConfig};
use abm_core::interference::opposing_task_pair;
use abm_core::merge::MergeMethod;
use abm_core::model::{ModelConfig, ToyModel};
use abm_core::train::{
    evaluate, sequential_baseline, sft_train, ssr_pipeline, train_route, PipelineOutput,
    SftOptions, SsrConfig, StageSpec, TrainSet,
};

fn verdict(name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

/// Frozen seed-0 fixture: recorded on the first verified run, asserted
/// within half an accuracy point thereafter.
fn frozen(name: &str, measured: f64, recorded: f64) {
    assert!(
        (measured - recorded).abs() <= 0.005,
        "regression fixture {name}: measured {measured:.4}, recorded {recorded:.4}"
    );
}

// -------------------------------------------------------------------
// Criterion 4: scaffold-transfer routes
// -------------------------------------------------------------------

/// Route-experiment world: the base model's warmup contains no driving
/// data at all (a generalist that never saw the specialist domains),
/// planning labels use fine quartile bins so decoding quality shows,
/// and the narrow trunk forces real capacity trade-offs.
fn route_suite() -> SuiteConfig {
    SuiteConfig {
        channel_angles: [0.0, 0.18, 0.25, 0.25],
        general_counts: [128, 0, 16, 208],
        fine_planning_labels: true,
        ..SuiteConfig::default()
    }
}

#[test]
fn criterion_04_spatial_scaffold_transfer() {
    let suite_cfg = route_suite();
    let suite = make_synthetic_domains(0, &suite_cfg);
    let model_cfg = ModelConfig {
        hidden: 12,
        seed: 0,
        ..ModelConfig::default()
    };
    let batch = 32;

    // Generalist base: mixed warmup over the general splits.
    let init = ToyModel::init(model_cfg);
    let sets: Vec<_> = suite.values().map(|d| &d.general).collect();
    let mix = TrainSet::from_datasets(&sets);
    let (base, _) = sft_train(
        &init,
        &mix,
        &SftOptions {
            steps: 300,
            lr: 5e-3,
            batch_size: batch,
            weight_decay: 0.0,
            seed: 1000,
        },
    )
    .unwrap();

    let scaffold_spec = StageSpec {
        domain: DomainId::Spatial,
        dataset_size: 96,
        steps: 200,
        lr: 2e-3,
    };
    let ad_spec = StageSpec {
        domain: DomainId::Ad,
        dataset_size: 48,
        steps: 40,
        lr: 2e-3,
    };
    let embodied_spec = StageSpec {
        domain: DomainId::Embodied,
        dataset_size: 20,
        steps: 56,
        lr: 2e-3,
    };

    let spatial = train_route(&base, &suite, &scaffold_spec, batch, 2000).unwrap();
    let base_to_ad = train_route(&base, &suite, &ad_spec, batch, 3000).unwrap();
    let spatial_to_ad = train_route(&spatial, &suite, &ad_spec, batch, 3000).unwrap();
    let base_to_emb = train_route(&base, &suite, &embodied_spec, batch, 3001).unwrap();
    let spatial_to_emb = train_route(&spatial, &suite, &embodied_spec, batch, 3001).unwrap();

    let acc = |m: &ToyModel, d: DomainId| evaluate(m, &suite[&d].eval);
    let ad_from_base = acc(&base_to_ad, DomainId::Ad);
    let ad_from_spatial = acc(&spatial_to_ad, DomainId::Ad);
    let emb_base = acc(&base, DomainId::Embodied);
    let emb_from_base = acc(&base_to_emb, DomainId::Embodied);
    let emb_from_spatial = acc(&spatial_to_emb, DomainId::Embodied);

    let ad_margin = ad_from_spatial - ad_from_base;
    let emb_base_delta = emb_from_base - emb_base;
    let emb_spatial_delta = emb_from_spatial - emb_base;
    verdict(
        "criterion 4 (scaffold transfer routes)",
        ad_margin >= 0.03 && emb_base_delta <= 0.0 && emb_spatial_delta > 0.0,
        format!(
            "spatial->ad {ad_from_spatial:.4} vs base->ad {ad_from_base:.4} (+{:.1} pts); \
             base->embodied {emb_from_base:.4} vs base {emb_base:.4} ({:+.1} pts); \
             spatial->embodied {emb_from_spatial:.4} ({:+.1} pts)",
            ad_margin * 100.0,
            emb_base_delta * 100.0,
            emb_spatial_delta * 100.0
        ),
    );

    // Seed-0 regression fixtures from the first verified run.
    frozen("route ad margin", ad_margin, 0.0856);
    frozen("route embodied base delta", emb_base_delta, -0.0027);
    frozen("route embodied spatial delta", emb_spatial_delta, 0.0195);
}

// -------------------------------------------------------------------
// Criteria 5 and 6: paradigms and merge methods on the default config
// -------------------------------------------------------------------

fn wudi_run() -> &'static PipelineOutput {
    static RUN: OnceLock<PipelineOutput> = OnceLock::new();
    RUN.get_or_init(|| ssr_pipeline(&SsrConfig::default()).unwrap())
}

fn stage_acc(out: &PipelineOutput, stage: &str, domain: &str) -> f64 {
    out.metrics
        .iter()
        .find(|m| m.stage == stage && m.domain == domain)
        .map(|m| m.accuracy)
        .unwrap_or_else(|| panic!("no metric for {stage}/{domain}"))
}

/// Per-domain expert accuracies: spatial expert plus the two specialists
/// (each evaluated right after its own stage).
fn expert_accuracies(out: &PipelineOutput) -> BTreeMap<&'static str, f64> {
    let mut experts = BTreeMap::new();
    experts.insert("spatial", stage_acc(out, "spatial", "spatial"));
    experts.insert("ad", stage_acc(out, "ad", "ad"));
    experts.insert("uav", stage_acc(out, "uav", "uav"));
    experts
}

#[test]
fn criterion_05_training_paradigms() {
    let cfg = SsrConfig::default();
    let ssr = wudi_run();
    let experts = expert_accuracies(ssr);

    // (a) Sequential forgetting: the chained run ends far below the
    // spatial expert on spatial.
    let seq = sequential_baseline(&cfg).unwrap();
    let seq_final_spatial = seq
        .metrics
        .iter()
        .rev()
        .find(|m| m.domain == "spatial")
        .unwrap()
        .accuracy;
    let seq_loss = experts["spatial"] - seq_final_spatial;

    // (b) Reconcile retention: the merged model stays within 3 points of
    // every earlier expert.
    let merge_gaps: BTreeMap<&str, f64> = ["spatial", "ad", "uav"]
        .into_iter()
        .map(|d| (d, stage_acc(ssr, "merge", d) - experts[d]))
        .collect();
    let retention_ok = merge_gaps.values().all(|&gap| gap >= -0.03);

    // (c) Joint training on conflicting synthetic heads: two tasks with
    // opposite labels through one head. Specialists separate them; the
    // mixed run is capped by the conflict on every task.
    let (task_a, task_b) = opposing_task_pair(0, 96, 0.05);
    let policy_cfg = ModelConfig {
        hidden: 12,
        seed: 0,
        ..ModelConfig::default()
    };
    let init = ToyModel::init(policy_cfg);
    let opts = |steps: usize| SftOptions {
        steps,
        lr: 2e-3,
        batch_size: 32,
        weight_decay: 0.0,
        seed: 7,
    };
    let (expert_a, _) = sft_train(&init, &TrainSet::from_dataset(&task_a), &opts(150)).unwrap();
    let (expert_b, _) = sft_train(&init, &TrainSet::from_dataset(&task_b), &opts(150)).unwrap();
    let mixed = TrainSet::from_datasets(&[&task_a, &task_b]);
    let (joint, _) = sft_train(&init, &mixed, &opts(300)).unwrap();
    let ja = evaluate(&joint, &task_a);
    let jb = evaluate(&joint, &task_b);
    let ea = evaluate(&expert_a, &task_a);
    let eb = evaluate(&expert_b, &task_b);
    let joint_trails = ja < ea && jb < eb;

    verdict(
        "criterion 5 (training paradigms, matched budgets)",
        seq_loss >= 0.10 && retention_ok && joint_trails,
        format!(
            "sequential loses {:.1} pts on spatial; merge gaps spatial {:+.1} ad {:+.1} uav {:+.1} pts; \
             conflicting-heads joint {ja:.3}/{jb:.3} vs experts {ea:.3}/{eb:.3}",
            seq_loss * 100.0,
            merge_gaps["spatial"] * 100.0,
            merge_gaps["ad"] * 100.0,
            merge_gaps["uav"] * 100.0
        ),
    );

    frozen("sequential spatial loss", seq_loss, 0.2212);
    frozen("merge gap spatial", merge_gaps["spatial"], -0.0245);
    frozen("merge gap ad", merge_gaps["ad"], 0.0757);
    frozen("merge gap uav", merge_gaps["uav"], 0.0830);
}

#[test]
fn criterion_06_merge_method_ordering() {
    let avg3 = |out: &PipelineOutput| {
        ["spatial", "ad", "uav"]
            .iter()
            .map(|d| stage_acc(out, "merge", d))
            .sum::<f64>()
            / 3.0
    };
    let wudi = avg3(wudi_run());
    let tsvm = avg3(
        &ssr_pipeline(&SsrConfig {
            merge_method: MergeMethod::Tsvm,
            ..SsrConfig::default()
        })
        .unwrap(),
    );
    let plain = avg3(
        &ssr_pipeline(&SsrConfig {
            merge_method: MergeMethod::Avg,
            ..SsrConfig::default()
        })
        .unwrap(),
    );
    // Each comparison holds by >= 0.5 points or counts as a recorded tie.
    let tie = 0.005;
    let ordering_ok = wudi >= tsvm - tie && tsvm >= plain - tie;
    let wudi_vs_tsvm = if wudi - tsvm >= 0.005 { "wins" } else { "tie" };
    let tsvm_vs_avg = if tsvm - plain >= 0.005 { "wins" } else { "tie" };
    verdict(
        "criterion 6 (merge-method ordering)",
        ordering_ok,
        format!(
            "per-domain averages: wudi {wudi:.4} ({wudi_vs_tsvm} vs tsvm), tsvm {tsvm:.4} ({tsvm_vs_avg} vs avg), avg {plain:.4}"
        ),
    );

    frozen("merge avg3 wudi", wudi, 0.7971);
    frozen("merge avg3 tsvm", tsvm, 0.7526);
    frozen("merge avg3 avg", plain, 0.7522);
}
