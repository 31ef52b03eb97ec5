// Scratch harness for exploring pipeline defaults; not part of the
// shipped surface.
use abm_core::domains::*;
use abm_core::merge::MergeMethod;
use abm_core::model::ToyModel;
use abm_core::train::*;

fn base_model(cfg: &SsrConfig, suite: &std::collections::BTreeMap<DomainId, DomainData>) -> ToyModel {
    let init = ToyModel::init(cfg.model_config());
    let sets: Vec<&Dataset> = suite.values().map(|d| &d.general).collect();
    let mix = TrainSet::from_datasets(&sets);
    let opts = SftOptions {
        steps: cfg.general_steps, lr: cfg.general_lr,
        batch_size: cfg.batch_size, weight_decay: 0.0,
        seed: cfg.seed.wrapping_add(1000),
    };
    sft_train(&init, &mix, &opts).unwrap().0
}

// args: a_ad a_uav a_emb gad gemb gsteps scsteps spsteps splr esteps elr hidden [eval]
fn config_from_args(args: &[f64]) -> SsrConfig {
    let mut cfg = SsrConfig::default();
    cfg.suite.channel_angles = [0.0, args[0] as f32, args[1] as f32, args[2] as f32];
    cfg.suite.general_counts = [128, args[3] as usize, args[3] as usize, args[4] as usize];
    cfg.suite.eval_count = if args.len() > 12 { args[12] as usize } else { 512 };
    cfg.general_steps = args[5] as usize;
    if args.len() > 15 {
        cfg.general_lr = args[15];
    }
    cfg.scaffold = StageSpec { domain: DomainId::Spatial, dataset_size: 96, steps: args[6] as usize, lr: 2e-3 };
    let uav_steps = if args.len() > 14 { args[14] as usize } else { args[7] as usize };
    let spds = if args.len() > 16 { args[16] as usize } else { 32 };
    cfg.specialize = vec![
        StageSpec { domain: DomainId::Ad, dataset_size: spds, steps: args[7] as usize, lr: args[8] },
        StageSpec { domain: DomainId::Uav, dataset_size: spds, steps: uav_steps, lr: args[8] },
    ];
    let eds = if args.len() > 13 { args[13] as usize } else { 16 };
    cfg.embodied = StageSpec { domain: DomainId::Embodied, dataset_size: eds, steps: args[9] as usize, lr: args[10] };
    cfg.hidden = args[11] as usize;
    cfg
}

fn main() {
    if std::env::args().nth(1).as_deref() == Some("diag_merge") {
        diag_merge();
        return;
    }
    if std::env::args().nth(1).as_deref() == Some("score6") {
        let frac: Option<f64> = std::env::args().nth(2).and_then(|v| v.parse().ok());
        for method in [MergeMethod::Wudi, MergeMethod::Tsvm, MergeMethod::Avg] {
            let mut cfg = SsrConfig { merge_method: method, ..SsrConfig::default() };
            if let Some(f) = frac {
                cfg.merge_config.tsvm_rank_fraction = if f > 0.0 { Some(f) } else { None };
            }
            let out = ssr_pipeline(&cfg).unwrap();
            let rows: Vec<(String, f64)> = out.metrics.iter()
                .filter(|m| m.stage == "merge")
                .map(|m| (m.domain.clone(), m.accuracy)).collect();
            let avg3: f64 = rows.iter().filter(|(d, _)| d != "embodied").map(|(_, a)| a).sum::<f64>() / 3.0;
            println!("{method:?}: avg3 {avg3:.4} rows {rows:?}");
        }
        return;
    }
    if std::env::args().nth(1).as_deref() == Some("score4") {
        let argv: Vec<f64> = std::env::args().skip(2).filter_map(|a| a.parse().ok()).collect();
        score4(&argv);
        return;
    }
    let argv: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = if argv.len() >= 12 { config_from_args(&argv) } else { SsrConfig::default() };
    let suite = make_synthetic_domains(cfg.seed, &cfg.suite);
    let base = base_model(&cfg, &suite);
    let acc = |m: &ToyModel, d: DomainId| evaluate(m, &suite[&d].eval);

    let spatial = train_route(&base, &suite, &cfg.scaffold, cfg.batch_size, 2000).unwrap();
    let mut experts = std::collections::BTreeMap::new();
    experts.insert(DomainId::Spatial, acc(&spatial, DomainId::Spatial));
    let mut routes = std::collections::BTreeMap::new();
    for (idx, spec) in cfg.specialize.iter().chain(std::iter::once(&cfg.embodied)).enumerate() {
        let from_base = train_route(&base, &suite, spec, cfg.batch_size, 3000 + idx as u64).unwrap();
        let from_spatial = train_route(&spatial, &suite, spec, cfg.batch_size, 3000 + idx as u64).unwrap();
        let d = spec.domain;
        routes.insert(d, (acc(&base, d), acc(&from_base, d), acc(&from_spatial, d)));
        experts.insert(d, acc(&from_spatial, d));
    }
    let (_, ad_fb, ad_fs) = routes[&DomainId::Ad];
    let (e_b, e_fb, e_fs) = routes[&DomainId::Embodied];

    let ssr = ssr_pipeline(&cfg).unwrap();
    let mut ssr_final = std::collections::BTreeMap::new();
    for m in ssr.metrics.iter().filter(|m| m.stage == "embodied") {
        ssr_final.insert(m.domain.clone(), m.accuracy);
    }
    let mut merge_row = std::collections::BTreeMap::new();
    for m in ssr.metrics.iter().filter(|m| m.stage == "merge") {
        merge_row.insert(m.domain.clone(), m.accuracy);
    }
    let seq = sequential_baseline(&cfg).unwrap();
    let seq_spatial = seq.metrics.iter().rev().find(|m| m.domain == "spatial").unwrap().accuracy;
    let joint = joint_baseline(&cfg).unwrap();
    let jacc = |d: DomainId| joint.metrics.iter().rev().find(|m| m.domain == d.as_str()).unwrap().accuracy;

    // margins, all in accuracy points (positive = pass with room)
    let m = vec![
        ("C4a", ad_fs - ad_fb - 0.03),
        ("C4b", e_b - e_fb),
        ("C4c", e_fs - e_b),
        ("C5a", (experts[&DomainId::Spatial] - 0.10) - seq_spatial),
        ("C5b_sp", merge_row["spatial"] - (experts[&DomainId::Spatial] - 0.03)),
        ("C5b_ad", merge_row["ad"] - (experts[&DomainId::Ad] - 0.03)),
        ("C5b_uav", merge_row["uav"] - (experts[&DomainId::Uav] - 0.03)),
        ("C5c_sp", experts[&DomainId::Spatial] - jacc(DomainId::Spatial)),
        ("C5c_ad", experts[&DomainId::Ad] - jacc(DomainId::Ad)),
        ("C5c_uav", experts[&DomainId::Uav] - jacc(DomainId::Uav)),
        ("C5c_em", experts[&DomainId::Embodied] - jacc(DomainId::Embodied)),
    ];
    let passes = m.iter().filter(|(_, v)| *v >= 0.0).count();
    let worst = m.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let detail: Vec<String> = m.iter().map(|(k, v)| format!("{k}={:+.3}", v)).collect();
    println!(
        "PASS {passes}/11 worst {worst:+.4} | {} | mrg_sp {:+.3} emb_cost {:+.3} | args {:?}",
        detail.join(" "),
        merge_row["spatial"] - experts[&DomainId::Spatial],
        ssr_final["spatial"] - merge_row["spatial"],
        argv
    );
}

fn diag_merge() {
    use abm_core::merge::*;
    let mut cfg = SsrConfig::default();
    cfg.suite.channel_angles = [0.0, 0.2, 0.25, 0.2];
    cfg.suite.general_counts = [128, 20, 20, 224];
    cfg.general_steps = 300;
    cfg.scaffold = StageSpec { domain: DomainId::Spatial, dataset_size: 96, steps: 200, lr: 2e-3 };
    cfg.specialize = vec![
        StageSpec { domain: DomainId::Ad, dataset_size: 16, steps: 20, lr: 2e-3 },
        StageSpec { domain: DomainId::Uav, dataset_size: 16, steps: 24, lr: 2e-3 },
    ];
    let suite = make_synthetic_domains(cfg.seed, &cfg.suite);
    let base = base_model(&cfg, &suite);
    let spatial = train_route(&base, &suite, &cfg.scaffold, cfg.batch_size, 2000).unwrap();
    let ad = train_route(&spatial, &suite, &cfg.specialize[0], cfg.batch_size, 3000).unwrap();
    let uav = train_route(&spatial, &suite, &cfg.specialize[1], cfg.batch_size, 3001).unwrap();
    let acc_sp = |m: &ToyModel| evaluate(m, &suite[&DomainId::Spatial].eval);
    let acc_ad = |m: &ToyModel| evaluate(m, &suite[&DomainId::Ad].eval);
    println!("theta_S: spatial {:.4}  | S->A on ad {:.4} | S->A on spatial {:.4}", acc_sp(&spatial), acc_ad(&ad), acc_sp(&ad));
    let mcfg = cfg.merge_config.clone();
    let tv = |m: &ToyModel, id: &str| compute_task_vector(&m.params, &base.params, id).unwrap();
    let tvs = vec![tv(&spatial, "s"), tv(&ad, "a"), tv(&uav, "u")];
    let (merged, _) = merge_wudi(&base.params, &tvs, &mcfg).unwrap();
    let m = base.with_params(merged.clone());
    println!("K3 merged: spatial {:.4} ad {:.4}", acc_sp(&m), acc_ad(&m));
    // swap layer groups back to theta_S to локате the damage
    for (tag, prefixes) in [
        ("emb.* from S", vec!["emb."]),
        ("trunk+obs from S", vec!["trunk.", "obs."]),
        ("head.spatial from S", vec!["head.spatial"]),
        ("emb+trunk+obs from S", vec!["emb.", "trunk.", "obs."]),
    ] {
        let mut params = merged.clone();
        for (name, t) in spatial.params.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                params.insert(name, t.clone());
            }
        }
        let m2 = base.with_params(params);
        println!("{tag}: spatial {:.4} ad {:.4}", acc_sp(&m2), acc_ad(&m2));
    }
}

// args: a_ad a_emb gad gemb gsteps spsteps esteps elr eds [a_uav spds splr]
fn score4(args: &[f64]) {
    let mut cfg = SsrConfig::default();
    let a_uav = if args.len() > 9 { args[9] as f32 } else { 0.25 };
    let spds = if args.len() > 10 { args[10] as usize } else { 16 };
    let splr = if args.len() > 11 { args[11] } else { 2e-3 };
    let gsp = if args.len() > 12 { args[12] as usize } else { 128 };
    cfg.suite.channel_angles = [0.0, args[0] as f32, a_uav, args[1] as f32];
    cfg.suite.general_counts = [gsp, args[2] as usize, 16, args[3] as usize];
    cfg.suite.eval_count = if args.len() > 13 { args[13] as usize } else { 1024 };
    cfg.suite.fine_planning_labels = true;
    if args.len() > 14 {
        cfg.hidden = args[14] as usize;
    }
    cfg.general_steps = args[4] as usize;
    cfg.scaffold = StageSpec { domain: DomainId::Spatial, dataset_size: 96, steps: 200, lr: 2e-3 };
    cfg.specialize = vec![StageSpec { domain: DomainId::Ad, dataset_size: spds, steps: args[5] as usize, lr: splr }];
    cfg.embodied = StageSpec { domain: DomainId::Embodied, dataset_size: args[8] as usize, steps: args[6] as usize, lr: args[7] };
    let suite = make_synthetic_domains(cfg.seed, &cfg.suite);
    let base = base_model(&cfg, &suite);
    let acc = |m: &ToyModel, d: DomainId| evaluate(m, &suite[&d].eval);
    let spatial = train_route(&base, &suite, &cfg.scaffold, cfg.batch_size, 2000).unwrap();
    let sp_ad = train_route(&spatial, &suite, &cfg.specialize[0], cfg.batch_size, 3000).unwrap();
    let b_ad = train_route(&base, &suite, &cfg.specialize[0], cfg.batch_size, 3000).unwrap();
    let sp_e = train_route(&spatial, &suite, &cfg.embodied, cfg.batch_size, 3001).unwrap();
    let b_e = train_route(&base, &suite, &cfg.embodied, cfg.batch_size, 3001).unwrap();
    let c4a = acc(&sp_ad, DomainId::Ad) - acc(&b_ad, DomainId::Ad) - 0.03;
    let c4b = acc(&base, DomainId::Embodied) - acc(&b_e, DomainId::Embodied);
    let c4c = acc(&sp_e, DomainId::Embodied) - acc(&base, DomainId::Embodied);
    let passes = [c4a, c4b, c4c].iter().filter(|v| **v >= 0.0).count();
    println!("P4 {passes}/3 C4a={c4a:+.3} C4b={c4b:+.3} C4c={c4c:+.3} | args {args:?}");
}
