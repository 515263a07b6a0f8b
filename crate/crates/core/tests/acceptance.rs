//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing output capture) and then asserts.
//!
//! The learning criteria train full-size models and take most of the
//! runtime; trained models are shared between criteria through `OnceLock`.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod common;

use std::io::Write;
use std::sync::OnceLock;

use tenet_core::controller::{mlp_controller, ControllerFile, Precision};
use tenet_core::dataset::save_dataset;
use tenet_core::envs::{
    env_steps_on_this_thread, pointgoal_registry, rollout, switchworld_registry, veltrack_registry,
};
use tenet_core::eval::{FileFactory, TenetFactory};
use tenet_core::experiments::{
    compare_arms, paraphrase_from_models, task_scaling, velocity_experiment, Arm, Comparison, Recipe, Trained,
    TrainedRun,
};
use tenet_core::latency::MIN_ITERATIONS;
use tenet_core::model::{
    infonce_text_traj, mse_align_loss, policy_manifest, text_text_loss, GroundingBatch, LossTerm,
};
use tenet_core::{
    bench_controller, evaluate, generate_dataset, instantiate, split_tasks, train, Checkpoint, EvalSplit,
    HashEmbedder, Level, ModelConfig, ProviderSpec, RunMeta, TenetModel, TrainConfig, Variant,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const ROLLOUTS: usize = 50;
/// Shortened from the 20k-step default so the suite fits on one desktop core.
const SWITCHWORLD_STEPS: u64 = 2500;
const VELOCITY_STEPS: u64 = 2500;
const POINTGOAL_STEPS: u64 = 3000;

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("{} criterion {id:>2} ({name}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{line}");
}

fn recipe(steps: u64) -> Recipe {
    Recipe {
        model: ModelConfig::default(),
        train: TrainConfig {
            steps,
            log_every: 500,
            ..TrainConfig::default()
        },
        k: 20,
        m: 10,
        registry_seed: 0,
        data_seed: 1,
        split_seed: 0,
        seeds: SEEDS.to_vec(),
        rollouts: ROLLOUTS,
        provider: ProviderSpec::Hash { dim: 256 },
        prompt_seed: 99,
        precision: Precision::F64,
    }
}

fn switchworld_runs() -> &'static (Comparison, Vec<TrainedRun>) {
    static RUNS: OnceLock<(Comparison, Vec<TrainedRun>)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let tasks = switchworld_registry(10, 0).unwrap();
        let arms = [Arm::TenetDirect, Arm::TenetContrastive, Arm::TrajHn, Arm::BcShared];
        compare_arms(&arms, &recipe(SWITCHWORLD_STEPS), &tasks, &[], true).unwrap()
    })
}

#[test]
fn c01_gradients_match_finite_differences() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let cases: [(&str, Variant, LossTerm); 5] = [
        ("bc", Variant::Direct, LossTerm::Bc),
        ("mse-align", Variant::Mse, LossTerm::Align),
        ("infonce", Variant::Contrastive, LossTerm::TextTraj),
        ("text-text", Variant::Contrastive, LossTerm::TextText),
        ("combined", Variant::Contrastive, LossTerm::Total),
    ];
    for (name, variant, term) in cases {
        let mut max = 0.0f64;
        for i in 0..20u64 {
            let cfg = common::tiny_config(variant, 1.0);
            let model = TenetModel::init(cfg.clone(), 1000 + i).unwrap();
            let batch = common::random_batch(&cfg, 2 + (i as usize % 4), 3, 4, 7_000 + i);
            max = max.max(common::term_gradient_error(&model, &batch, term));
        }
        worst.push((name, max));
    }
    let ok = worst.iter().all(|(_, e)| *e < 1e-4);
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(1, "gradient check", ok, &format!("max rel error: {}", detail.join(", ")));
}

#[test]
fn c02_loss_identities() {
    let mut failures = Vec::new();
    for b in [2usize, 4, 8] {
        let v = vec![vec![0.3, -0.2, 0.5, 0.1]; b];
        let batch = GroundingBatch::new((0..b as u32).collect(), v.clone(), v.clone()).unwrap();
        let ln_b = (b as f64).ln();
        let nce = infonce_text_traj(&batch, 0.1).unwrap();
        let tt = text_text_loss(&batch, 0.1).unwrap();
        if (nce - ln_b).abs() > 1e-6 || (tt - ln_b).abs() > 1e-6 {
            failures.push(format!("B={b}: infonce {nce}, text-text {tt}"));
        }
    }
    let text = vec![vec![0.2, -0.7, 1.1], vec![-0.4, 0.9, 0.3]];
    let align = mse_align_loss(&text, &text).unwrap();
    if align != 0.0 {
        failures.push(format!("identical-pair alignment {align}"));
    }
    let u = vec![0.6, -0.8, 0.0];
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    let pair = GroundingBatch::new(vec![0, 1], vec![u.clone(), neg.clone()], vec![u, neg]).unwrap();
    let expected = (-20f64).exp().ln_1p();
    for (name, got) in [
        ("infonce", infonce_text_traj(&pair, 0.1).unwrap()),
        ("text-text", text_text_loss(&pair, 0.1).unwrap()),
    ] {
        if ((got - expected) / expected).abs() > 1e-12 {
            failures.push(format!("cosine +-1 {name}: {got:e} vs {expected:e}"));
        }
    }
    verdict(
        2,
        "loss identities",
        failures.is_empty(),
        &if failures.is_empty() {
            "ln B for B in {2,4,8}, zero alignment, ln(1+e^-20) to 1e-12".to_string()
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn c03_offline_training_and_text_only_instantiation() {
    let tasks = switchworld_registry(10, 0).unwrap();
    let ds = generate_dataset(&tasks, 3, 2, &[Level::L0], 5).unwrap();
    let cfg = TrainConfig {
        steps: 25,
        transitions_per_task: 16,
        ..TrainConfig::default()
    };
    let enc = HashEmbedder::default();
    let before = env_steps_on_this_thread();
    let out = train(&ModelConfig::default(), &cfg, &ds, &enc, &RunMeta::default()).unwrap();
    let during_training = env_steps_on_this_thread() - before;
    drop(ds);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    drop(out);
    let before = env_steps_on_this_thread();
    let model = Checkpoint::load(&path).unwrap().to_tenet().unwrap();
    let params = instantiate(&model, "reach the goal at the right wall", &enc).unwrap();
    let during_instantiation = env_steps_on_this_thread() - before;
    let mut ctl = mlp_controller(params, Precision::F64);
    let mut a = [0.0; 2];
    ctl.act(&[0.1, 0.0, 0.0, 0.0], &mut a);

    // the counter must be live for the zero readings to mean anything
    let before = env_steps_on_this_thread();
    rollout(&tasks[0], 0, |_, a| a.fill(0.0)).unwrap();
    let live = env_steps_on_this_thread() > before;

    let ok = during_training == 0 && during_instantiation == 0 && live && a.iter().all(|x| x.is_finite());
    verdict(
        3,
        "offline training, text-only instantiation",
        ok,
        &format!(
            "env steps during training {during_training}, during instantiation {during_instantiation}, probe live {live}"
        ),
    );
}

#[test]
fn c04_expert_gate_on_every_registry() {
    let mut registries = vec![
        ("veltrack".to_string(), veltrack_registry(0)),
        ("switchworld-10".to_string(), switchworld_registry(10, 0).unwrap()),
        ("switchworld-50".to_string(), switchworld_registry(50, 0).unwrap()),
    ];
    for n in [25, 50, 100, 200] {
        registries.push((format!("pointgoal2d-{n}"), pointgoal_registry(n, 0).unwrap()));
    }
    let mut min = 1.0f64;
    let mut failures = Vec::new();
    let mut count = 0;
    for (name, tasks) in &registries {
        match tenet_core::dataset::expert_gate(tasks, 0) {
            Ok(rates) => {
                count += rates.len();
                min = rates.iter().copied().fold(min, f64::min);
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let ok = failures.is_empty() && min >= 0.95;
    verdict(
        4,
        "expert gate",
        ok,
        &if ok {
            format!("{count} tasks over 50 rollouts each, minimum success {min:.3}")
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn c05_switchworld_multitask() {
    let (cmp, _) = switchworld_runs();
    let get = |n: &str| cmp.get(n).unwrap().train_success;
    let direct = get("tenet-direct");
    let contrast = get("tenet-contrastive");
    let traj = get("traj-hn");
    let bc = get("bc-shared");
    let wrong = get("traj-hn-wrong-prompt");
    let tenet = direct.max(contrast);
    let ok = direct >= 0.9 && contrast >= 0.9 && (traj - tenet).abs() <= 0.05 && bc <= 0.5;
    verdict(
        5,
        "switchworld-10 multi-task",
        ok,
        &format!(
            "direct {direct:.3}, contrastive {contrast:.3}, traj-hn {traj:.3} (wrong prompt {wrong:.3}), bc-shared {bc:.3}"
        ),
    );
}

#[test]
fn c06_velocity_alignment() {
    let curve = velocity_experiment(Variant::Contrastive, &recipe(VELOCITY_STEPS)).unwrap();
    let (heldout, ood) = curve.split_at(curve.len() - 1);
    let ood = &ood[0];
    let in_band = heldout.iter().all(|p| p.abs_error <= 0.15);
    let saturates = (2.7..=3.05).contains(&ood.achieved_mean);
    let detail: Vec<String> = curve
        .iter()
        .map(|p| format!("{:.3}->{:.3}", p.target, p.achieved_mean))
        .collect();
    verdict(6, "velocity alignment", in_band && saturates, &detail.join(", "));
}

#[test]
fn c07_grounding_non_inferiority() {
    let tasks = pointgoal_registry(50, 0).unwrap();
    let (train_t, test_t) = split_tasks(&tasks, None, 0).unwrap();
    let arms = [Arm::TenetDirect, Arm::TenetMse, Arm::TenetContrastive];
    let (cmp, _) = compare_arms(&arms, &recipe(POINTGOAL_STEPS), &train_t, &test_t, false).unwrap();
    let test = |n: &str| cmp.get(n).unwrap().test_success.unwrap();
    let (d, m, c) = (test("tenet-direct"), test("tenet-mse"), test("tenet-contrastive"));
    let ok = c >= d - 0.02 && c >= m - 0.02;
    let strict = c > m && m > d;
    verdict(
        7,
        "grounding on pointgoal2d-50",
        ok,
        &format!("held-out direct {d:.3}, mse {m:.3}, contrastive {c:.3}; strict ordering {strict}"),
    );
}

#[test]
fn c08_task_scaling() {
    let sizes = [25, 50, 100, 200];
    let table = task_scaling(&sizes, Variant::Contrastive, &recipe(POINTGOAL_STEPS)).unwrap();
    let s: Vec<f64> = table.summary.iter().map(|r| r.test_success).collect();
    let monotone = s.windows(2).all(|w| w[1] >= w[0] - 0.05);
    let ok = monotone && s[3] >= 0.9;
    let detail: Vec<String> = sizes.iter().zip(&s).map(|(n, v)| format!("{n}: {v:.3}")).collect();
    verdict(8, "task scaling", ok, &format!("held-out success {}", detail.join(", ")));
}

#[test]
fn c09_paraphrase_robustness() {
    let (_, runs) = switchworld_runs();
    let models: Vec<(u64, &TenetModel)> = runs
        .iter()
        .filter(|r| r.arm == Arm::TenetContrastive)
        .map(|r| match &r.model {
            Trained::Tenet(m) => (r.seed, m),
            Trained::Baseline(_) => unreachable!(),
        })
        .collect();
    let tasks = switchworld_registry(10, 0).unwrap();
    let rows =
        paraphrase_from_models(&models, &HashEmbedder::default(), "hash", &tasks, &Level::ALL, ROLLOUTS).unwrap();
    let s: Vec<f64> = rows.iter().map(|r| r.success_rate).collect();
    let ok = s[0] >= s[1] - 0.03 && s[1] >= s[2] - 0.03 && s[0] >= 0.9;
    verdict(
        9,
        "paraphrase robustness",
        ok,
        &format!("L0 {:.3}, L1 {:.3}, L2 {:.3}", s[0], s[1], s[2]),
    );
}

#[test]
fn c10_controller_efficiency() {
    let manifest = policy_manifest(4, &[64, 64], 2).unwrap();
    let arithmetic = (4 * 64 + 64) + (64 * 64 + 64) + (64 * 2 + 2);
    let model = TenetModel::init(ModelConfig::default(), 0).unwrap();
    let params = instantiate(&model, "reach the goal at the right wall", &HashEmbedder::default()).unwrap();
    let generated = params.len();
    let f64_report = bench_controller(mlp_controller(params.clone(), Precision::F64).as_mut(), Precision::F64, 100_000)
        .unwrap();
    let f32_report =
        bench_controller(mlp_controller(params, Precision::F32).as_mut(), Precision::F32, 100_000).unwrap();
    let count_ok = f64_report.param_count == arithmetic
        && manifest.param_count() == arithmetic
        && generated == arithmetic
        && model.trainable_count() > arithmetic;
    let ok = count_ok && f64_report.forward.median_ns < 200_000.0 && f32_report.hz >= 9_000.0;
    verdict(
        10,
        "controller efficiency",
        ok,
        &format!(
            "{} params; f64 median {:.0} ns ({:.0} Hz), f32 median {:.0} ns ({:.0} Hz) on {}",
            f64_report.param_count,
            f64_report.forward.median_ns,
            f64_report.hz,
            f32_report.forward.median_ns,
            f32_report.hz,
            f64_report.machine.cpu
        ),
    );
}

fn small_training_run(seed: u64) -> (Vec<u8>, tenet_core::EvalReport) {
    let tasks = switchworld_registry(10, 0).unwrap();
    let ds = generate_dataset(&tasks, 3, 2, &[Level::L0], 11).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        transitions_per_task: 16,
        ..TrainConfig::default()
    };
    let enc = HashEmbedder::default();
    let meta = RunMeta {
        seed,
        ..RunMeta::default()
    };
    let mut config = ModelConfig::default();
    config.variant = Variant::Contrastive;
    let model = TenetModel::init(config, seed).unwrap();
    let out = tenet_core::train::train_learner(model, &cfg, &ds, &enc, &meta).unwrap();
    let model = out.checkpoint.to_tenet().unwrap();
    let f = TenetFactory::new(&model, &enc, Level::L0);
    let report = evaluate(&f, &[EvalSplit::new("train", tasks)], 3, &[0, 1], "h").unwrap();
    (out.checkpoint.to_bytes().unwrap(), report)
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn c11_determinism() {
    let tasks = switchworld_registry(10, 0).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut dumps = Vec::new();
    for run in ["a", "b"] {
        let ds = generate_dataset(&tasks, 3, 2, &Level::ALL, 4).unwrap();
        let dir = tmp.path().join(run);
        save_dataset(&ds, &dir, "switchworld10", "h", false).unwrap();
        dumps.push(dir_bytes(&dir));
    }
    let datasets_equal = dumps[0] == dumps[1] && !dumps[0].is_empty();
    let (ck_a, ev_a) = small_training_run(3);
    let (ck_b, ev_b) = small_training_run(3);
    let checkpoints_equal = ck_a == ck_b;
    let reports_equal = serde_json::to_string(&ev_a).unwrap() == serde_json::to_string(&ev_b).unwrap();
    let (ck_c, _) = small_training_run(4);
    let seed_matters = ck_c != ck_a;
    verdict(
        11,
        "determinism",
        datasets_equal && checkpoints_equal && reports_equal && seed_matters,
        &format!(
            "datasets {datasets_equal} ({} files), checkpoints {checkpoints_equal}, eval reports {reports_equal}, other seed differs {seed_matters}",
            dumps[0].len()
        ),
    );
}

#[test]
fn c12_serialization_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let model = TenetModel::init(ModelConfig::default(), 8).unwrap();
    let ck = Checkpoint::from_tenet(&model, serde_json::json!({}), "h", 8, 0, None);
    let ck_path = tmp.path().join("m.ckpt");
    ck.save(&ck_path).unwrap();
    let back = Checkpoint::load(&ck_path).unwrap();
    let bits = |m: &TenetModel| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let ck_ok = back.to_bytes().unwrap() == ck.to_bytes().unwrap() && bits(&back.to_tenet().unwrap()) == bits(&model);

    let params = instantiate(&model, "hold position at the center", &HashEmbedder::default()).unwrap();
    let mut file = ControllerFile::from_params(params.clone(), tenet_core::ModelKind::Tenet, "h");
    file.task_id = Some(0);
    let ctl_path = tmp.path().join("p.ctl");
    file.save(&ctl_path).unwrap();
    drop(model);
    let loaded = ControllerFile::load(&ctl_path).unwrap();
    let ctl_ok = loaded.params.values().iter().map(|v| v.to_bits()).eq(params.values().iter().map(|v| v.to_bits()));

    let mut ctl = loaded.controller(Precision::F64).unwrap();
    let bench = bench_controller(ctl.as_mut(), Precision::F64, MIN_ITERATIONS).unwrap();
    let tasks = switchworld_registry(10, 0).unwrap();
    let f = FileFactory {
        file: &loaded,
        precision: Precision::F64,
    };
    let report = evaluate(&f, &[EvalSplit::new("task", vec![tasks[0].clone()])], 3, &[0], &loaded.config_hash);
    let standalone_ok = bench.param_count == 4610 && report.map(|r| r.total_rollouts() == 3).unwrap_or(false);
    verdict(
        12,
        "serialization round trip",
        ck_ok && ctl_ok && standalone_ok,
        &format!("checkpoint bit-exact {ck_ok}, controller bit-exact {ctl_ok}, file-only bench+eval {standalone_ok}"),
    );
}
