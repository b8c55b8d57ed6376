use care_core::backend::sim::{synthetic_studies, SimConfig, SimulatorBackend};
use care_core::orchestrator::{Orchestrator, PipelineId, RunSettings};
use care_core::template::builtin_task;
use care_core::{RunRecord, Study, TaskSpec};
use statrs::function::erf::erfc;

fn accuracy(records: &[RunRecord]) -> f64 {
    records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64
}

fn run(config: SimConfig, task: &TaskSpec, studies: &[Study], pipeline: PipelineId) -> Vec<RunRecord> {
    let sim = SimulatorBackend::new(config, task, studies).unwrap();
    Orchestrator::new(&sim, task.clone(), RunSettings::default())
        .run_all(pipeline, studies)
        .unwrap()
}

fn binomial_pmf(n: u32, p: f64) -> Vec<f64> {
    (0..=n)
        .map(|k| {
            let c = (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
            c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        })
        .collect()
}

/// Exact judge accuracy: truth-side and other-side assessed-grounded counts
/// are binomial, and the score gap carries Gaussian noise with variance 2 sd².
fn judge_accuracy_exact(c: &SimConfig, sensitivity: f64) -> f64 {
    let assessed = |g: f64| g * sensitivity + (1.0 - g) * (1.0 - sensitivity);
    let t = binomial_pmf(c.n_claims, assessed(c.g_true));
    let f = binomial_pmf(c.n_claims, assessed(c.g_false));
    let sd = c.judge_noise_sd * 2f64.sqrt();
    let mut total = 0.0;
    for (i, pi) in t.iter().enumerate() {
        for (j, pj) in f.iter().enumerate() {
            let gap = i as f64 - j as f64;
            let win = 0.5 * erfc(-gap / sd / 2f64.sqrt());
            total += pi * pj * win;
        }
    }
    total
}

#[test]
fn single_agent_and_majority_vote_follow_beta_moments() {
    let task = builtin_task("edema_vs_pneumonia").unwrap();
    let studies = synthetic_studies(100_000, &task);
    let single = accuracy(&run(SimConfig::default(), &task, &studies, PipelineId::Baseline));
    let mv = accuracy(&run(SimConfig::default(), &task, &studies, PipelineId::MajorityVote(3)));
    // E[d] = 2/3; E[3d² - 2d³] = 3/2 - 4/5 = 0.7
    assert!((single - 2.0 / 3.0).abs() < 0.006, "single {single}");
    assert!((mv - 0.7).abs() < 0.006, "mv {mv}");
    let p: f64 = 2.0 / 3.0;
    assert!(mv < p * p * (3.0 - 2.0 * p));
}

#[test]
fn care_matches_exact_judge_model() {
    let config = SimConfig::default();
    let exact = judge_accuracy_exact(&config, config.judge_sensitivity);
    assert!((exact - 0.679273).abs() < 1e-6, "{exact}");
    let blind_exact = judge_accuracy_exact(&config, config.blind_judge_sensitivity);
    assert!((blind_exact - 0.5914).abs() < 1e-4, "{blind_exact}");

    let task = builtin_task("melanoma_vs_atypical_nevus").unwrap();
    let studies = synthetic_studies(100_000, &task);
    let care = accuracy(&run(config.clone(), &task, &studies, PipelineId::Care));
    let blind = accuracy(&run(config, &task, &studies, PipelineId::BlindCare));
    assert!((care - exact).abs() < 0.006, "care {care} vs {exact}");
    assert!((blind - blind_exact).abs() < 0.006, "blind {blind} vs {blind_exact}");
}

#[test]
fn noiseless_limit_is_perfect() {
    let task = builtin_task("edema_vs_pneumonia").unwrap();
    let studies = synthetic_studies(2_000, &task);
    for p in [PipelineId::Care, PipelineId::BlindCare] {
        assert_eq!(accuracy(&run(SimConfig::noiseless(), &task, &studies, p)), 1.0, "{p}");
    }
}

#[test]
fn swapping_labels_leaves_care_accuracy_unchanged() {
    let task = builtin_task("edema_vs_pneumonia").unwrap();
    let studies = synthetic_studies(100_000, &task);
    let swapped = task.swapped();
    let a = accuracy(&run(SimConfig::default(), &task, &studies, PipelineId::Care));
    let b = accuracy(&run(SimConfig::default(), &swapped, &studies, PipelineId::Care));
    // two independent-ish estimates of the same proportion: 4 standard errors
    let se = (2.0 * 0.68 * 0.32 / 100_000.0f64).sqrt();
    assert!((a - b).abs() < 4.0 * se, "{a} vs {b}");
}

#[test]
fn master_seed_changes_draws_but_not_the_law() {
    let task = builtin_task("edema_vs_pneumonia").unwrap();
    let studies = synthetic_studies(20_000, &task);
    let a = run(SimConfig::default(), &task, &studies, PipelineId::Baseline);
    let other = SimConfig {
        master_seed: 99,
        ..SimConfig::default()
    };
    let b = run(other, &task, &studies, PipelineId::Baseline);
    assert_ne!(
        a.iter().map(|r| r.is_correct()).collect::<Vec<_>>(),
        b.iter().map(|r| r.is_correct()).collect::<Vec<_>>()
    );
    assert!((accuracy(&a) - accuracy(&b)).abs() < 0.03);
}

#[test]
fn worker_width_does_not_change_records() {
    let task = builtin_task("edema_vs_pneumonia").unwrap();
    let studies = synthetic_studies(300, &task);
    let sim = SimulatorBackend::new(SimConfig::default(), &task, &studies).unwrap();
    let records = |width| {
        Orchestrator::new(
            &sim,
            task.clone(),
            RunSettings {
                width,
                ..RunSettings::default()
            },
        )
        .run_all(PipelineId::Care, &studies)
        .unwrap()
    };
    assert_eq!(records(1), records(3));
}
