//! Acceptance suite: one pass/fail line per criterion, nonzero exit when any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cfn_core::checks::{run_suite, GradCheckConfig};
use cfn_core::data::{synth_generate, Dataset, Sample, SynthConfig};
use cfn_core::fusion::{compute_q, fuse, pool, Collapse, FusionRule};
use cfn_core::loss::{approximation_log_gap, approximation_sides, tempered_softmax};
use cfn_core::metrics::{
    average_precision, entropy_kde, ers, f1_score, mutual_information_kde, r2_score, roc_auc, Convention,
};
use cfn_core::model::{ablate, AblationConfig, AblationResult, Variant};
use cfn_core::stats::build_cooccurrence;
use cfn_core::tensor::Tensor;
use cfn_core::N_DISCRETE;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < limit_s,
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn ers_reproduction() -> Outcome {
    let rows = [
        ("chance", 0.0, 11.75, 50.0, 61.75),
        ("baseline A", 0.0947, 17.48, 62.59, 64.08),
        ("baseline B", 0.0760, 14.02, 57.65, 62.24),
        ("baseline C", 0.1007, 17.33, 61.2, 64.26),
        ("fusion", 0.1493, 23.18, 71.56, 66.33),
    ];
    let mut parts = Vec::new();
    for (name, r2, map, mra, expected) in rows {
        let got = ers(r2, map, mra).map_err(|e| e.to_string())?;
        check((got - expected).abs() <= 0.02, format!("{name}: {got:.4} vs {expected}"))?;
        parts.push(format!("{name} {got:.2}"));
    }
    let uniform = Convention::Uniform
        .ers_from_fractions(0.1493, 0.2318, 0.7156)
        .map_err(|e| e.to_string())?;
    check((uniform - 83.64).abs() <= 0.05, format!("uniform {uniform:.4} vs 83.64"))?;
    parts.push(format!("uniform {uniform:.2}"));
    Ok(parts.join(", "))
}

fn random_dataset(rng: &mut ChaCha8Rng, tau_attr: f64, tau_emo: f64) -> Dataset {
    let value = |rng: &mut ChaCha8Rng, tau: f64| match rng.random_range(0..4) {
        0 => tau,
        1 => 0.0,
        2 => rng.random_range(0.0..tau),
        _ => rng.random_range(tau..1.0),
    };
    let n = rng.random_range(1..=1000);
    let (n_place, n_object) = (rng.random_range(1..10), rng.random_range(0..6));
    let samples = (0..n)
        .map(|k| Sample {
            id: format!("s{k}"),
            features: vec![0.0],
            emotions_discrete: (0..N_DISCRETE).map(|_| value(rng, tau_emo)).collect(),
            emotions_continuous: vec![5.0; 3],
            place_attrs: (0..n_place).map(|_| value(rng, tau_attr)).collect(),
            object_attrs: (0..n_object).map(|_| value(rng, tau_attr)).collect(),
        })
        .collect();
    Dataset::new(samples).expect("valid random dataset")
}

/// `Pr(emotion | attribute present)` and `Pr(emotion | attribute absent)` by
/// direct counting, falling back to the marginal when a side is empty.
fn brute_force(ds: &Dataset, tau_attr: f64, tau_emo: f64) -> (Vec<f64>, Vec<f64>) {
    let n = ds.len();
    let k = ds.n_place() + ds.n_object();
    let attr = |s: &Sample, a: usize| s.place_attrs.iter().chain(&s.object_attrs).nth(a).copied().unwrap();
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for a in 0..k {
        for i in 0..N_DISCRETE {
            let (mut on, mut on_with, mut off_with, mut with) = (0usize, 0usize, 0usize, 0usize);
            for s in ds.samples() {
                let present = attr(s, a) >= tau_attr;
                let emo = s.emotions_discrete[i] >= tau_emo;
                on += present as usize;
                with += emo as usize;
                on_with += (present && emo) as usize;
                off_with += (!present && emo) as usize;
            }
            let marginal = with as f64 / n as f64;
            plus.push(if on == 0 { marginal } else { on_with as f64 / on as f64 });
            minus.push(if on == n { marginal } else { off_with as f64 / (n - on) as f64 });
        }
    }
    (plus, minus)
}

fn cooccurrence_oracle() -> Outcome {
    let start = Instant::now();
    let (tau_attr, tau_emo) = (0.01, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for d in 0..50 {
        let ds = random_dataset(&mut rng, tau_attr, tau_emo);
        let stats = build_cooccurrence(&ds, tau_attr, tau_emo).map_err(|e| e.to_string())?;
        let (plus, minus) = brute_force(&ds, tau_attr, tau_emo);
        check(stats.p_plus.data() == plus.as_slice(), format!("dataset {d}: P+ differs"))?;
        check(stats.p_minus.data() == minus.as_slice(), format!("dataset {d}: P- differs"))?;
        for a in 0..stats.n_attributes() {
            let pj = stats.p_j[a];
            for i in 0..N_DISCRETE {
                let total = stats.p_plus.get2(a, i) * pj + stats.p_minus.get2(a, i) * (1.0 - pj);
                worst = worst.max((total - stats.p_i[i]).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("total-probability residual {worst:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("50 datasets bitwise equal, max identity residual {worst:.1e}, {:.2?}", start.elapsed()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let config = GradCheckConfig::default();
    check(config.points == 100 && config.eps == 1e-5 && config.tolerance == 1e-4, "non-default settings")?;
    let results = run_suite(&config).map_err(|e| e.to_string())?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    check(failed.is_empty(), format!("failed cases: {}", failed.join(", ")))?;
    check(results.iter().all(|r| r.points == 100), "a case ran fewer than 100 points")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let code = cfn_cli::main_with_args(["cfn", "gradcheck", "--out", dir.path().to_str().unwrap()]);
    check(code == 0, format!("cfn gradcheck exited {code}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!("{} cases, max rel error {worst:.1e}, {:.2?}", results.len(), start.elapsed()))
}

fn unit_matrix(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(2, N_DISCRETE, (0..2 * N_DISCRETE).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

fn pooling_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = 2000;
    let err = |e: cfn_core::Error| e.to_string();
    for case in 0..cases {
        let plus = unit_matrix(&mut rng);
        let minus = unit_matrix(&mut rng);
        let collapse = if rng.random_bool(0.5) { Collapse::Mean } else { Collapse::Max };
        let q = compute_q(&plus).map_err(err)?;
        for i in 0..N_DISCRETE {
            check(q[i] == plus.get2(0, i).max(plus.get2(1, i)), format!("case {case}: Q is not the column max"))?;
        }
        let (p_hat, _) = pool(&[1.0; N_DISCRETE], &plus, &minus, collapse).map_err(err)?;
        check(p_hat == plus, format!("case {case}: Q = 1 does not return P+"))?;
        let (p_hat, _) = pool(&q, &plus, &plus, collapse).map_err(err)?;
        let gap = p_hat.data().iter().zip(plus.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(gap <= 1e-15, format!("case {case}: P- = P+ leaves a gap {gap:e}"))?;

        let y: Vec<f64> = (0..29).map(|_| rng.random_range(0.0..=1.0)).collect();
        let lambda = rng.random_range(0.0..=1.0);
        let (p_hat, context) = pool(&q, &plus, &minus, collapse).map_err(err)?;
        let fused = fuse(&y, &context, lambda, FusionRule::Convex).map_err(err)?;
        let all = p_hat.data().iter().chain(&q).chain(&context).chain(&fused);
        check(all.into_iter().all(|v| (0.0..=1.0).contains(v)), format!("case {case}: value outside [0, 1]"))?;

        let off = fuse(&y, &context, 0.0, FusionRule::Convex).map_err(err)?;
        check(
            off.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("case {case}: fuse at lambda 0 is not the emotion output"),
        )?;
    }
    Ok(format!("{cases} random cases"))
}

fn tempered_softmax_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let err = |e: cfn_core::Error| e.to_string();
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let d = rng.random_range(2..40);
        let h: Vec<f64> = (0..d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let p = tempered_softmax(&h, 1.0).map_err(err)?;
        for (a, b) in p.iter().zip(&e) {
            worst = worst.max((a - b / z).abs());
        }
        let (lhs, rhs) = approximation_sides(&h, 1.0).map_err(err)?;
        check(lhs == rhs, format!("case {case}: sides differ at sigma 1 ({lhs} vs {rhs})"))?;

        for side in [[1.05, 1.2, 1.5, 2.0, 3.0], [0.95, 0.8, 0.6, 0.4, 0.3]] {
            let mut prev = 0.0;
            for sigma in side {
                let gap = approximation_log_gap(&h, sigma).map_err(err)?.abs();
                check(gap > prev, format!("case {case}: gap not increasing at sigma {sigma}"))?;
                prev = gap;
            }
        }
    }
    check(worst <= 1e-15, format!("softmax deviation {worst:e}"))?;
    Ok(format!("500 random logit vectors, max softmax deviation {worst:.1e}"))
}

fn metric_hand_cases() -> Outcome {
    let err = |e: cfn_core::Error| e.to_string();
    let scores = [0.9, 0.4, 0.2];
    let labels = [true, false, true];
    let ap = average_precision(&scores, &labels).map_err(err)?;
    check((ap - 5.0 / 6.0).abs() < 1e-12, format!("AP {ap}"))?;
    let auc = roc_auc(&scores, &labels).map_err(err)?;
    check((auc - 0.5).abs() < 1e-12, format!("AUC {auc}"))?;
    let f1 = f1_score(&[true, true, false], &[true, false, true]).map_err(err)?;
    check((f1 - 0.5).abs() < 1e-12, format!("F1 {f1}"))?;

    let y = [1.0, 2.0, 3.0];
    check(r2_score(&y, &y).map_err(err)? == 1.0, "R2 of a perfect fit")?;
    let r0 = r2_score(&y, &[2.0; 3]).map_err(err)?;
    check(r0.abs() < 1e-12, format!("R2 of the mean {r0}"))?;
    let r_half = r2_score(&y, &[1.0, 2.0, 4.0]).map_err(err)?;
    check((r_half - 0.5).abs() < 1e-12, format!("R2 {r_half}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [2usize, 5, 29, 100, 300] {
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let h = entropy_kde(&x).map_err(err)?;
        check((0.0..=(n as f64).log2() + 1e-12).contains(&h), format!("entropy {h} at n={n}"))?;
    }
    let x: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
    let h = entropy_kde(&x).map_err(err)?;
    let mi_self = mutual_information_kde(&x, &x).map_err(err)?;
    check((mi_self - h).abs() <= 0.1, format!("MI(X,X) {mi_self} vs H {h}"))?;
    let a: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let mi_indep = mutual_information_kde(&a, &b).map_err(err)?;
    check(mi_indep.abs() < 0.1, format!("MI of independent samples {mi_indep}"))?;
    Ok(format!("AP {ap:.4}, AUC {auc}, F1 {f1}, MI(X,X) {mi_self:.3} vs H {h:.3}, MI(indep) {mi_indep:.4}"))
}

const SEED: u64 = 0;

fn planted(synth: SynthConfig) -> Dataset {
    synth_generate(&synth).expect("generator runs").dataset
}

fn run(variant: Variant, ds: &Dataset, seed: u64) -> Result<AblationResult, String> {
    let mut config = AblationConfig::default();
    config.split.seed = seed;
    config.model.init_seed = seed;
    config.train.seed = seed;
    ablate(variant, ds, &config).map_err(|e| format!("{variant}: {e}"))
}

/// Training runs shared by the synthetic criteria.
struct Runs {
    base: Dataset,
    full: Vec<AblationResult>,
    q_plus_only: Vec<AblationResult>,
    emotion_only: AblationResult,
    no_place: AblationResult,
    no_object: AblationResult,
    elapsed: Duration,
}

const SEEDS: [u64; 3] = [SEED, SEED + 1, SEED + 2];

fn train_all() -> Result<Runs, String> {
    let start = Instant::now();
    let base = planted(SynthConfig { seed: SEED, ..SynthConfig::default() });
    let strong_place = planted(SynthConfig {
        seed: SEED,
        place_signal: 1.0,
        object_signal: 0.4,
        ..SynthConfig::default()
    });
    let mut full = Vec::new();
    let mut q_plus_only = Vec::new();
    for seed in SEEDS {
        full.push(run(Variant::Full, &base, seed)?);
        q_plus_only.push(run(Variant::QPlusOnly, &base, seed)?);
    }
    let emotion_only = run(Variant::EmotionOnly, &base, SEED)?;
    let no_place = run(Variant::NoPlace, &strong_place, SEED)?;
    let no_object = run(Variant::NoObject, &strong_place, SEED)?;
    Ok(Runs {
        base,
        full,
        q_plus_only,
        emotion_only,
        no_place,
        no_object,
        elapsed: start.elapsed(),
    })
}

fn fusion_benefit(runs: &Runs) -> Outcome {
    let full = runs.full[0].report.mse;
    let emo = runs.emotion_only.report.mse;
    let gain = (emo - full) / emo;
    check(gain >= 0.10, format!("full MSE {full:.4} vs emotion_only {emo:.4}: {:.1}% lower", 100.0 * gain))?;
    let (np, no) = (runs.no_place.report.mse, runs.no_object.report.mse);
    check(np > no, format!("stronger place signal: no_place {np:.4} vs no_object {no:.4}"))?;
    within(runs.elapsed, 600.0)?;
    Ok(format!(
        "full {full:.4} vs emotion_only {emo:.4} ({:.1}% lower); no_place {np:.4} > no_object {no:.4}; {:.0?} for all runs",
        100.0 * gain,
        runs.elapsed
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn uncertainty_ordering(runs: &Runs) -> Outcome {
    let pick = |rs: &[AblationResult], f: fn(&AblationResult) -> f64| median(rs.iter().map(f).collect());
    let e_full = pick(&runs.full, |r| r.report.entropy_bits);
    let e_q = pick(&runs.q_plus_only, |r| r.report.entropy_bits);
    let mi_full = pick(&runs.full, |r| r.report.mi_bits);
    let mi_q = pick(&runs.q_plus_only, |r| r.report.mi_bits);
    let summary = format!(
        "median over {} seeds: E full {e_full:.4} vs q_plus_only {e_q:.4}; MI full {mi_full:.4} vs q_plus_only {mi_q:.4}",
        SEEDS.len()
    );
    check(e_full <= e_q && mi_full >= mi_q, summary.clone())?;
    Ok(summary)
}

fn determinism(runs: &Runs) -> Outcome {
    let again = run(Variant::Full, &runs.base, SEED)?;
    let first = &runs.full[0];
    check(again.history.to_csv() == first.history.to_csv(), "history CSV differs")?;
    let (a, b) = (
        again.model.to_json().map_err(|e| e.to_string())?,
        first.model.to_json().map_err(|e| e.to_string())?,
    );
    check(a == b, "checkpoint differs")?;
    Ok(format!("history CSV ({} epochs) and checkpoint ({} bytes) identical", again.history.epochs.len(), a.len()))
}

fn main() -> ExitCode {
    let mut outcomes: Vec<(u32, &str, Outcome)> = vec![
        (1, "ERS reproduction", ers_reproduction()),
        (2, "co-occurrence oracle", cooccurrence_oracle()),
        (3, "gradient suite", gradient_suite()),
        (4, "pooling algebra", pooling_algebra()),
        (5, "tempered softmax identity", tempered_softmax_identity()),
        (6, "metric hand-cases", metric_hand_cases()),
    ];
    for (id, name, outcome) in &outcomes {
        report(*id, name, outcome);
    }
    let synthetic: [(u32, &str, fn(&Runs) -> Outcome); 3] = [
        (7, "synthetic fusion benefit", fusion_benefit),
        (8, "fusion uncertainty ordering", uncertainty_ordering),
        (9, "determinism", determinism),
    ];
    match train_all() {
        Ok(runs) => {
            for (id, name, f) in synthetic {
                let outcome = f(&runs);
                report(id, name, &outcome);
                outcomes.push((id, name, outcome));
            }
        }
        Err(e) => {
            for (id, name, _) in synthetic {
                let outcome = Err(format!("training failed: {e}"));
                report(id, name, &outcome);
                outcomes.push((id, name, outcome));
            }
        }
    }
    let failed = outcomes.iter().filter(|(_, _, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(id: u32, name: &str, outcome: &Outcome) {
    match outcome {
        Ok(detail) => println!("criterion {id} PASS {name}: {detail}"),
        Err(detail) => println!("criterion {id} FAIL {name}: {detail}"),
    }
}
