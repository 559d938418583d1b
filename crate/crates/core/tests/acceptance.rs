//! Acceptance suite. Runs without the libtest harness so that it prints one
//! PASS/FAIL line per criterion, in order, and exits non-zero if any fails.
//!
//! Gradient and value oracles below are written from the loss definitions
//! directly and share no code with the library.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fretal::adapt::{adapt_student, fretal_loss, AdaptationConfig, Method, Stores, Teacher};
use fretal::backbone::checkpoint::Checkpoint;
use fretal::backbone::{copy_weights, Architecture, ImageTensor, ModelHandle, INPUT_CHANNELS, INPUT_SIZE};
use fretal::datagen::{generate_domain_with, write_dataset, DomainDataset, GeneratorConfig, Split};
use fretal::experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
use fretal::feature_store::{build_store, refresh_student_store, BinSpec, FeatureStore};
use fretal::losses::{
    ce_loss, ce_loss_grad, entropy, fretal_objective, fsl_cell_gradients, fsl_loss, kd_loss, kd_loss_grad, softmax_t,
    softmax_t_vjp, FeatureObjectiveInputs, LossConfig,
};
use fretal::{Error, Label};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const INSTANCES: usize = 100;
/// Floor of the relative-error denominator, so that gradients that are
/// zero up to rounding are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

// ---------------------------------------------------------------- oracles

fn oracle_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| ((v - m) / t).exp()).sum::<f64>().ln();
    z.iter().map(|v| (v - m) / t - lse).collect()
}

/// `-(1/N) sum_n sum_i q_i log p_i` with `q`, `p` softened by `t`.
fn oracle_kd(teacher: &[Vec<f64>], student: &[Vec<f64>], t: f64) -> f64 {
    let mut total = 0.0;
    for (a, b) in teacher.iter().zip(student) {
        let q = oracle_softmax(a, t);
        let lp = oracle_log_softmax(b, t);
        total -= q.iter().zip(&lp).map(|(q, l)| q * l).sum::<f64>();
    }
    total / teacher.len() as f64
}

/// Batch-mean cross-entropy against target distributions at temperature 1.
fn oracle_ce(student: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (s, y) in student.iter().zip(targets) {
        let lp = oracle_log_softmax(s, 1.0);
        total -= y.iter().zip(&lp).map(|(y, l)| y * l).sum::<f64>();
    }
    total / student.len() as f64
}

/// Sum over cells present on both sides of the squared distance between
/// the member means.
fn oracle_fsl(student_members: &[Vec<Vec<f64>>], teacher_means: &[Option<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for (members, t) in student_members.iter().zip(teacher_means) {
        let (Some(t), false) = (t, members.is_empty()) else { continue };
        let n = members.len() as f64;
        for (d, tv) in t.iter().enumerate() {
            let mean = members.iter().map(|m| m[d]).sum::<f64>() / n;
            total += (mean - tv) * (mean - tv);
        }
    }
    total
}

fn central_difference(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    rng.sample::<f64, _>(StandardNormal) * scale
}

fn logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..k).map(|_| normal(rng, scale)).collect()).collect()
}

fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    v
}

/// Worst relative error over all coordinates of a batch-shaped input.
fn check_batch_grad(x: &[Vec<f64>], analytic: &[Vec<f64>], f: &dyn Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        for j in 0..x[i].len() {
            let mut probe = x.to_vec();
            let numeric = central_difference(
                &mut |v| {
                    probe[i][j] = v;
                    f(&probe)
                },
                x[i][j],
            );
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

fn random_teacher_store(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> FeatureStore {
    let mut store = FeatureStore::new(BinSpec::default(), dim);
    for _ in 0..n {
        let f: Vec<f64> = (0..dim).map(|_| normal(rng, 1.0)).collect();
        let label = if rng.random::<bool>() { Label::Fake } else { Label::Real };
        store.accumulate(&f, rng.random_range(0.5..=1.0), label).unwrap();
    }
    store
}

fn teacher_means(store: &FeatureStore) -> Vec<Option<Vec<f64>>> {
    (0..store.num_cells()).map(|c| store.aggregate_cell(c)).collect()
}

/// Student members grouped by their fixed cells.
fn members_by_cell(features: &[Vec<f64>], cells: &[Option<usize>], num_cells: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); num_cells];
    for (f, c) in features.iter().zip(cells) {
        if let Some(c) = c {
            out[*c].push(f.clone());
        }
    }
    out
}

// ---------------------------------------------------------------- fixture

struct Fixture {
    cfg: ExperimentConfig,
    out: tempfile::TempDir,
    outcome: ExperimentOutcome,
    elapsed: Duration,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = ExperimentConfig::load(&config_path("acceptance.toml")).expect("acceptance config");
        let out = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let outcome = run_experiment(&cfg, out.path()).expect("acceptance experiment");
        Fixture { cfg, out, outcome, elapsed: started.elapsed() }
    })
}

fn load_teacher(domain: &str) -> Teacher {
    let path = fixture().out.path().join("teachers").join(format!("{domain}.ckpt"));
    Teacher::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap()
}

fn load_domain(name: &str) -> DomainDataset {
    let cfg = &fixture().cfg;
    let spec = cfg.domain_specs().unwrap().into_iter().find(|s| s.name == name).unwrap();
    generate_domain_with(&spec, &cfg.generator, cfg.seed).unwrap()
}

// ---------------------------------------------------------------- criteria

type Outcome = Result<String, String>;

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 5];

    for _ in 0..INSTANCES {
        let k = rng.random_range(2..=6);
        let t = rng.random_range(0.5..30.0);
        let z = logits(&mut rng, 1, k, 3.0).remove(0);
        let u: Vec<f64> = (0..k).map(|_| normal(&mut rng, 1.0)).collect();
        let p = softmax_t(&z, t).unwrap();
        let analytic = softmax_t_vjp(&p, &u, t);
        let f = |x: &[Vec<f64>]| oracle_softmax(&x[0], t).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        worst[0] = worst[0].max(check_batch_grad(&[z], &[analytic], &f));
    }

    for _ in 0..INSTANCES {
        let (n, k) = (rng.random_range(1..=6), rng.random_range(2..=4));
        let t = rng.random_range(0.5..30.0);
        let teacher = logits(&mut rng, n, k, 3.0);
        let student = logits(&mut rng, n, k, 3.0);
        let analytic = kd_loss_grad(&teacher, &student, t).unwrap().grad;
        let f = |x: &[Vec<f64>]| oracle_kd(&teacher, x, t);
        worst[1] = worst[1].max(check_batch_grad(&student, &analytic, &f));
    }

    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=6);
        let student = logits(&mut rng, n, 2, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let targets: Vec<Vec<f64>> = labels.iter().map(|&l| one_hot(l, 2)).collect();
        let analytic = ce_loss_grad(&student, &labels).unwrap().grad;
        let f = |x: &[Vec<f64>]| oracle_ce(x, &targets);
        worst[2] = worst[2].max(check_batch_grad(&student, &analytic, &f));
    }

    for _ in 0..INSTANCES {
        let dim = rng.random_range(1..=6);
        let teacher = random_teacher_store(&mut rng, dim, 40);
        let n = rng.random_range(1..=12);
        let features = logits(&mut rng, n, dim, 1.0);
        let cells: Vec<Option<usize>> =
            (0..n).map(|_| rng.random_bool(0.9).then(|| rng.random_range(0..teacher.num_cells()))).collect();
        let mut student = FeatureStore::new(BinSpec::default(), dim);
        for (f, c) in features.iter().zip(&cells) {
            if let Some(c) = c {
                student.add_to_cell(*c, f).unwrap();
            }
        }
        let cell_grads = fsl_cell_gradients(&student, &teacher).unwrap();
        let analytic: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| c.and_then(|c| cell_grads[c].clone()).unwrap_or_else(|| vec![0.0; dim]))
            .collect();
        let means = teacher_means(&teacher);
        let num_cells = teacher.num_cells();
        let f = |x: &[Vec<f64>]| oracle_fsl(&members_by_cell(x, &cells, num_cells), &means);
        // the library value must agree with the oracle as well
        let value_gap = (fsl_loss(&student, &teacher).unwrap() - f(&features)).abs();
        if value_gap > 1e-9 {
            return Err(format!("fsl value differs from oracle by {value_gap:e}"));
        }
        worst[3] = worst[3].max(check_batch_grad(&features, &analytic, &f));
    }

    for _ in 0..INSTANCES {
        let dim = rng.random_range(1..=5);
        let n = rng.random_range(1..=8);
        let cfg = LossConfig {
            temperature: rng.random_range(0.5..30.0),
            fsl_weight: rng.random_range(0.0..2.0),
            kd_weight: rng.random_range(0.0..2.0),
            ce_weight: rng.random_range(0.0..2.0),
        };
        let teacher_store = random_teacher_store(&mut rng, dim, 40);
        let t_logits: Vec<[f64; 2]> = (0..n).map(|_| [normal(&mut rng, 3.0), normal(&mut rng, 3.0)]).collect();
        let s_logits: Vec<[f64; 2]> = (0..n).map(|_| [normal(&mut rng, 3.0), normal(&mut rng, 3.0)]).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let targets: Vec<[f64; 2]> = labels.iter().map(|&l| if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let features = logits(&mut rng, n, dim, 1.0);
        let cells: Vec<Option<usize>> =
            (0..n).map(|_| rng.random_bool(0.9).then(|| rng.random_range(0..teacher_store.num_cells()))).collect();
        let g = fretal_objective(
            &cfg,
            FeatureObjectiveInputs {
                teacher_logits: &t_logits,
                student_logits: &s_logits,
                targets: &targets,
                student_features: &features,
                cells: &cells,
                teacher_store: &teacher_store,
            },
        )
        .unwrap();

        let t_vec: Vec<Vec<f64>> = t_logits.iter().map(|v| v.to_vec()).collect();
        let y_vec: Vec<Vec<f64>> = targets.iter().map(|v| v.to_vec()).collect();
        let means = teacher_means(&teacher_store);
        let num_cells = teacher_store.num_cells();
        let total = |logits: &[Vec<f64>], feats: &[Vec<f64>]| {
            cfg.fsl_weight * oracle_fsl(&members_by_cell(feats, &cells, num_cells), &means)
                + cfg.kd_weight * oracle_kd(&t_vec, logits, cfg.temperature)
                + cfg.ce_weight * oracle_ce(logits, &y_vec)
        };
        let s_vec: Vec<Vec<f64>> = s_logits.iter().map(|v| v.to_vec()).collect();
        let value_gap = (g.breakdown.total - total(&s_vec, &features)).abs();
        if value_gap > 1e-9 {
            return Err(format!("combined objective differs from oracle by {value_gap:e}"));
        }
        let d_logits: Vec<Vec<f64>> = g.d_logits.iter().map(|v| v.to_vec()).collect();
        let by_logits = check_batch_grad(&s_vec, &d_logits, &|x| total(x, &features));
        let by_features = check_batch_grad(&features, &g.d_features, &|x| total(&s_vec, x));
        worst[4] = worst[4].max(by_logits).max(by_features);
    }

    let elapsed = started.elapsed();
    let names = ["softmax_t", "kd", "ce", "fsl", "fretal"];
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    let detail = format!("max rel err over {INSTANCES} instances each: {detail}; {:.2}s", elapsed.as_secs_f64());
    if worst.iter().all(|&w| w < REL_TOL) && elapsed < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // distillation from a one-hot teacher at temperature 1 is cross-entropy
    let mut kd_ce_gap = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let student = logits(&mut rng, n, 2, 4.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        // softmax of a 1000-logit margin is exactly one-hot in f64
        let teacher: Vec<Vec<f64>> = labels.iter().map(|&l| if l == 0 { vec![1000.0, 0.0] } else { vec![0.0, 1000.0] }).collect();
        if softmax_t(&teacher[0], 1.0).unwrap().iter().any(|&p| p != 0.0 && p != 1.0) {
            return Err("teacher distribution is not one-hot".into());
        }
        kd_ce_gap = kd_ce_gap.max((kd_loss(&teacher, &student, 1.0).unwrap() - ce_loss(&student, &labels).unwrap()).abs());
    }
    if kd_ce_gap > 1e-9 {
        return Err(format!("kd(one-hot, T=1) differs from ce by {kd_ce_gap:e}"));
    }

    // degenerate weights on a real batch with real stores
    let f = fixture();
    let teacher = load_teacher("blend");
    let target = load_domain("grid");
    let samples = target.samples(Split::Adapt);
    let batch: Vec<_> = samples.iter().step_by(7).take(32).copied().collect();
    let mut student = teacher.model.trainable_clone();
    // move the student off the teacher so that every term is non-trivial
    let other = ModelHandle::new(Architecture::default(), 99).unwrap();
    copy_weights(&other, &mut student).unwrap();
    let spec = f.cfg.adaptation.bins;
    let stores = Stores {
        teacher: build_store(&teacher.model, &samples, spec).unwrap(),
        student: refresh_student_store(&student, &samples, spec).unwrap(),
    };
    let t_logits: Vec<[f64; 2]> = teacher.model.forward(&batch.iter().map(|s| s.tensor()).collect::<Vec<_>>()).unwrap().iter().map(|o| o.logits_f64()).collect();
    let s_logits: Vec<[f64; 2]> = student.forward(&batch.iter().map(|s| s.tensor()).collect::<Vec<_>>()).unwrap().iter().map(|o| o.logits_f64()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
    let temperature = f.cfg.adaptation.loss.temperature;
    let kd_only = LossConfig { fsl_weight: 0.0, kd_weight: 1.0, ce_weight: 0.0, temperature };
    let ft_only = LossConfig { fsl_weight: 0.0, kd_weight: 0.0, ce_weight: 1.0, temperature };
    let kd_total = fretal_loss(&batch, &teacher.model, &student, &stores, &kd_only).unwrap().total;
    let ft_total = fretal_loss(&batch, &teacher.model, &student, &stores, &ft_only).unwrap().total;
    let kd_ref = kd_loss(&t_logits, &s_logits, temperature).unwrap();
    let ce_ref = ce_loss(&s_logits, &labels).unwrap();
    if kd_total != kd_ref || ft_total != ce_ref {
        return Err(format!("degenerate totals {kd_total} / {ft_total} vs kd {kd_ref} / ce {ce_ref}"));
    }
    let full = fretal_loss(&batch, &teacher.model, &student, &stores, &f.cfg.adaptation.loss).unwrap();
    if !(full.fsl.unwrap() > 0.0) {
        return Err("square loss unexpectedly zero for distinct models".into());
    }

    // identical stores
    let mut fsl_max = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(1..=16);
        let store = random_teacher_store(&mut rng, dim, 50);
        fsl_max = fsl_max.max(fsl_loss(&store, &store.clone()).unwrap());
    }
    fsl_max = fsl_max.max(fsl_loss(&stores.teacher, &stores.teacher.clone()).unwrap());
    if fsl_max != 0.0 {
        return Err(format!("fsl on identical stores is {fsl_max}"));
    }

    // entropy non-decreasing in temperature
    let temps: Vec<f64> = (0..60).map(|i| 0.05 * 1.15f64.powi(i)).collect();
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let z = logits(&mut rng, 1, k, 5.0).remove(0);
        let h: Vec<f64> = temps.iter().map(|&t| entropy(&softmax_t(&z, t).unwrap())).collect();
        if let Some(w) = h.windows(2).find(|w| w[1] < w[0] - 1e-12) {
            return Err(format!("entropy decreased from {} to {} for logits {z:?}", w[0], w[1]));
        }
    }
    Ok(format!(
        "kd/ce gap {kd_ce_gap:.1e}; (0,1,0) -> kd and (0,0,1) -> ce exactly; fsl(identical) = 0; entropy monotone on 1000 vectors x {} temperatures",
        temps.len()
    ))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher = ModelHandle::new(Architecture::default(), 11).unwrap().frozen();
    let mut student = ModelHandle::new(Architecture::default(), 12).unwrap();
    copy_weights(&teacher, &mut student).unwrap();
    for b in 0..100 {
        let n = rng.random_range(1..=4);
        let batch: Vec<ImageTensor> = (0..n)
            .map(|_| {
                let data = (0..INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
                ImageTensor::new(INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS, data)
            })
            .collect();
        if teacher.forward(&batch).unwrap() != student.forward(&batch).unwrap() {
            return Err(format!("outputs differ on batch {b}"));
        }
    }

    let t = load_teacher("blend");
    let target = load_domain("grid");
    let before = t.model.parameter_hash();
    let cfg = AdaptationConfig { method: Method::Fretal, ..fixture().cfg.adaptation.clone() };
    let adapted = adapt_student(&t, &target, &cfg).unwrap();
    let after = t.model.parameter_hash();
    let recorded = fixture().outcome.teachers.iter().find(|r| r.domain == "blend").and_then(|r| r.model_hash.clone());
    if before != after || recorded.as_deref() != Some(before.as_str()) {
        return Err(format!("teacher hash changed: {before} -> {after} (recorded {recorded:?})"));
    }
    if adapted.student.parameter_hash() == before && adapted.trace.best_epoch > 0 {
        return Err("student never diverged from the teacher".into());
    }
    Ok(format!(
        "100 batches bitwise identical; teacher hash {}… unchanged over {} epochs",
        &before[..12],
        adapted.trace.records.len() - 1
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = BinSpec::default();
    let edges = spec.edges();
    let mut per_bin = vec![0usize; spec.num_bins()];
    let mut excluded = 0;
    let n = 10_000;
    for i in 0..n {
        // mix uniform draws with exact edges
        let c = if i % 10 == 0 { edges[rng.random_range(0..edges.len())] } else { rng.random_range(0.0..=1.0) };
        match spec.assign(c).unwrap() {
            Some(k) => {
                let upper_ok = if k + 1 == spec.num_bins() { c <= edges[k + 1] + 1e-12 } else { c < edges[k + 1] + 1e-12 };
                if c < edges[k] - 1e-12 || !upper_ok {
                    return Err(format!("confidence {c} assigned to bin {k} [{}, {}]", edges[k], edges[k + 1]));
                }
                per_bin[k] += 1;
            }
            None => {
                if c >= edges[0] {
                    return Err(format!("confidence {c} excluded despite lying in range"));
                }
                excluded += 1;
            }
        }
    }
    let assigned: usize = per_bin.iter().sum();
    if assigned + excluded != n {
        return Err(format!("{assigned} assigned + {excluded} excluded != {n}"));
    }

    for _ in 0..200 {
        let dim = rng.random_range(1..=8);
        let mut store = FeatureStore::new(spec, dim);
        let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); store.num_cells()];
        for _ in 0..rng.random_range(1..60) {
            let f: Vec<f64> = (0..dim).map(|_| normal(&mut rng, 2.0)).collect();
            let label = if rng.random::<bool>() { Label::Fake } else { Label::Real };
            if let Some(c) = store.accumulate(&f, rng.random_range(0.0..=1.0), label).unwrap() {
                members[c].push(f);
            }
        }
        for (c, m) in members.iter().enumerate() {
            let agg = store.aggregate_cell(c);
            match (agg, m.is_empty()) {
                (None, true) => {}
                (Some(a), false) => {
                    for d in 0..dim {
                        let lo = m.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
                        let hi = m.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
                        let mean = m.iter().map(|v| v[d]).sum::<f64>() / m.len() as f64;
                        if a[d] < lo - 1e-12 || a[d] > hi + 1e-12 || (a[d] - mean).abs() > 1e-12 {
                            return Err(format!("cell {c} aggregate {} outside hull [{lo}, {hi}]", a[d]));
                        }
                    }
                }
                _ => return Err(format!("cell {c} emptiness disagrees with its members")),
            }
        }
    }

    // epoch 0: the student is a copy of the teacher
    let mut worst = 0.0f64;
    let mut records = 0;
    for r in fixture().outcome.runs.iter().filter(|r| r.method == Method::Fretal) {
        let fsl0 = r.trace.as_ref().and_then(|t| t.records[0].fsl).ok_or("fretal run without an epoch-0 square loss")?;
        worst = worst.max(fsl0.abs());
        records += 1;
    }
    let teacher = load_teacher("grid");
    let target = load_domain("speckle");
    let samples = target.samples(Split::Adapt);
    let direct = fsl_loss(
        &refresh_student_store(&teacher.model.trainable_clone(), &samples, spec).unwrap(),
        &build_store(&teacher.model, &samples, spec).unwrap(),
    )
    .unwrap();
    worst = worst.max(direct.abs());
    if records == 0 || worst > 1e-10 {
        return Err(format!("epoch-0 square loss {worst:e} over {records} runs"));
    }
    Ok(format!(
        "{assigned} assigned + {excluded} excluded = {n}; aggregates within member hulls; epoch-0 fsl max {worst:.1e} over {records} runs"
    ))
}

fn criterion_5() -> Outcome {
    let f = fixture();
    let m = f.outcome.zero_shot.as_ref().ok_or("no zero-shot matrix")?;
    if m.sources.len() != 3 || m.domains.len() != 3 || m.entry_count() != 9 {
        return Err(format!("expected a 3x3 matrix, got {}x{}", m.sources.len(), m.domains.len()));
    }
    let mut failures = Vec::new();
    let mut min_diag = f64::INFINITY;
    let mut min_gap = f64::INFINITY;
    for (i, row) in m.f1_rows().iter().enumerate() {
        let d = m.domains.iter().position(|x| *x == m.sources[i]).ok_or("teacher without its own column")?;
        min_diag = min_diag.min(row[d]);
        if row[d] < 0.95 {
            failures.push(format!("{} diagonal {:.4}", m.sources[i], row[d]));
        }
        for (j, v) in row.iter().enumerate().filter(|&(j, _)| j != d) {
            min_gap = min_gap.min(row[d] - v);
            if *v > row[d] - 0.20 {
                failures.push(format!("{} on {}: {v:.4} vs diagonal {:.4}", m.sources[i], m.domains[j], row[d]));
            }
        }
    }
    let detail = format!(
        "diagonal min {min_diag:.4}, smallest row gap {min_gap:.4}; whole experiment {:.0}s\n{}",
        f.elapsed.as_secs_f64(),
        m.to_table().trim_end()
    );
    if failures.is_empty() && f.elapsed < Duration::from_secs(15 * 60) {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

/// Mean (source F1, target F1, avg F1) over successful replicates.
fn cell_means(source: &str, target: &str, method: Method) -> Option<(f64, f64, f64, usize)> {
    let reports: Vec<_> = fixture()
        .outcome
        .runs
        .iter()
        .filter(|r| r.source == source && r.target == target && r.method == method)
        .map(|r| r.report.as_ref())
        .collect::<Option<Vec<_>>>()?;
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let s = reports.iter().map(|r| r.source.f1).sum::<f64>() / n;
    let t = reports.iter().map(|r| r.target.f1).sum::<f64>() / n;
    Some((s, t, (s + t) / 2.0, reports.len()))
}

fn criterion_6() -> Outcome {
    let f = fixture();
    let pairs = &f.cfg.pairs;
    if pairs.len() < 2 || f.cfg.adaptation.adapt_groups != 10 || f.cfg.replicates < 3 {
        return Err("configuration does not cover two pairs x 3 seeds x 10 groups".into());
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for p in pairs {
        let target = load_domain(&p.target);
        if target.num_groups(Split::Adapt) != 10 {
            return Err(format!("{} has {} adaptation groups", p.target, target.num_groups(Split::Adapt)));
        }
        let (Some(ft), Some(kd), Some(fr)) = (
            cell_means(&p.source, &p.target, Method::Ft),
            cell_means(&p.source, &p.target, Method::Kd),
            cell_means(&p.source, &p.target, Method::Fretal),
        ) else {
            return Err(format!("{} -> {}: missing or failed runs", p.source, p.target));
        };
        let pass = fr.2 >= ft.2 + 0.03 && fr.2 >= kd.2 && fr.0 >= ft.0 && fr.3 >= 3;
        ok &= pass;
        lines.push(format!(
            "{} -> {}: avg fretal {:.4} / ft {:.4} / kd {:.4}; source fretal {:.4} / ft {:.4} ({} seeds){}",
            p.source,
            p.target,
            fr.2,
            ft.2,
            kd.2,
            fr.0,
            ft.0,
            fr.3,
            if pass { "" } else { " <- fails" }
        ));
    }
    let per_pair = f.elapsed.as_secs_f64() / pairs.len() as f64;
    lines.push(format!("whole experiment {:.0}s (≤ 30 min per pair)", f.elapsed.as_secs_f64()));
    ok &= per_pair < 30.0 * 60.0;
    let detail = lines.join("\n    ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for p in &fixture().cfg.pairs {
        let kd = cell_means(&p.source, &p.target, Method::Kd).ok_or("missing kd runs")?;
        let fr = cell_means(&p.source, &p.target, Method::Fretal).ok_or("missing fretal runs")?;
        ok &= kd.2 <= fr.2;
        lines.push(format!("{} -> {}: kd-only avg {:.4} ≤ fretal {:.4}", p.source, p.target, kd.2, fr.2));
    }
    if ok {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fretal")).args(args).env_remove("FRETAL_OUT").output().expect("spawn fretal")
}

fn criterion_8() -> Outcome {
    let config = config_path("quick.toml");
    let config = config.to_str().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = run_cli(&["run-experiment", "--config", config, "--out", d.path().to_str().unwrap()]);
        if !out.status.success() {
            return Err(format!("run-experiment failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    for name in ["summary.csv", "summary.txt", "runs.json", "zero_shot.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        if a != b {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok("summary.csv, summary.txt, runs.json and zero_shot.csv byte-identical across two fresh runs".into())
}

fn criterion_9() -> Outcome {
    let f = fixture();
    let runs = &f.outcome.runs;
    let bad: Vec<_> = runs.iter().filter(|r| r.report.is_none() || r.source_samples_read != 0).collect();
    if runs.is_empty() || !bad.is_empty() {
        return Err(format!("{} of {} runs failed or read source samples", bad.len(), runs.len()));
    }

    // the library refuses an adaptation set that carries source-domain frames
    let teacher = load_teacher("blend");
    let mut target = load_domain("grid");
    let source = load_domain("blend");
    let g = target.groups.iter().position(|g| g.split == Split::Adapt).unwrap();
    target.groups[g].frames[0] = source.groups.iter().find(|g| g.split == Split::Adapt).unwrap().frames[0].clone();
    let lib = match adapt_student(&teacher, &target, &f.cfg.adaptation) {
        Err(e @ Error::Protocol(_)) => e.exit_code(),
        other => return Err(format!("mixed adaptation set not refused: {:?}", other.map(|a| a.trace.stop_reason))),
    };

    // the command line aborts with exit code 3 when told to adapt on source data
    let data = tempfile::tempdir().unwrap();
    let small = GeneratorConfig { n_groups: 40, frames_per_group: 2, adapt_groups: 10 };
    let spec = f.cfg.domain_specs().unwrap().into_iter().find(|s| s.name == "blend").unwrap();
    write_dataset(&generate_domain_with(&spec, &small, 1).unwrap(), data.path()).unwrap();
    let ckpt = f.out.path().join("teachers/blend.ckpt");
    let out_dir = tempfile::tempdir().unwrap();
    let out = run_cli(&[
        "adapt",
        "--teacher",
        ckpt.to_str().unwrap(),
        "--data",
        data.path().to_str().unwrap(),
        "--frames-per-group",
        "2",
        "--target",
        "blend",
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    let code = out.status.code();
    if lib != 3 || code != Some(3) {
        return Err(format!("expected exit code 3, library {lib}, command {code:?}"));
    }
    Ok(format!("0 source samples read over {} runs; source-domain adaptation exits with code 3", runs.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient finite differences", criterion_1),
        ("loss identities", criterion_2),
        ("weight copy and teacher freeze", criterion_3),
        ("feature store properties", criterion_4),
        ("zero-shot matrix", criterion_5),
        ("forgetting: fretal vs fine-tuning", criterion_6),
        ("ablation: kd-only vs fretal", criterion_7),
        ("run-experiment determinism", criterion_8),
        ("source-data abstinence", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {}: {name} — {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name} — {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
