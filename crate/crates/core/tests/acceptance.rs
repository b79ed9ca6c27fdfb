//! Acceptance suite: exact mathematical verification of every loss and
//! gradient, plus statistical reproduction of the directional training
//! claims on the default synthetic task. One test per criterion; each
//! prints a PASS line with its measured numbers.

use std::time::Instant;

use crlab_core::data::{generate_dataset, DatasetSpec};
use crlab_core::eval::{
    run_ablation_sweep, run_efficiency_experiment, run_openset_experiment, AblationAxis,
    OodPreset, DEFAULT_SEEDS,
};
use crlab_core::gradcheck::{
    check_cr_exact, check_cr_full_chain, check_cs_classweights, check_cs_features,
    check_cs_full_chain, check_loss_oracles,
};
use crlab_core::losses::{
    consistency_loss, contrastive_loss, grad_cr_exact, grad_cs_wrt_features, PseudoLabelRecord,
};
use crlab_core::model::{forward, init_params, Activation, EmaShadow, ModelSpec, ParamGrads};
use crlab_core::numerics::{dot, l2_normalize, norm2, softmax, Matrix, RngState};
use crlab_core::trainer::{cosine_lr, run, sgd_nesterov_step, OptimizerState, TrainConfig};

fn default_task(seed: u64) -> DatasetSpec {
    DatasetSpec::synthetic_default(4, 8, 4, 2000, 1000, seed)
}

/// Criterion 1: Eq. 7-8 / exact per-anchor gradients and the full-chain
/// contrastive gradient match extrapolated central differences within 1e-6
/// relative, 100 random instances each, in under 10 seconds.
#[test]
fn criterion_01_contrastive_gradient_exactness() {
    let start = Instant::now();
    let exact = check_cr_exact(100, 9001).unwrap();
    let chain = check_cr_full_chain(100, 9002).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(exact.pass, "{}: {} > {}", exact.name, exact.max_error, exact.tolerance);
    assert!(chain.pass, "{}: {} > {}", chain.name, chain.max_error, chain.tolerance);
    assert!(elapsed < 10.0, "criterion 1 took {elapsed:.1} s");
    println!(
        "PASS criterion 1: closed-form {:.3e}, full-chain {:.3e} (tol 1e-6) in {elapsed:.2} s",
        exact.max_error, chain.max_error
    );
}

/// Criterion 2: Eq. 3 per-class closed form matches brute-force term
/// accumulation within 1e-12 and the full consistency parameter gradient
/// matches finite differences within 1e-6, 100 instances, under 10 seconds.
#[test]
fn criterion_02_consistency_gradient_exactness() {
    let start = Instant::now();
    let classweights = check_cs_classweights(100, 9003).unwrap();
    let features = check_cs_features(100, 9004).unwrap();
    let chain = check_cs_full_chain(100, 9005).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    for line in [&classweights, &features, &chain] {
        assert!(line.pass, "{}: {} > {}", line.name, line.max_error, line.tolerance);
    }
    assert!(elapsed < 10.0, "criterion 2 took {elapsed:.1} s");
    println!(
        "PASS criterion 2: eq3 {:.3e} (tol 1e-12), features {:.3e}, full-chain {:.3e} (tol 1e-6) in {elapsed:.2} s",
        classweights.max_error, features.max_error, chain.max_error
    );
}

/// Criterion 3: every loss matches its naive double-loop / scalar oracle
/// within 1e-10 on 100 random instances.
#[test]
fn criterion_03_loss_oracles() {
    let lines = check_loss_oracles(100, 9006).unwrap();
    for line in &lines {
        assert!(line.pass, "{}: {} > {}", line.name, line.max_error, line.tolerance);
    }
    let worst = lines.iter().map(|l| l.max_error).fold(0.0, f64::max);
    println!("PASS criterion 3: four loss oracles agree, worst {:.3e} (tol 1e-10)", worst);
}

fn record_with(q: Vec<f64>, delta: f64) -> PseudoLabelRecord {
    let mut q_hat = 0;
    for (k, &p) in q.iter().enumerate() {
        if p > q[q_hat] {
            q_hat = k;
        }
    }
    let confidence = q[q_hat];
    PseudoLabelRecord {
        q,
        q_hat,
        confidence,
        mask_cs: confidence > delta,
        mask_cr: confidence > delta,
    }
}

/// Criterion 4: on constructed batches where an unconfident source shares
/// its pseudo-label with a confident one, the consistency gradient on the
/// unconfident views is exactly zero while the contrastive gradient on
/// their embeddings is nonzero. 20 random constructions.
#[test]
fn criterion_04_exclusion_vs_propagation() {
    let mut rng = RngState::new(9007);
    for trial in 0..20 {
        let classes = 3;
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![6],
            feature_dim: 5,
            classes,
            proj_hidden: 5,
            proj_dim: 3,
            activation: Activation::Relu,
        };
        let params = init_params(&spec, &mut rng).unwrap();
        // two sources, m = 2 views each; source 0 confident, source 1 not,
        // same pseudo-label class
        let shared = rng.index(classes);
        let mut q_conf = vec![0.01; classes];
        q_conf[shared] = 0.98;
        let mut q_unconf = vec![0.2; classes];
        q_unconf[shared] = 0.6;
        let records = vec![record_with(q_conf, 0.95), record_with(q_unconf, 0.95)];
        assert!(records[0].mask_cs && !records[1].mask_cs);
        assert_eq!(records[0].q_hat, records[1].q_hat);
        let source_of_view = [0, 0, 1, 1];
        let x = Matrix::from_vec(4, 4, (0..16).map(|_| rng.normal()).collect()).unwrap();
        let cache = forward(&params, &x).unwrap();

        let (_, grad_logits) =
            consistency_loss(&cache.logits, &records, &source_of_view).unwrap();
        let minus_features =
            grad_cs_wrt_features(&cache.logits, &records, &source_of_view, &params.classifier)
                .unwrap();
        for v in [2usize, 3] {
            assert!(
                grad_logits.row(v).iter().all(|&g| g == 0.0),
                "trial {trial}: masked view {v} has nonzero consistency logit gradient"
            );
            assert!(
                minus_features.row(v).iter().all(|&g| g == 0.0),
                "trial {trial}: masked view {v} has nonzero consistency feature gradient"
            );
        }
        let (_, grad_z) = contrastive_loss(&cache.z, &records, &source_of_view, 0.5).unwrap();
        for v in [2usize, 3] {
            assert!(
                norm2(grad_z.row(v)) > 1e-8,
                "trial {trial}: unconfident view {v} received no contrastive gradient"
            );
        }
    }
    println!("PASS criterion 4: exclusion (R_CS) vs propagation (R_CR) on 20 constructions");
}

/// Criterion 5: free-embedding gradient descent on one anchor's contrastive
/// term with an all-positive set reaches the uniform-score optimality
/// condition |s - 1/|P|| < 1e-4 within 1e4 steps, from 10 random starts.
#[test]
fn criterion_05_optimality_fixed_point() {
    let mut rng = RngState::new(9008);
    for trial in 0..10 {
        let n = 4 + rng.index(4); // 4..=7 views, all one cluster
        let dim = 3;
        let mut h = Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.normal()).collect()).unwrap();
        let anchor = 0;
        let positives: Vec<usize> = (1..n).collect();
        let inv_p = 1.0 / positives.len() as f64;
        let lr = 0.5;
        let mut converged_at = None;
        for step in 0..10_000 {
            // current softmax scores of the anchor row
            let sims: Vec<f64> = (0..n)
                .map(|v| if v == anchor { f64::NEG_INFINITY } else { dot(h.row(anchor), h.row(v)) })
                .collect();
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> =
                sims.iter().map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() }).collect();
            let denom: f64 = exps.iter().sum();
            let worst = positives
                .iter()
                .map(|&p| (exps[p] / denom - inv_p).abs())
                .fold(0.0, f64::max);
            if worst < 1e-4 {
                converged_at = Some(step);
                break;
            }
            let grads = grad_cr_exact(&h, anchor, &positives, 1.0).unwrap();
            for (v, minus) in grads.minus_grad.iter().enumerate() {
                for (x, g) in h.row_mut(v).iter_mut().zip(minus) {
                    *x += lr * g;
                }
            }
        }
        assert!(converged_at.is_some(), "trial {trial}: no convergence in 1e4 steps");
    }
    println!("PASS criterion 5: uniform-score fixed point reached on 10 random starts");
}

/// Criteria 6 and 7 share one experiment: matched cs-only / cs+cr arms on
/// the default task, 5 seeds, 20000 steps.
///
/// 6: the cs+cr arm reaches the cs-only arm's final EMA accuracy within half
///    the steps on at least 4 of 5 seeds.
/// 7: silhouette(cs+cr) >= silhouette(cs-only) at every checkpoint after the
///    first 10% of steps on at least 4 of 5 seeds.
/// Also asserts the EMA-smoothing property (variance of EMA accuracy deltas
/// <= variance of raw deltas) on a majority of arms.
#[test]
fn criterion_06_07_efficiency_and_clustering() {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let data = default_task(0);
    let report = run_efficiency_experiment(&cfg, &data, &DEFAULT_SEEDS, 1).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let per_seed = report.findings["per_seed"].as_array().unwrap();
    let mut crossover_ok = 0;
    let mut silhouette_ok = 0;
    for seed in per_seed {
        let frac = seed["crossover_fraction"].as_f64();
        if frac.map_or(false, |f| f <= 0.5) {
            crossover_ok += 1;
        }
        if seed["silhouette_dominates"].as_bool().unwrap_or(false) {
            silhouette_ok += 1;
        }
        println!(
            "  seed {}: cs final {:.4}, cs+cr final {:.4}, crossover {:?}, silhouette dominates {}",
            seed["seed"],
            seed["cs_final_acc_ema"].as_f64().unwrap(),
            seed["cr_final_acc_ema"].as_f64().unwrap(),
            frac,
            seed["silhouette_dominates"]
        );
    }

    // EMA smoothing on the cs+cr arms
    let mut smooth_ok = 0;
    for arm in report.arms.iter().filter(|a| a.loss_mode == "cs+cr") {
        let rows = &arm.metrics.rows;
        let deltas = |vals: Vec<f64>| -> f64 {
            let d: Vec<f64> = vals.windows(2).map(|w| w[1] - w[0]).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64
        };
        let raw_var = deltas(rows.iter().map(|r| r.acc_raw).collect());
        let ema_var = deltas(rows.iter().map(|r| r.acc_ema).collect());
        if ema_var <= raw_var {
            smooth_ok += 1;
        }
    }

    assert!(crossover_ok >= 4, "criterion 6: only {crossover_ok}/5 seeds crossed within half the steps");
    assert!(silhouette_ok >= 4, "criterion 7: only {silhouette_ok}/5 seeds kept silhouette dominance");
    assert!(smooth_ok >= 4, "EMA smoothing failed on {}/5 arms", 5 - smooth_ok);
    println!(
        "PASS criterion 6: crossover within 50% of steps on {crossover_ok}/5 seeds ({elapsed:.0} s total)"
    );
    println!("PASS criterion 7: silhouette dominance after 10% of steps on {silhouette_ok}/5 seeds");
}

/// Criterion 8: far-OOD injection at {0, 0.5x, 1x, 2x} of the unlabeled
/// count degrades cs+cr no more than cs-only on at least 4 of 5 seeds.
#[test]
fn criterion_08_open_set_robustness() {
    let cfg = TrainConfig { steps: 4000, ..TrainConfig::default() };
    let data = default_task(0);
    let counts = [0, 1000, 2000, 4000];
    let report =
        run_openset_experiment(&cfg, &data, OodPreset::Far, &counts, &DEFAULT_SEEDS, 1).unwrap();
    let robust = report.findings["seeds_where_cr_degrades_no_more"].as_u64().unwrap();
    for seed in report.findings["per_seed"].as_array().unwrap() {
        println!(
            "  seed {}: cs-only degradation {:.4}, cs+cr degradation {:.4}",
            seed["seed"],
            seed["cs_only_degradation"].as_f64().unwrap(),
            seed["cs_cr_degradation"].as_f64().unwrap()
        );
    }
    assert!(robust >= 4, "criterion 8: cs+cr was more robust on only {robust}/5 seeds");
    println!("PASS criterion 8: cs+cr degrades no more than cs-only on {robust}/5 seeds");
}

/// Criterion 9: replacing contrastive regularization with unsupervised
/// NT-Xent lowers final accuracy on at least 4 of 5 seeds.
#[test]
fn criterion_09_ntxent_ablation_direction() {
    let cfg = TrainConfig { steps: 6000, ..TrainConfig::default() };
    let data = default_task(0);
    let values = vec!["cs+cr".to_string(), "cs+ntxent".to_string()];
    let report =
        run_ablation_sweep(&cfg, &data, AblationAxis::LossMode, &values, &DEFAULT_SEEDS, 1)
            .unwrap();
    let table = report.findings["table"].as_array().unwrap();
    let mut worse = 0;
    for seeds in table.chunks(2) {
        let cr = seeds[0]["final_acc_ema"].as_f64().unwrap();
        let nt = seeds[1]["final_acc_ema"].as_f64().unwrap();
        println!("  seed {}: cs+cr {:.4}, cs+ntxent {:.4}", seeds[0]["seed"], cr, nt);
        if nt < cr {
            worse += 1;
        }
    }
    assert!(worse >= 4, "criterion 9: nt-xent was worse on only {worse}/5 seeds");
    println!("PASS criterion 9: cs+ntxent < cs+cr final accuracy on {worse}/5 seeds");
}

/// Criterion 10: with both thresholds at 0 every logged mask ratio is
/// exactly 1.0; with delta = 0.95 and K = 4 at initialization the mask
/// ratio at step 0 is exactly 0.0.
#[test]
fn criterion_10_threshold_ablation_structure() {
    let data = default_task(3);
    let dataset = generate_dataset(&data).unwrap();
    let open = TrainConfig {
        delta: 0.0,
        delta_prime: 0.0,
        steps: 300,
        eval_interval: 50,
        ..TrainConfig::default()
    };
    let result = run(&open, &dataset).unwrap();
    for row in &result.metrics.rows {
        assert_eq!(row.mask_cs, 1.0, "step {}: mask_cs {}", row.step, row.mask_cs);
        assert_eq!(row.mask_cr, 1.0, "step {}: mask_cr {}", row.step, row.mask_cr);
    }
    let default_run = run(&TrainConfig { steps: 0, ..TrainConfig::default() }, &dataset).unwrap();
    assert_eq!(default_run.metrics.rows[0].mask_cs, 0.0);
    println!(
        "PASS criterion 10: masks identically 1.0 with thresholds 0 ({} checkpoints); mask 0.0 at init with delta 0.95",
        result.metrics.rows.len()
    );
}

/// Criterion 11: identical seed and config produce byte-identical metric
/// CSVs.
#[test]
fn criterion_11_determinism() {
    let data = default_task(5);
    let dataset = generate_dataset(&data).unwrap();
    let cfg = TrainConfig { steps: 400, eval_interval: 100, ..TrainConfig::default() };
    let a = run(&cfg, &dataset).unwrap().metrics.to_csv();
    let b = run(&cfg, &dataset).unwrap().metrics.to_csv();
    assert_eq!(a.as_bytes(), b.as_bytes());
    println!("PASS criterion 11: two runs produced byte-identical CSVs ({} bytes)", a.len());
}

/// Criterion 12: the spec'd unit examples reproduce their stated values.
#[test]
fn criterion_12_unit_exactness() {
    // softmax
    let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
    assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let p = softmax(&[2.0_f64.ln(), 0.0, 0.0]).unwrap();
    assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    // normalize
    assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    // EMA single step and geometric decay
    let spec = ModelSpec { input_dim: 1, hidden: vec![], feature_dim: 1, classes: 1, proj_hidden: 1, proj_dim: 1, activation: Activation::Identity };
    let mut zero = init_params(&spec, &mut RngState::new(0)).unwrap();
    for t in zero.tensors_mut() {
        for v in t {
            *v = 0.0;
        }
    }
    let mut one = zero.clone();
    for t in one.tensors_mut() {
        for v in t {
            *v = 1.0;
        }
    }
    let mut ema = EmaShadow::new(&zero, 0.999);
    ema.update(&one).unwrap();
    assert!(ema.params.tensors().iter().all(|t| t.iter().all(|v| (v - 0.001).abs() < 1e-15)));
    let mut ema = EmaShadow::new(&zero, 0.9);
    for _ in 0..30 {
        ema.update(&one).unwrap();
    }
    let expect = 1.0 + (0.0 - 1.0) * 0.9_f64.powi(30);
    assert!(ema.params.tensors().iter().all(|t| t.iter().all(|v| (v - expect).abs() < 1e-12)));
    // cosine schedule
    assert_eq!(cosine_lr(0, 10, 0.03).unwrap(), 0.03);
    assert!((cosine_lr(10, 10, 1.0).unwrap() - 0.19509032201612833).abs() < 1e-12);
    assert!((cosine_lr(5, 10, 1.0).unwrap() - 0.773010453362737).abs() < 1e-12);
    // nesterov hand step: p=1, g=1, v=0, beta=0.9, lr=0.1 -> 0.81
    let mut params = one.clone();
    let mut grads = ParamGrads::zeros_like(&params);
    for t in grads.tensors_mut() {
        for v in t {
            *v = 1.0;
        }
    }
    let mut opt = OptimizerState::new(&params);
    sgd_nesterov_step(&mut params, &grads, &mut opt, 0.1, 0.9, 0.0).unwrap();
    assert!(params.tensors().iter().all(|t| t.iter().all(|v| (v - 0.81).abs() < 1e-15)));
    println!("PASS criterion 12: softmax, normalize, EMA, cosine-LR, Nesterov examples exact");
}
