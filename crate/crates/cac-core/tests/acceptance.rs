//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (run with `--nocapture` to see them all).
//!
//! A1  loss-oracle equivalence on random instances (1e-12)
//! A2  analytic vs finite-difference gradients through the network (1e-6)
//! A3  end-to-end adaptation gain on the default benchmark
//! A4  component-ablation ordering
//! A5  decay-factor benefit under class imbalance
//! A6  macro-average metric check against published per-class values
//! A7  mask/bank property suite (>= 1000 randomized configurations)
//! A8  neighborhood purity of pretrained target banks
//! A9  bank-fraction robustness

use cac_core::banks::{init_banks, Banks};
use cac_core::config::TrainConfig;
use cac_core::data::{generate_two_domain_blobs, DomainTag, LabeledDataset};
use cac_core::harness::{
    evaluate, macro_average, pretrain_source, run_ablation, run_benchmark, sweep_param,
    SweepParam,
};
use cac_core::losses::{build_similarity_mask, cac_loss, multi_positive_nce, LossMode, MaskMatrix};
use cac_core::matrix::{l2_normalize_rows, Matrix};
use cac_core::model::{
    backward_from_logits, backward_from_probs, cross_entropy, finite_difference_grad,
    forward_cached, ModelParams,
};
use cac_core::rng::Rng;
use std::collections::BTreeSet;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Independent helpers (kept separate from the library's internals).
// ---------------------------------------------------------------------------

fn random_simplex_rows(rows: usize, classes: usize, rng: &mut Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..classes).map(|_| rng.uniform(0.05, 1.0)).collect();
        let sum: f64 = raw.iter().sum();
        data.extend(raw.into_iter().map(|v| v / sum));
    }
    Matrix::from_vec(rows, classes, data).unwrap()
}

fn random_banks(n: usize, classes: usize, k: usize, rng: &mut Rng) -> Banks {
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0) + 0.05).collect())
        .collect();
    let features = l2_normalize_rows(&Matrix::from_rows(&raw).unwrap()).unwrap();
    let predictions = random_simplex_rows(n, classes, rng);
    let neighbors = (0..n)
        .map(|i| {
            let mut pool: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            rng.shuffle(&mut pool);
            pool.truncate(k);
            pool
        })
        .collect();
    Banks::from_parts(features, predictions, neighbors, (0..n).collect(), n, k).unwrap()
}

/// Naive scoring of one mini-batch: three explicit loops, no vectorization,
/// gradient accumulated one scalar product at a time.
fn naive_loss(
    probs: &Matrix,
    indices: &[usize],
    banks: &Banks,
    mask: &MaskMatrix,
    alpha: f64,
    mode: LossMode,
) -> (f64, Matrix) {
    let s = probs.rows();
    let c = probs.cols();
    let scale = 1.0 / s as f64;
    let mut pos = 0.0;
    let mut neg = 0.0;
    let mut grad = Matrix::zeros(s, c);
    for i in 0..s {
        if let Some(nbrs) = banks.neighbor_row(indices[i]) {
            for &j in nbrs {
                let p = banks.prediction_row(j).unwrap();
                for col in 0..c {
                    pos += probs[(i, col)] * p[col];
                    if mode != LossMode::NegOnly {
                        grad[(i, col)] -= scale * p[col];
                    }
                }
            }
        }
        for b in 0..s {
            if b == i || mask.entry(i, b) == 0 {
                continue;
            }
            if let Some(nbrs) = banks.neighbor_row(indices[b]) {
                for &h in nbrs {
                    let p = banks.prediction_row(h).unwrap();
                    for col in 0..c {
                        neg += probs[(i, col)] * p[col];
                        if mode != LossMode::PosOnly {
                            grad[(i, col)] += scale * alpha * p[col];
                        }
                    }
                }
            }
        }
    }
    let pos_term = if mode == LossMode::NegOnly { 0.0 } else { scale * pos };
    let neg_term = if mode == LossMode::PosOnly { 0.0 } else { scale * neg };
    (alpha * neg_term - pos_term, grad)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn acceptance_a1_loss_oracle_equivalence() {
    let start = Instant::now();
    let mut worst_value: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut instances = 0;
    for seed in 0..120u64 {
        let mut rng = Rng::new(seed.wrapping_mul(0x9E37_79B9));
        let n = 6 + rng.below(27); // <= 32
        let k = 1 + rng.below(4.min(n - 2)); // <= 4
        let classes = 2 + rng.below(4); // <= 5
        let s = 2 + rng.below(7.min(n)); // <= 8
        let banks = random_banks(n, classes, k, &mut rng);
        let probs = random_simplex_rows(s, classes, &mut rng);
        let mut pool: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut pool);
        let batch: Vec<usize> = pool[..s].to_vec();
        let mask = build_similarity_mask(&batch, &banks).unwrap();
        let alpha = rng.uniform(0.0, 1.0);
        for mode in [LossMode::Full, LossMode::PosOnly, LossMode::NegOnly] {
            let fast = cac_loss(&probs, &batch, &banks, &mask, alpha, mode).unwrap();
            let (value, grad) = naive_loss(&probs, &batch, &banks, &mask, alpha, mode);
            worst_value = worst_value.max((fast.total - value).abs());
            for (a, b) in fast.grad_wrt_batch_probs.data().iter().zip(grad.data()) {
                worst_grad = worst_grad.max((a - b).abs());
            }
            instances += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(instances >= 100);
    assert!(worst_value < 1e-12, "value gap {worst_value:e}");
    assert!(worst_grad < 1e-12, "gradient gap {worst_grad:e}");
    assert!(elapsed < 10.0, "took {elapsed:.1}s");
    println!(
        "[A1] PASS loss-oracle equivalence: {instances} instances, \
         max |value gap| {worst_value:.2e}, max |grad gap| {worst_grad:.2e}, {elapsed:.2}s"
    );
}

#[test]
fn acceptance_a2_gradient_correctness() {
    let start = Instant::now();
    // 3-8-6-3 network: 107 parameters.
    let params = ModelParams::init(3, 8, 6, 3, 424_242).unwrap();
    assert!(params.param_count() <= 500);

    let mut rng = Rng::new(7);
    let points: Vec<Vec<f64>> = (0..16)
        .map(|_| (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let dataset = LabeledDataset::new(
        Matrix::from_rows(&points).unwrap(),
        labels.clone(),
        3,
        DomainTag::Target,
    )
    .unwrap();
    let banks = init_banks(&params, &dataset, 3, 1.0, 0).unwrap();

    let batch: Vec<usize> = vec![0, 4, 7, 11, 14];
    let x = dataset.x.gather_rows(&batch);
    let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
    let mask = build_similarity_mask(&batch, &banks).unwrap();
    let eps = 1e-5;

    let check = |name: &str, analytic: &[f64], numeric: &[f64]| {
        let mut worst = 0.0f64;
        for (i, (a, b)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(
                rel < 1e-6 || (a - b).abs() < 1e-9,
                "{name} param {i}: analytic {a} vs numeric {b} (rel {rel:e})"
            );
            worst = worst.max(rel);
        }
        worst
    };

    let mut report = Vec::new();

    // Cross-entropy.
    {
        let cache = forward_cached(&params, &x).unwrap();
        let (_, dlogits) = cross_entropy(&cache.probs, &batch_labels).unwrap();
        let analytic = backward_from_logits(&params, &cache, &dlogits).unwrap();
        let numeric = finite_difference_grad(
            |p| {
                let cache = forward_cached(p, &x)?;
                Ok(cross_entropy(&cache.probs, &batch_labels)?.0)
            },
            &params,
            eps,
        )
        .unwrap();
        report.push(("cross_entropy", check("cross_entropy", &analytic.to_flat(), &numeric.to_flat())));
    }

    // Contrastive loss, all three modes.
    for (mode, name) in [
        (LossMode::Full, "cac_full"),
        (LossMode::PosOnly, "cac_pos"),
        (LossMode::NegOnly, "cac_neg"),
    ] {
        let cache = forward_cached(&params, &x).unwrap();
        let out = cac_loss(&cache.probs, &batch, &banks, &mask, 0.7, mode).unwrap();
        let analytic = backward_from_probs(&params, &cache, &out.grad_wrt_batch_probs).unwrap();
        let numeric = finite_difference_grad(
            |p| {
                let cache = forward_cached(p, &x)?;
                Ok(cac_loss(&cache.probs, &batch, &banks, &mask, 0.7, mode)?.total)
            },
            &params,
            eps,
        )
        .unwrap();
        report.push((name, check(name, &analytic.to_flat(), &numeric.to_flat())));
    }

    // Multi-positive NCE.
    {
        let cache = forward_cached(&params, &x).unwrap();
        let (_, dprobs) = multi_positive_nce(&cache.probs, &batch, &banks).unwrap();
        let analytic = backward_from_probs(&params, &cache, &dprobs).unwrap();
        let numeric = finite_difference_grad(
            |p| {
                let cache = forward_cached(p, &x)?;
                Ok(multi_positive_nce(&cache.probs, &batch, &banks)?.0)
            },
            &params,
            eps,
        )
        .unwrap();
        report.push(("nce", check("nce", &analytic.to_flat(), &numeric.to_flat())));
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "took {elapsed:.1}s");
    let detail: Vec<String> = report
        .iter()
        .map(|(name, worst)| format!("{name} {worst:.1e}"))
        .collect();
    println!(
        "[A2] PASS gradient correctness ({} params): worst rel err {} in {elapsed:.2}s",
        params.param_count(),
        detail.join(", ")
    );
}

#[test]
fn acceptance_a3_end_to_end_adaptation_gain() {
    let start = Instant::now();
    let config = TrainConfig::default();
    let seeds = config.resolved_seeds();
    let mut source_accs = Vec::new();
    let mut adapted_accs = Vec::new();
    for &seed in &seeds {
        let run = run_benchmark(&config, seed).unwrap();
        source_accs.push(run.source_only.avg);
        adapted_accs.push(run.adapted.avg);
    }
    let source_mean = mean(&source_accs);
    let adapted_mean = mean(&adapted_accs);
    let gain = adapted_mean - source_mean;
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        gain >= 10.0,
        "gain {gain:.2} < 10 (source {source_mean:.2}, adapted {adapted_mean:.2}, per-seed {adapted_accs:?})"
    );
    assert!(
        adapted_mean >= 90.0,
        "adapted mean {adapted_mean:.2} < 90 (per-seed {adapted_accs:?})"
    );
    assert!(elapsed < 60.0, "took {elapsed:.1}s");
    println!(
        "[A3] PASS adaptation gain: source-only {source_mean:.2}% -> adapted {adapted_mean:.2}% \
         (+{gain:.2} points, 5 seeds, {elapsed:.1}s)"
    );
}

#[test]
fn acceptance_a4_ablation_trend() {
    let config = TrainConfig::ablation_benchmark();
    let rows = run_ablation(&config).unwrap();
    assert_eq!(rows.len(), 4);
    let neg = rows[0].mean_final_avg;
    let pos = rows[1].mean_final_avg;
    let both = rows[2].mean_final_avg;
    let with_mask = rows[3].mean_final_avg;
    assert!(
        neg < pos,
        "neg_only {neg:.2} should trail pos_only {pos:.2}"
    );
    assert!(
        pos < both,
        "pos_only {pos:.2} should trail pos+neg {both:.2}"
    );
    assert!(
        with_mask >= both - 1.0,
        "pos+neg+wsim {with_mask:.2} fell more than 1 point below pos+neg {both:.2}"
    );
    println!(
        "[A4] PASS ablation trend: neg {neg:.2} < pos {pos:.2} < pos+neg {both:.2}, \
         +wsim {with_mask:.2} >= {:.2}",
        both - 1.0
    );
}

#[test]
fn acceptance_a5_decay_factor_benefit() {
    // Imbalanced target: one class holds half the mass.
    let mut config = TrainConfig::ablation_benchmark();
    config.shift.target_proportions = Some(vec![0.5, 0.125, 0.125, 0.125, 0.125]);
    let rows = sweep_param(&config, SweepParam::Beta, &[0.0, 5.0]).unwrap();
    let beta0 = &rows[0];
    let beta5 = &rows[1];

    assert!(
        beta5.mean_final_avg >= beta0.mean_final_avg,
        "beta=5 mean {:.2} below beta=0 mean {:.2}",
        beta5.mean_final_avg,
        beta0.mean_final_avg
    );

    // Late-stage degradation signature without the decay: the final value
    // sits at least one point under the curve's own peak.
    let mut degraded = 0;
    for curve in &beta0.per_seed_curves {
        let peak = curve.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        let last = curve.last().unwrap().1;
        if last <= peak - 1.0 {
            degraded += 1;
        }
    }
    assert!(
        degraded >= 3,
        "beta=0 degraded in only {degraded} of {} seeds",
        beta0.per_seed_curves.len()
    );
    println!(
        "[A5] PASS decay-factor benefit: beta=0 {:.2}% (late degradation in {degraded}/5 seeds) \
         vs beta=5 {:.2}%",
        beta0.mean_final_avg, beta5.mean_final_avg
    );
}

#[test]
fn acceptance_a6_paper_metric_check() {
    let per_class = [
        96.9, 91.0, 83.3, 72.3, 96.9, 96.1, 90.7, 81.6, 95.1, 92.9, 92.0, 63.2,
    ];
    let avg = macro_average(&per_class);
    assert!(
        (avg - 87.7).abs() <= 0.05,
        "macro average {avg} not within 0.05 of 87.7"
    );
    println!("[A6] PASS paper metric check: macro average {avg:.4} within 0.05 of 87.7");
}

#[test]
fn acceptance_a7_mask_and_bank_property_suite() {
    let start = Instant::now();
    let mut configurations = 0;
    for seed in 0..1000u64 {
        let mut rng = Rng::new(seed.wrapping_mul(0x1234_5677).wrapping_add(1));
        let n = 8 + rng.below(33);
        let dim = 2 + rng.below(4);
        let k = 1 + rng.below(4.min(n - 2));
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let classes = 2 + rng.below(3);
        // Random linear extractor: full rank with probability one, so no
        // input can land on a zero feature row.
        let feature_dim = 4;
        let extractor = vec![cac_core::model::DenseLayer::new(
            Matrix::from_vec(
                dim,
                feature_dim,
                (0..dim * feature_dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap(),
            vec![0.0; feature_dim],
            cac_core::model::Activation::Identity,
        )
        .unwrap()];
        let classifier = cac_core::model::DenseLayer::new(
            Matrix::from_vec(
                feature_dim,
                classes,
                (0..feature_dim * classes).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap(),
            vec![0.0; classes],
            cac_core::model::Activation::Identity,
        )
        .unwrap();
        let model = ModelParams::from_layers(extractor, classifier).unwrap();
        let dataset = LabeledDataset::new(
            Matrix::from_rows(&points).unwrap(),
            (0..n).map(|i| i % classes).collect(),
            classes,
            DomainTag::Target,
        )
        .unwrap();
        let mut banks = init_banks(&model, &dataset, k, 1.0, seed).unwrap();

        // A couple of random batch updates.
        for _ in 0..2 {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let batch: Vec<usize> = order[..4.min(n)].to_vec();
            let x = dataset.x.gather_rows(&batch);
            let cache = forward_cached(&model, &x).unwrap();
            let feats = l2_normalize_rows(&cache.features).unwrap();
            banks.update(&batch, &feats, &cache.probs).unwrap();
        }

        // N-row invariants (distinct, in-range, non-self, length K).
        banks.validate().unwrap();

        // Exhaustive-sort oracle for topk on a fresh query set.
        let queries: Vec<usize> = (0..4.min(n)).collect();
        let q = Matrix::from_rows(
            &queries
                .iter()
                .map(|&i| banks.feature_row(i).unwrap().to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let got = banks.topk_neighbors(&q, k, &queries).unwrap();
        for (slot, &query_idx) in queries.iter().enumerate() {
            let mut scored: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != query_idx)
                .map(|j| {
                    let f = banks.feature_row(j).unwrap();
                    let d = q
                        .row(slot)
                        .iter()
                        .zip(f)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                    (d, j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = scored[..k].iter().map(|&(_, j)| j).collect();
            assert_eq!(got[slot], expected, "seed {seed} query {query_idx}");
        }

        // Mask zeroing matches the membership rule.
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let batch: Vec<usize> = order[..(2 + rng.below(6.min(n - 1)))].to_vec();
        let mask = build_similarity_mask(&batch, &banks).unwrap();
        for (i, &bi) in batch.iter().enumerate() {
            let direct: BTreeSet<usize> =
                banks.neighbor_row(bi).unwrap().iter().copied().collect();
            let expanded = banks.expanded_neighbors(bi).unwrap();
            for (j, &bj) in batch.iter().enumerate() {
                if i == j {
                    continue;
                }
                let expected = direct.contains(&bj) || expanded.contains(&bj);
                assert_eq!(
                    mask.entry(i, j) == 0,
                    expected,
                    "seed {seed} anchor {bi} member {bj}"
                );
            }
        }
        configurations += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(configurations >= 1000);
    assert!(elapsed < 30.0, "took {elapsed:.1}s");
    println!(
        "[A7] PASS mask/bank property suite: {configurations} configurations in {elapsed:.1}s"
    );
}

#[test]
fn acceptance_a8_neighborhood_purity() {
    let config = TrainConfig::default();
    let mut purities = Vec::new();
    for &seed in &config.resolved_seeds() {
        let seeded = config.with_seed(seed);
        let (source, target) = generate_two_domain_blobs(&seeded.shift).unwrap();
        let model = pretrain_source(&seeded, &source).unwrap();
        let banks = init_banks(&model, &target, 3, 1.0, seed).unwrap();
        purities.push(banks.neighborhood_purity(&target.y));
    }
    let mean_purity = mean(&purities);
    assert!(
        mean_purity >= 0.95,
        "mean purity {mean_purity:.4} below 0.95 (per-seed {purities:?})"
    );
    println!(
        "[A8] PASS neighborhood purity: mean {mean_purity:.4} over 5 seeds (min {:.4})",
        purities.iter().cloned().fold(f64::INFINITY, f64::min)
    );
}

#[test]
fn acceptance_a9_bank_fraction_robustness() {
    let full_config = TrainConfig::default();
    let mut partial_config = TrainConfig::default();
    partial_config.bank_fraction = 0.3;

    let seeds = full_config.resolved_seeds();
    let mut full = Vec::new();
    let mut partial = Vec::new();
    for &seed in &seeds {
        full.push(run_benchmark(&full_config, seed).unwrap().adapted.avg);
        partial.push(run_benchmark(&partial_config, seed).unwrap().adapted.avg);
    }
    let full_mean = mean(&full);
    let partial_mean = mean(&partial);
    assert!(
        partial_mean >= full_mean - 2.0,
        "bank fraction 0.3 lost {:.2} points ({partial_mean:.2} vs {full_mean:.2})",
        full_mean - partial_mean
    );
    println!(
        "[A9] PASS bank-fraction robustness: fraction 1.0 {full_mean:.2}% vs 0.3 {partial_mean:.2}% \
         (drop {:.2} <= 2 points)",
        full_mean - partial_mean
    );
}
