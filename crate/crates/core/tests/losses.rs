mod common;

use common::{randn, tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmi_core::data::{Dataset, GeneratorConfig, Split};
use stmi_core::harness::train::{make_batch, token_masks};
use stmi_core::model::{ModelConfig, Stmi};
use stmi_core::objectives::{ce_label_smooth, triplet_batch_hard};
use stmi_core::params::Graph;
use stmi_core::sfm::{EncoderConfig, Mode};
use stmi_core::{Tape, Tensor};

fn ce_oracle(logits: &[Vec<f64>], labels: &[usize], eps: f64) -> f64 {
    let c = logits[0].len() as f64;
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        for (k, v) in row.iter().enumerate() {
            let q = if k == y { 1.0 - eps + eps / c } else { eps / c };
            total -= q * (v - lse);
        }
    }
    total / logits.len() as f64
}

fn triplet_oracle(f: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let d = |a: usize, b: usize| f[a].iter().zip(&f[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = f.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max(margin + d(a, p) - d(a, q));
            }
        }
        total += worst.max(0.0);
    }
    total / n as f64
}

fn random_labels<R: Rng>(ids: usize, per: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..ids).flat_map(|i| std::iter::repeat_n(i, per)).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    labels
}

#[test]
fn cross_entropy_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (rows, classes) = (rng.random_range(1..8), rng.random_range(2..10));
        let logits = randn(rows, classes, &mut rng);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let eps = rng.random_range(0.0..0.5);
        let tape = Tape::new();
        let got = ce_label_smooth(&tape.constant(tensor(&logits)), &labels, eps).unwrap().value().data()[0];
        assert!((got - ce_oracle(&logits, &labels, eps)).abs() < 1e-10);
    }
}

#[test]
fn uniform_logits_give_log_class_count() {
    for c in [2usize, 3, 8, 201] {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::full(&[4, c], 1.7));
        let got = ce_label_smooth(&logits, &[0, 1, 1, 0], 0.1).unwrap().value().data()[0];
        assert!((got - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn triplet_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (ids, per) = (rng.random_range(2..5), rng.random_range(2..5));
        let labels = random_labels(ids, per, &mut rng);
        let f = randn(labels.len(), rng.random_range(1..6), &mut rng);
        let margin = rng.random_range(0.0..2.0);
        let tape = Tape::new();
        let got = triplet_batch_hard(&tape.constant(tensor(&f)), &labels, margin).unwrap().value().data()[0];
        assert!((got - triplet_oracle(&f, &labels, margin)).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn cross_entropy_ignores_row_shift(seed in any::<u64>(), shift in -30.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = randn(3, 5, &mut rng);
        let shifted: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let tape = Tape::new();
        let a = ce_label_smooth(&tape.constant(tensor(&logits)), &[0, 4, 2], 0.1).unwrap().value().data()[0];
        let b = ce_label_smooth(&tape.constant(tensor(&shifted)), &[0, 4, 2], 0.1).unwrap().value().data()[0];
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn triplet_ignores_translation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(3, 3, &mut rng);
        let f = randn(9, 4, &mut rng);
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let moved: Vec<Vec<f64>> = f.iter().map(|r| r.iter().zip(&t).map(|(a, b)| a + b).collect()).collect();
        let tape = Tape::new();
        let a = triplet_batch_hard(&tape.constant(tensor(&f)), &labels, 0.3).unwrap().value().data()[0];
        let b = triplet_batch_hard(&tape.constant(tensor(&moved)), &labels, 0.3).unwrap().value().data()[0];
        prop_assert!((a - b).abs() < 1e-10);
    }
}

fn micro(seed: u64) -> (Stmi, stmi_core::ParamSet, stmi_core::model::Batch) {
    let gen = GeneratorConfig {
        num_ids: 3,
        per_id: 4,
        image_size: 8,
        channels: 3,
        blob_size: 6,
        clutter: 0.5,
        text_dim: 8,
        seed,
    };
    let data = Dataset::synthesize(&gen).unwrap();
    let masks = token_masks(&data, 4, 0.5).unwrap();
    let batch = make_batch(&data, &masks, &data.indices(Split::Train)).unwrap();
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            depth: 1,
            heads: 2,
            dim: 8,
        },
        num_queries: 2,
        tau: 0.5,
        chi_depth: 1,
        num_classes: 3,
        sfm: true,
        str_tokens: true,
        chi: true,
        margin: 0.3,
        label_smoothing: 0.1,
    };
    let (model, ps) = Stmi::new(cfg, seed).unwrap();
    (model, ps, batch)
}

#[test]
fn total_loss_is_non_negative() {
    for seed in 0..10 {
        let (model, ps, batch) = micro(seed);
        let tape = Tape::new();
        let g = Graph::new(&tape, &ps);
        let fwd = model.forward(&g, &batch, &mut Mode::Eval).unwrap();
        let terms = model.loss(&g, &fwd, &batch.labels).unwrap();
        assert_eq!(terms.terms.len(), 6);
        assert!(terms.total.value().data()[0] >= 0.0);
        for (name, t) in &terms.terms {
            assert!(t.value().data()[0] >= 0.0, "{name}");
        }
    }
}

#[test]
fn collapsed_model_loss_is_three_times_log_classes_plus_margin() {
    let (model, mut ps, mut batch) = micro(4);
    for id in ps.ids().collect::<Vec<_>>() {
        if !ps.name(id).ends_with(".str.queries") {
            let shape = ps.get(id).shape().to_vec();
            ps.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let row = batch.text.row(0).to_vec();
    let rows: Vec<&[f64]> = (0..batch.len()).map(|_| row.as_slice()).collect();
    batch.text = Tensor::from_rows(&rows).unwrap();
    let tape = Tape::new();
    let g = Graph::new(&tape, &ps);
    let fwd = model.forward(&g, &batch, &mut Mode::Eval).unwrap();
    let total = model.loss(&g, &fwd, &batch.labels).unwrap().total.value().data()[0];
    let want = 3.0 * (3f64.ln() + 0.3);
    assert!((total - want).abs() < 1e-12, "{total} vs {want}");
}
