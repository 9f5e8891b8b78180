//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Tolerances are pinned below.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{ap_brute, mat, max_abs_diff, randn, tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmi_core::chi::{build_hyperedges, hypergraph_conv};
use stmi_core::container::{StoredTensor, TensorData};
use stmi_core::data::{Dataset, GeneratorConfig, Split};
use stmi_core::harness::ablate::ablate;
use stmi_core::harness::grad_check::{micro_config, GradCheckSetup};
use stmi_core::harness::train::{make_batch, token_masks};
use stmi_core::harness::{checkpoint, RunConfig, Trainer};
use stmi_core::masks::{interaction_mask, TokenMask};
use stmi_core::metrics::{evaluate, DistanceKind, EvalSet};
use stmi_core::model::{Batch, ModelConfig, Stmi};
use stmi_core::objectives::{ce_label_smooth, triplet_batch_hard};
use stmi_core::params::Graph;
use stmi_core::rng::stream;
use stmi_core::sfm::{modulated_attention, modulation, Encoder, EncoderConfig, Mode};
use stmi_core::{ParamSet, Tape, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const VANILLA_TOL: f64 = 1e-10;
const MONOTONE_SEEDS: u64 = 200;
const CHI_TOL: f64 = 1e-10;
const CHI_INSTANCES: u64 = 100;
const RANDOM_GALLERIES: usize = 50;
const CE_TOL: f64 = 1e-12;
const TRIPLET_TOL: f64 = 1e-10;
const TRIPLET_BATCHES: usize = 100;
const OVERFIT_MAP: f64 = 0.90;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_GAIN: f64 = 0.05;
const ABLATION_CLUTTER: f64 = 0.8;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut setup = GradCheckSetup::new(micro_config(0)).map_err(|e| e.to_string())?;
    let report = setup.run(Default::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(report.tolerance == GRAD_TOL, || format!("tolerance {}", report.tolerance))?;
    ensure(report.passed(), || {
        let names: Vec<&str> = report.offenders().iter().map(|p| p.name.as_str()).collect();
        format!("offenders: {}", names.join(", "))
    })?;
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} tensors, max rel err {:.2e}, {:.1}s",
        report.params.len(),
        report.max_rel_err(),
        elapsed.as_secs_f64()
    ))
}

fn vanilla_reduction() -> Outcome {
    let cfg = EncoderConfig { image_size: 8, channels: 2, patch: 4, depth: 2, heads: 2, dim: 8 };
    let mut ps = ParamSet::new();
    let mut rng = stream(5, 0);
    let enc = Encoder::new(&mut ps, "enc", cfg, true, &mut rng).map_err(|e| e.to_string())?;
    for id in ps.ids().collect::<Vec<_>>() {
        let shape = ps.get(id).shape().to_vec();
        if ps.name(id).contains(".sfm.") {
            ensure(ps.get(id).data().iter().all(|&v| v == 0.0), || format!("{} not zero", ps.name(id)))?;
        } else {
            ps.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
        }
    }
    let images: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 8, 8], 1.0, &mut rng)).collect();
    let masks = vec![
        TokenMask::new(vec![1, 0, 1, 0, 0]).unwrap(),
        TokenMask::new(vec![1, 1, 1, 0, 1]).unwrap(),
        TokenMask::new(vec![1, 0, 0, 0, 1]).unwrap(),
    ];
    let tape = Tape::new();
    let g = Graph::new(&tape, &ps);
    let refs: Vec<&Tensor> = images.iter().collect();
    let out = mat(&enc.forward(&g, &refs, &masks, &mut Mode::Eval).map_err(|e| e.to_string())?.value());
    let mut worst = 0.0f64;
    for (b, img) in images.iter().enumerate() {
        let oracle = common::vanilla_encoder(&ps, "enc", &cfg, img);
        worst = worst.max(max_abs_diff(&out[b * 5..(b + 1) * 5].to_vec(), &oracle));
    }
    ensure(worst < VANILLA_TOL, || format!("max abs diff {worst:e}"))?;
    Ok(format!("max abs diff {worst:.1e}"))
}

fn weights(a: &Tensor, m: &TokenMask, alpha: f64) -> Tensor {
    let tape = Tape::new();
    let a = tape.constant(a.clone());
    let r = tape.constant(interaction_mask(m));
    let s = modulation(&a, &r, &tape.constant(Tensor::scalar(alpha)), &tape.constant(Tensor::scalar(0.0))).unwrap();
    (*modulated_attention(&a, &s, 4).unwrap().value()).clone()
}

fn foreground_monotonicity() -> Outcome {
    let mut violations = 0;
    let mut rows = 0;
    for seed in 0..MONOTONE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..12);
        let a = tensor(&randn(n, n, &mut rng));
        let m = loop {
            let mut v = vec![1u8];
            v.extend((1..n).map(|_| rng.random::<bool>() as u8));
            if v.contains(&0) && v[1..].contains(&1) {
                break TokenMask::new(v).unwrap();
            }
        };
        let (w0, w1) = (weights(&a, &m, 0.0), weights(&a, &m, 1.0));
        let mass = |w: &Tensor, i: usize| (0..n).filter(|&j| m.is_foreground(j)).map(|j| w.at(i, j)).sum::<f64>();
        for i in (0..n).filter(|&i| m.is_foreground(i)) {
            rows += 1;
            if mass(&w1, i) < mass(&w0, i) {
                violations += 1;
            }
        }
    }
    ensure(violations == 0, || format!("{violations} violations in {rows} rows"))?;
    Ok(format!("{rows} foreground rows, 0 violations"))
}

fn chi_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..CHI_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = tensor(&randn(15, 6, &mut rng));
        let tau = rng.random_range(-0.5..0.8);
        let w = tensor(&randn(1, 15, &mut rng)).reshape(vec![15]).unwrap();
        let b = tensor(&randn(15, 6, &mut rng));
        let s = build_hyperedges(&h, tau).map_err(|e| e.to_string())?;
        ensure(s.members == common::threshold_members(&mat(&h), tau), || format!("hyperedges differ, seed {seed}"))?;
        let tape = Tape::new();
        let out = hypergraph_conv(&tape.constant(h.clone()), &s, &tape.constant(w.clone()), &tape.constant(b.clone()))
            .map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&mat(&out.value()), &common::hypergraph_conv(&mat(&h), &s.members, w.data(), &mat(&b))));
    }
    ensure(worst < CHI_TOL, || format!("max abs diff {worst:e}"))?;
    Ok(format!("{CHI_INSTANCES} instances, max abs diff {worst:.1e}, hyperedges exact"))
}

fn micro_model(k: usize, seed: u64) -> (Stmi, ParamSet, Batch) {
    let gen = GeneratorConfig { num_ids: 2, per_id: 4, image_size: 8, channels: 3, blob_size: 6, clutter: 0.5, text_dim: 8, seed };
    let data = Dataset::synthesize(&gen).unwrap();
    let masks = token_masks(&data, 4, 0.25).unwrap();
    let batch = make_batch(&data, &masks, &data.indices(Split::Train)).unwrap();
    let cfg = ModelConfig {
        encoder: EncoderConfig { image_size: 8, channels: 3, patch: 4, depth: 1, heads: 2, dim: 8 },
        num_queries: k,
        tau: 0.5,
        chi_depth: 1,
        num_classes: 2,
        sfm: true,
        str_tokens: true,
        chi: true,
        margin: 0.3,
        label_smoothing: 0.1,
    };
    let (model, ps) = Stmi::new(cfg, seed).unwrap();
    (model, ps, batch)
}

fn identity_reduction() -> Outcome {
    let (model, mut ps, batch) = micro_model(2, 4);
    let mut zeroed = 0;
    for id in ps.ids().collect::<Vec<_>>() {
        if ps.name(id).starts_with("chi.") {
            let shape = ps.get(id).shape().to_vec();
            ps.set(id, Tensor::zeros(&shape)).unwrap();
            zeroed += 1;
        }
    }
    ensure(zeroed > 0, || "no interaction parameters found".into())?;
    let tape = Tape::new();
    let g = Graph::new(&tape, &ps);
    let fwd = model.forward(&g, &batch, &mut Mode::Eval).map_err(|e| e.to_string())?;
    for (h, hp) in fwd.token_sets.iter().zip(&fwd.propagated) {
        ensure(h.value().bitwise_eq(&hp.value()), || "H' differs from H".into())?;
    }
    let fused = fwd.fused.ok_or("no fused features")?;
    ensure(fused.value().bitwise_eq(&fwd.globals.value()), || "U differs from G".into())?;
    Ok(format!("{zeroed} tensors zeroed, H' = H and U = G bitwise"))
}

fn col(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
}

fn metrics_oracle() -> Outcome {
    // (set, expected AP per query, expected CMC@1, CMC@5)
    let fixtures = [
        (
            EvalSet {
                query: col(&[0.0]),
                query_ids: vec![0],
                query_cams: vec![0],
                gallery: col(&[1.0, 2.0, 0.0, 3.0, 4.0]),
                gallery_ids: vec![1, 0, 0, 1, 0],
                gallery_cams: vec![1, 1, 0, 0, 1],
            },
            vec![0.5],
            0.0,
            1.0,
        ),
        (
            EvalSet {
                query: col(&[0.0, 10.0]),
                query_ids: vec![0, 1],
                query_cams: vec![0, 0],
                gallery: col(&[0.1, 10.1, 5.0]),
                gallery_ids: vec![0, 1, 2],
                gallery_cams: vec![1, 1, 1],
            },
            vec![1.0, 1.0],
            1.0,
            1.0,
        ),
        (
            EvalSet {
                query: col(&[0.0, 10.0]),
                query_ids: vec![0, 2],
                query_cams: vec![0, 0],
                gallery: col(&[1.0, -1.0, 10.5, 11.0, 12.0]),
                gallery_ids: vec![1, 0, 3, 3, 2],
                gallery_cams: vec![1, 1, 1, 1, 1],
            },
            vec![0.5, 1.0 / 3.0],
            0.0,
            1.0,
        ),
    ];
    for (i, (set, aps, cmc1, cmc5)) in fixtures.iter().enumerate() {
        let ev = evaluate(set, DistanceKind::Euclidean).map_err(|e| e.to_string())?;
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        ensure(&ev.average_precisions == aps && ev.metrics.map == map, || format!("fixture {i}: AP {:?}", ev.average_precisions))?;
        ensure(ev.metrics.cmc1 == *cmc1 && ev.metrics.cmc5 == *cmc5, || format!("fixture {i}: CMC {:?}", ev.metrics))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..RANDOM_GALLERIES {
        let ids = rng.random_range(2..6);
        let nq = rng.random_range(1..8);
        let ng = rng.random_range(12..30);
        let query_ids: Vec<usize> = (0..nq).map(|_| rng.random_range(0..ids)).collect();
        let query_cams: Vec<usize> = (0..nq).map(|_| rng.random_range(0..2)).collect();
        let mut gallery_ids: Vec<usize> = (0..ng).map(|_| rng.random_range(0..ids)).collect();
        let mut gallery_cams: Vec<usize> = (0..ng).map(|_| rng.random_range(0..2)).collect();
        for q in 0..nq {
            gallery_ids[q] = query_ids[q];
            gallery_cams[q] = 1 - query_cams[q];
        }
        let qf = randn(nq, 4, &mut rng);
        let gf = randn(ng, 4, &mut rng);
        let set = EvalSet { query: tensor(&qf), query_ids, query_cams, gallery: tensor(&gf), gallery_ids, gallery_cams };
        let ev = evaluate(&set, DistanceKind::Euclidean).map_err(|e| e.to_string())?;
        let mut hits = Vec::new();
        for q in 0..nq {
            let mut cand: Vec<(f64, usize)> = (0..ng)
                .filter(|&j| !(set.gallery_ids[j] == set.query_ids[q] && set.gallery_cams[j] == set.query_cams[q]))
                .map(|j| (qf[q].iter().zip(&gf[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), j))
                .collect();
            cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rel: Vec<bool> = cand.iter().map(|&(_, j)| set.gallery_ids[j] == set.query_ids[q]).collect();
            let ap = ap_brute(&rel);
            ensure(ev.average_precisions[q] == ap, || format!("gallery {trial} query {q}: {} vs {ap}", ev.average_precisions[q]))?;
            hits.push(rel.iter().position(|&r| r).unwrap());
        }
        for (k, got) in [(1, ev.metrics.cmc1), (5, ev.metrics.cmc5), (10, ev.metrics.cmc10)] {
            let want = hits.iter().filter(|&&h| h < k).count() as f64 / nq as f64;
            ensure(got == want, || format!("gallery {trial} CMC@{k}: {got} vs {want}"))?;
        }
        let m = &ev.metrics;
        ensure(m.cmc1 <= m.cmc5 && m.cmc5 <= m.cmc10, || format!("gallery {trial}: CMC not monotone"))?;
    }
    Ok(format!("3 fixtures and {RANDOM_GALLERIES} random galleries exact, CMC monotone"))
}

fn loss_oracles() -> Outcome {
    let mut worst_ce = 0.0f64;
    for c in [2usize, 5, 8, 201] {
        let tape = Tape::new();
        let got = ce_label_smooth(&tape.constant(Tensor::full(&[4, c], 0.3)), &[0, 1, 1, 0], 0.1)
            .map_err(|e| e.to_string())?
            .value()
            .data()[0];
        worst_ce = worst_ce.max((got - (c as f64).ln()).abs());
    }
    ensure(worst_ce < CE_TOL, || format!("uniform CE off by {worst_ce:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..TRIPLET_BATCHES {
        let (ids, per) = (rng.random_range(2..5), rng.random_range(2..5));
        let labels: Vec<usize> = (0..ids * per).map(|i| i % ids).collect();
        let f = randn(labels.len(), rng.random_range(2..6), &mut rng);
        let tape = Tape::new();
        let got = triplet_batch_hard(&tape.constant(tensor(&f)), &labels, 0.3).map_err(|e| e.to_string())?.value().data()[0];
        let d = |a: usize, b: usize| f[a].iter().zip(&f[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let mut want = 0.0;
        for a in 0..labels.len() {
            let mut best = f64::NEG_INFINITY;
            for p in (0..labels.len()).filter(|&p| p != a && labels[p] == labels[a]) {
                for n in (0..labels.len()).filter(|&n| labels[n] != labels[a]) {
                    best = best.max(0.3 + d(a, p) - d(a, n));
                }
            }
            want += best.max(0.0);
        }
        worst = worst.max((got - want / labels.len() as f64).abs());
    }
    ensure(worst < TRIPLET_TOL, || format!("triplet off by {worst:e}"))?;
    Ok(format!("CE err {worst_ce:.1e}, triplet err {worst:.1e} over {TRIPLET_BATCHES} batches"))
}

fn overfit() -> Outcome {
    let cfg = RunConfig::default();
    let data = Dataset::synthesize(&cfg.generator()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, &data).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let map = trainer.evaluate().map_err(|e| e.to_string())?.metrics.map;
    ensure(map >= OVERFIT_MAP, || format!("final mAP {map:.4}"))?;
    ensure(elapsed < OVERFIT_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("final mAP {map:.4} after {} steps, {:.0}s", trainer.state.step, elapsed.as_secs_f64()))
}

fn ablation_trend() -> Outcome {
    let base = RunConfig { clutter: ABLATION_CLUTTER, ..RunConfig::default() };
    let data = Dataset::synthesize(&base.generator()).map_err(|e| e.to_string())?;
    let table = ablate(&base, &data, |_| {}).map_err(|e| e.to_string())?;
    let a = table.row("A").ok_or("missing row A")?.map;
    let d = table.row("D").ok_or("missing row D")?.map;
    let all: Vec<String> = table.rows.iter().map(|r| format!("{}={:.4}", r.label, r.map)).collect();
    ensure(d >= a + ABLATION_GAIN, || format!("{}", all.join(" ")))?;
    Ok(all.join(" "))
}

fn shape_contract() -> Outcome {
    for k in [0, 1, 4, 8] {
        let (model, ps, batch) = micro_model(k, 3);
        let b = batch.len();
        let tape = Tape::new();
        let g = Graph::new(&tape, &ps);
        let q = model.str_blocks.as_ref().ok_or("no STR blocks")?[0]
            .queries(&g, &g.constant(batch.text.clone()))
            .map_err(|e| e.to_string())?;
        let fwd = model.forward(&g, &batch, &mut Mode::Eval).map_err(|e| e.to_string())?;
        let check = |what: &str, got: Vec<usize>, want: Vec<usize>| ensure(got == want, || format!("K={k} {what}: {got:?} != {want:?}"));
        check("Q'", q.shape(), vec![b * (k + 1), 8])?;
        for h in &fwd.token_sets {
            check("H", h.shape(), vec![3 * (k + 1), 8])?;
        }
        check("G", fwd.globals.shape(), vec![b * 3, 8])?;
        check("U", fwd.fused.ok_or("no fused features")?.shape(), vec![b * 3, 8])?;
    }
    Ok("K in {0, 1, 4, 8}: Q' (K+1)xD, H 3(K+1)xD, G and U 3xD per sample".into())
}

fn serialization() -> Outcome {
    let specials = vec![0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::NAN, f64::MIN_POSITIVE / 4.0, f64::MAX, 1.0 / 3.0];
    let tensors = [
        StoredTensor::new(vec![2, 4], TensorData::F64(specials.clone())).unwrap(),
        StoredTensor::new(vec![8], TensorData::F32(specials.iter().map(|&v| v as f32).collect())).unwrap(),
        StoredTensor::new(vec![2, 2, 2], TensorData::U8(vec![0, 1, 2, 127, 128, 200, 254, 255])).unwrap(),
        StoredTensor::new(vec![], TensorData::F64(vec![42.0])).unwrap(),
        StoredTensor::new(vec![0, 3], TensorData::F32(vec![])).unwrap(),
    ];
    for t in &tensors {
        let bytes = t.encode();
        let back = StoredTensor::decode(&bytes).map_err(|e| e.to_string())?;
        ensure(back.encode() == bytes && back.shape == t.shape, || format!("round trip changed {:?}", t.dtype()))?;
    }

    let cfg = RunConfig {
        image_size: 16,
        patch: 4,
        dim: 16,
        depth: 1,
        heads: 2,
        num_queries: 2,
        num_ids: 4,
        per_id: 8,
        blob_size: 8,
        ids_per_batch: 2,
        samples_per_id: 2,
        steps: 10,
        eval_every: 2,
        ..RunConfig::default()
    };
    let data = Dataset::synthesize(&cfg.generator()).map_err(|e| e.to_string())?;
    let mut full = Trainer::new(cfg.clone(), &data).map_err(|e| e.to_string())?;
    full.run().map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("ckpt");
    let mut first = Trainer::new(cfg, &data).map_err(|e| e.to_string())?;
    first.run_until(5).map_err(|e| e.to_string())?;
    checkpoint::save(&ckpt, &first.config, &first.state).map_err(|e| e.to_string())?;
    drop(first);
    let (cfg, state) = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(cfg, &data, state).map_err(|e| e.to_string())?;
    resumed.run().map_err(|e| e.to_string())?;
    ensure(resumed.state.log == full.state.log, || "resumed log differs".into())?;
    let evals = full.state.log.iter().filter(|l| l.starts_with("eval")).count();
    Ok(format!("3 dtypes bitwise, resumed log identical ({} lines, {evals} evals)", full.state.log.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("vanilla reduction", vanilla_reduction),
        ("foreground-mass monotonicity", foreground_monotonicity),
        ("hypergraph oracle equivalence", chi_oracle),
        ("identity reduction", identity_reduction),
        ("metrics oracle", metrics_oracle),
        ("loss oracles", loss_oracles),
        ("overfit", overfit),
        ("ablation trend", ablation_trend),
        ("shape contract", shape_contract),
        ("serialization", serialization),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("acceptance {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
