use std::collections::{BTreeMap, BTreeSet};

use mfhi_core::dataset::synthetic::{generate_synthetic, SyntheticConfig};
use mfhi_core::dataset::Dataset;
use mfhi_core::metrics::{cmc, mean_average_precision, rank, top_p_per_class, Order, RankedResult};
use mfhi_core::model::Mode;
use mfhi_core::recognition::{check_disjoint, cosine_ranking, evaluate, retrieve_i2i, EvalConfig, Protocol};
use mfhi_core::trainer::{fit, Checkpoint, TrainConfig};
use mfhi_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn untrained_model_scores_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut hits, mut queries) = (0.0, 0usize);
    let classes = 10usize;
    for seed in 0..8u64 {
        let data = tmp.path().join(format!("data{seed}"));
        let cfg = SyntheticConfig { test_identities: classes, seed, ..Default::default() };
        generate_synthetic(&cfg, &data).unwrap();
        let ds = Dataset::open(&data).unwrap();
        let train = TrainConfig { episodes: 0, seed: 100 + seed, ..Default::default() };
        let summary = fit(&ds, &train, &tmp.path().join(format!("run{seed}")), None).unwrap();
        let ckpt = Checkpoint::load(&summary.model_dir).unwrap();
        let report = evaluate(Protocol::I2a, &ckpt, &ds, &EvalConfig::default()).unwrap();
        let n = report.counts.queries;
        hits += report.top1().unwrap() * n as f64;
        queries += n;
    }
    let p = 1.0 / classes as f64;
    let rate = hits / queries as f64;
    let sigma = (p * (1.0 - p) / queries as f64).sqrt();
    assert!((rate - p).abs() <= 4.0 * sigma, "untrained top-1 {rate} over {queries} queries, chance {p}, sigma {sigma}");
}

#[test]
fn all_protocols_share_one_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = SyntheticConfig { train_identities: 12, test_identities: 4, seed: 6, ..Default::default() };
    generate_synthetic(&cfg, &data).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let train = TrainConfig { episodes: 20, identities_per_episode: 6, shots: 2, ..Default::default() };
    let summary = fit(&ds, &train, &tmp.path().join("run"), None).unwrap();
    let ckpt = Checkpoint::load(&summary.model_dir).unwrap();
    for protocol in Protocol::ALL {
        let report = evaluate(protocol, &ckpt, &ds, &EvalConfig::default()).unwrap();
        assert_eq!(report.config_hash, summary.config_hash);
        assert!(report.counts.queries > 0, "{protocol}");
    }

    let i2i = TrainConfig { mode: Mode::Classifier, ..train };
    let summary = fit(&ds, &i2i, &tmp.path().join("i2i"), None).unwrap();
    let ckpt = Checkpoint::load(&summary.model_dir).unwrap();
    evaluate(Protocol::I2i, &ckpt, &ds, &EvalConfig::default()).unwrap();
    let err = evaluate(Protocol::I2a, &ckpt, &ds, &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");

    let mut seen = ckpt.meta.seen_identities.clone();
    seen.push(ds.identities[ds.test_identities()[0]].clone());
    assert!(matches!(check_disjoint(&seen, &ds), Err(Error::Protocol(_))));
}

#[test]
fn mismatched_checkpoint_names_both_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let small = SyntheticConfig { train_identities: 8, test_identities: 3, seed: 1, ..Default::default() };
    let wide = SyntheticConfig { channels: 10, ..small.clone() };
    generate_synthetic(&small, &tmp.path().join("a")).unwrap();
    generate_synthetic(&wide, &tmp.path().join("b")).unwrap();
    let a = Dataset::open(&tmp.path().join("a")).unwrap();
    let b = Dataset::open(&tmp.path().join("b")).unwrap();
    let train = TrainConfig { episodes: 1, identities_per_episode: 4, shots: 2, ..Default::default() };
    let summary = fit(&a, &train, &tmp.path().join("run"), None).unwrap();
    let ckpt = Checkpoint::load(&summary.model_dir).unwrap();
    let err = evaluate(Protocol::I2a, &ckpt, &b, &EvalConfig::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("16") && msg.contains("10"), "{msg}");
}

fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn euclidean_and_cosine_rankings_agree(seed in any::<u64>(), n in 1usize..40, dim in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery = unit_vectors(&mut rng, n, dim);
        let query = unit_vectors(&mut rng, 1, dim).remove(0);
        let ids: Vec<String> = (0..n).map(|i| format!("g{i:03}")).collect();
        let by_distance = retrieve_i2i("q", &query, &ids, &gallery).unwrap();
        let by_cosine = cosine_ranking("q", &query, &ids, &gallery).unwrap();
        prop_assert_eq!(by_distance.candidates, by_cosine.candidates);
    }
}

struct Instance {
    rankings: Vec<RankedResult>,
    truths: Vec<String>,
    relevant: Vec<BTreeSet<String>>,
    raw: Vec<(Vec<String>, Vec<f64>)>,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let queries = rng.random_range(1..=20);
    let candidates = rng.random_range(1..=50);
    let ids: Vec<String> = (0..candidates).map(|i| format!("c{i:02}")).collect();
    let mut out = Instance { rankings: vec![], truths: vec![], relevant: vec![], raw: vec![] };
    for q in 0..queries {
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..candidates).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();
        out.rankings.push(rank(&format!("q{q}"), &ids, &scores, Order::Descending));
        out.truths.push(ids[rng.random_range(0..candidates)].clone());
        let k = rng.random_range(0..=candidates.min(4));
        out.relevant.push((0..k).map(|_| ids[rng.random_range(0..candidates)].clone()).collect());
        out.raw.push((ids.clone(), scores));
    }
    out
}

/// Rank of `target` found by counting the candidates that beat it.
fn brute_rank(ids: &[String], scores: &[f64], target: &str) -> usize {
    let t = ids.iter().position(|i| i == target).unwrap();
    (0..ids.len())
        .filter(|&j| scores[j] > scores[t] || (scores[j] == scores[t] && ids[j] < ids[t]))
        .count()
}

#[test]
fn metrics_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ps = [1usize, 3, 5, 10];
    for _ in 0..200 {
        let inst = instance(&mut rng);

        let mut per_class: BTreeMap<&str, (usize, [usize; 4])> = BTreeMap::new();
        for ((ids, scores), truth) in inst.raw.iter().zip(&inst.truths) {
            let r = brute_rank(ids, scores, truth);
            let e = per_class.entry(truth).or_insert((0, [0; 4]));
            e.0 += 1;
            for (k, p) in ps.iter().enumerate() {
                e.1[k] += usize::from(r < *p);
            }
        }
        let expected: Vec<f64> = (0..4)
            .map(|k| per_class.values().map(|(n, h)| h[k] as f64 / *n as f64).sum::<f64>() / per_class.len() as f64)
            .collect();
        assert_eq!(top_p_per_class(&inst.rankings, &inst.truths, &ps).unwrap(), expected);

        let scored: Vec<usize> = (0..inst.raw.len()).filter(|&i| !inst.relevant[i].is_empty()).collect();
        let expected_cmc: Vec<Option<f64>> = ps
            .iter()
            .map(|&p| {
                (!scored.is_empty()).then(|| {
                    let hits = scored
                        .iter()
                        .filter(|&&i| {
                            let (ids, scores) = &inst.raw[i];
                            inst.relevant[i].iter().map(|t| brute_rank(ids, scores, t)).min().unwrap() < p
                        })
                        .count();
                    hits as f64 / scored.len() as f64
                })
            })
            .collect();
        assert_eq!(cmc(&inst.rankings, &inst.relevant, &ps), expected_cmc);

        let aps: Vec<f64> = scored
            .iter()
            .map(|&i| {
                let (ids, scores) = &inst.raw[i];
                let mut ranks: Vec<usize> = inst.relevant[i].iter().map(|t| brute_rank(ids, scores, t)).collect();
                ranks.sort_unstable();
                ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / (r + 1) as f64).sum::<f64>() / ranks.len() as f64
            })
            .collect();
        let expected_map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        assert_eq!(mean_average_precision(&inst.rankings, &inst.relevant), expected_map);
    }
}
