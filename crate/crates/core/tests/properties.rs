//! Invariants as properties over random inputs.

use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use taskvec::benchmarks::{avg_rank, gen_family, ndcg, performance_rate, FamilyId, TaskFamily};
use taskvec::extractors::{cosine, taskemb_extract, ExtractorConfig, Method, Origin, TaskEmbedding};
use taskvec::label::{Example, Label, LabeledSet, PAD};
use taskvec::oracles::compose;
use taskvec::pipeline::{build_pool, normalize, rank_candidates, PoolSource};
use taskvec::surrogate::{SurrogateCheckpoint, SurrogateConfig, TrainConfig};

fn small() -> SurrogateConfig {
    SurrogateConfig {
        vocab: 10,
        width: 4,
        layers: 1,
        heads: 2,
        ff_width: 4,
        max_len: 6,
        classes: 3,
        seq_len: 2,
    }
}

fn nonzero_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-5.0f32..5.0, n).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn scored(n: usize) -> impl Strategy<Value = (BTreeMap<String, f64>, Vec<String>)> {
    (prop::collection::vec(0.0f64..1.0, n), Just((0..n).collect::<Vec<usize>>()).prop_shuffle()).prop_map(|(s, perm)| {
        let scores = s.iter().enumerate().map(|(i, &v)| (format!("c{i}"), v)).collect();
        (scores, perm.into_iter().map(|i| format!("c{i}")).collect())
    })
}

fn embedding(ckpt: &SurrogateCheckpoint, id: &str, values: Vec<f32>) -> TaskEmbedding {
    let cfg = ExtractorConfig::default();
    let data = LabeledSet::new(vec![Example::new(vec![3, 4], Label::Class(0))]);
    let mut e = taskemb_extract(ckpt, &data, &ExtractorConfig { train: TrainConfig { epochs: 0, ..cfg.train }, ..cfg }, Origin::dataset(id)).unwrap();
    e.values = values;
    e.meta.dim = e.values.len();
    e
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn cosine_is_symmetric_bounded_and_exact_on_self(a in nonzero_vec(12), b in nonzero_vec(12)) {
        let ab = cosine(&a, &b).unwrap();
        prop_assert_eq!(ab, cosine(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(cosine(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn cosine_ignores_positive_scale(a in nonzero_vec(8), b in nonzero_vec(8), k in 0.01f32..100.0) {
        let scaled: Vec<f32> = a.iter().map(|x| x * k).collect();
        prop_assert!((cosine(&a, &b).unwrap() - cosine(&scaled, &b).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn ranking_is_invariant_to_candidate_scale(target in nonzero_vec(6), cands in prop::collection::vec(nonzero_vec(6), 2..6), k in 0.5f32..4.0) {
        let ckpt = SurrogateCheckpoint::init(small(), 0).unwrap();
        let t = embedding(&ckpt, "target", target);
        let a: Vec<TaskEmbedding> = cands.iter().enumerate().map(|(i, v)| embedding(&ckpt, &format!("m{i}"), v.clone())).collect();
        let b: Vec<TaskEmbedding> = cands.iter().enumerate().map(|(i, v)| embedding(&ckpt, &format!("m{i}"), v.iter().map(|x| x * k).collect())).collect();
        let ra = rank_candidates(&t, &a, Default::default()).unwrap();
        let rb = rank_candidates(&t, &b, Default::default()).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            // Scaling can only reorder candidates whose similarities tie to rounding.
            prop_assert!(x.0 == y.0 || (x.1 - y.1).abs() < 1e-5);
        }
        prop_assert!(ra.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn rank_and_ndcg_bounds((scores, order) in (2usize..9).prop_flat_map(scored)) {
        let n = scores.len();
        let rank = avg_rank(&order, &scores).unwrap();
        prop_assert!((1..=n).contains(&rank));
        let best = scores.values().copied().fold(f64::MIN, f64::max);
        prop_assert_eq!(rank == 1, scores[&order[0]] == best);
        let v = ndcg(&order, &scores).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&v));
        let mut ideal = order.clone();
        ideal.sort_by(|a, b| scores[b].total_cmp(&scores[a]));
        prop_assert_eq!(avg_rank(&ideal, &scores).unwrap(), 1);
        prop_assert!((ndcg(&ideal, &scores).unwrap().value - 1.0).abs() < 1e-12);
        prop_assert!(v <= ndcg(&ideal, &scores).unwrap().value + 1e-12);
    }

    #[test]
    fn performance_rate_is_one_exactly_at_the_argmax(all in prop::collection::vec(0.01f64..1.0, 1..10), pick in any::<prop::sample::Index>()) {
        let s = all[pick.index(all.len())];
        let r = performance_rate(s, &all).unwrap();
        let max = all.iter().copied().fold(f64::MIN, f64::max);
        prop_assert!(r > 0.0 && r <= 1.0);
        prop_assert_eq!(r == 1.0, s == max);
    }

    #[test]
    fn pool_is_deduplicated_and_hygienic(
        sources in prop::collection::vec(prop::collection::vec(prop::collection::vec(0u32..6, 1..5), 1..12), 1..4),
        banned in prop::collection::vec(prop::collection::vec(0u32..6, 1..5), 0..6),
        cap in 1usize..8,
        seed in any::<u64>(),
    ) {
        let srcs: Vec<PoolSource> = sources.iter().enumerate().map(|(i, t)| PoolSource { name: format!("s{i}"), texts: t.clone() }).collect();
        let Ok(pool) = build_pool(&srcs, cap, &banned, seed) else { return Ok(()) };
        let banned: HashSet<Vec<u32>> = banned.iter().map(|t| normalize(t)).collect();
        let unique: HashSet<&Vec<u32>> = pool.texts.iter().collect();
        prop_assert_eq!(unique.len(), pool.texts.len());
        prop_assert!(pool.texts.iter().all(|t| !banned.contains(t) && normalize(t) == *t && !t.is_empty()));
        prop_assert!(pool.texts.len() <= cap * srcs.len());
        prop_assert_eq!(pool.provenance.len(), pool.texts.len());
        prop_assert!(pool.texts.iter().all(|t| t.first() != Some(&PAD) && t.last() != Some(&PAD)));
        let again = build_pool(&srcs, cap, &banned.iter().cloned().collect::<Vec<_>>(), seed).unwrap();
        prop_assert_eq!(again.id, pool.id);
    }

    #[test]
    fn composed_requests_fit(prompt in prop::collection::vec(3u32..20, 0..8), input in prop::collection::vec(3u32..20, 1..40), max_len in 2usize..32) {
        match compose(&prompt, &input, max_len) {
            Ok((p, x)) => {
                prop_assert_eq!(&p, &prompt);
                prop_assert!(p.len() + 1 + x.len() <= max_len);
                prop_assert!(input.starts_with(&x));
                prop_assert!(!x.is_empty());
            }
            Err(_) => prop_assert!(prompt.len() + 2 > max_len),
        }
    }

    #[test]
    fn generators_are_pure_and_splits_disjoint(f in 0usize..FamilyId::ALL.len(), seed in 0u64..10_000, noise in 0.0f64..0.5) {
        let spec = TaskFamily { noise, ..TaskFamily::new(FamilyId::ALL[f], seed, 24, 16) };
        let (train, test) = gen_family(&spec).unwrap();
        prop_assert_eq!(gen_family(&spec).unwrap(), (train.clone(), test.clone()));
        let seen: HashSet<&Vec<u32>> = train.examples.iter().map(|e| &e.tokens).collect();
        prop_assert!(test.examples.iter().all(|e| !seen.contains(&e.tokens)));
        prop_assert_eq!(train.kind().unwrap(), FamilyId::ALL[f].kind());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn taskemb_is_nonnegative_finite_and_parameter_sized(
        rows in prop::collection::vec((prop::collection::vec(3u32..10, 1..6), 0usize..3), 1..6),
        seed in any::<u64>(),
    ) {
        let c = small();
        let ckpt = SurrogateCheckpoint::init(c, seed).unwrap();
        let data = LabeledSet::new(rows.into_iter().map(|(t, y)| Example::new(t, Label::Class(y))).collect());
        let cfg = ExtractorConfig::new(Method::TaskEmb, TrainConfig { epochs: 1, seed, ..TrainConfig::default() });
        let e = taskemb_extract(&ckpt, &data, &cfg, Origin::dataset("d")).unwrap();
        prop_assert_eq!(e.dim(), c.param_count());
        prop_assert!(e.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn fingerprint_tracks_every_parameter_bit(seed in any::<u64>(), pick in any::<prop::sample::Index>(), bit in 0u32..52) {
        let ckpt = SurrogateCheckpoint::init(small(), seed).unwrap();
        let same = SurrogateCheckpoint::new(ckpt.config, ckpt.params.clone()).unwrap();
        prop_assert_eq!(same.fingerprint(), ckpt.fingerprint());
        let mut params = ckpt.params.clone();
        let n = params.numel();
        let k = pick.index(n);
        let (mut t, mut j) = (0, k);
        while j >= params.tensor(t).len() {
            j -= params.tensor(t).len();
            t += 1;
        }
        let x = &mut params.tensor_mut(t).data_mut()[j];
        *x = f64::from_bits(x.to_bits() ^ (1 << bit));
        let changed = ckpt.with_params(params).unwrap();
        prop_assert_ne!(changed.fingerprint(), ckpt.fingerprint());
        let other = SurrogateCheckpoint::new(SurrogateConfig { classes: 4, ..ckpt.config }, ckpt.params.clone());
        if let Ok(o) = other {
            prop_assert_ne!(o.fingerprint(), ckpt.fingerprint());
        }
    }
}
