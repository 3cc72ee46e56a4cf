use std::collections::{BTreeMap, HashMap};

use cmvae::data::{generate_synthetic, split_strong, split_weak, EntityKind, FeatureStore, FeatureTable, PairRecord, SplitRatios, SplitTag, SynthConfig};
use cmvae::eval::{
    baseline_random, evaluate, propensity_weights, rank_candidates, recall_at_k, EvalOptions, EvalSet, Modalities, MusicPool, RankedList,
};
use cmvae::model::{Architecture, CmvaeParams};
use cmvae::ndmath::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dataset(seed: u64) -> (cmvae::data::SyntheticDataset, FeatureStore) {
    let cfg = SynthConfig {
        n_music: 40,
        n_videos: Some(600),
        n_clusters: 5,
        music_dim: 6,
        visual_dim: 5,
        textual_dim: 4,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let store = FeatureStore::from(&ds);
    (ds, store)
}

fn params_for(store: &FeatureStore, seed: u64) -> CmvaeParams {
    let arch = Architecture {
        latent_dim: 4,
        hidden: vec![8],
        music_dim: store.music.dim(),
        visual_dim: store.visual.dim(),
        textual_dim: store.textual.dim(),
    };
    CmvaeParams::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn scores_match_brute_force_recomputation() {
    let (ds, store) = small_dataset(1);
    let params = params_for(&store, 2);
    let ids: Vec<String> = ds.music.ids().to_vec();
    let pool = MusicPool::embed(&params, &store.music, &ids).unwrap();
    for video in ds.visual.ids().iter().take(25) {
        let list = rank_candidates(&params, &store, video, Modalities::BOTH, &pool, None).unwrap();
        assert_eq!(list.len(), ids.len());
        let z_v = params
            .encode_video(store.visual.row_of(video), store.textual.row_of(video))
            .unwrap();
        let mut oracle: Vec<(f64, &String)> = ids
            .iter()
            .map(|m| {
                let z_m = params.encode_music(store.music.row_of(m).unwrap()).unwrap();
                (z_v.mu().iter().zip(z_m.mu()).map(|(a, b)| a * b).sum(), m)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        for (r, (score, m)) in oracle.iter().enumerate() {
            assert_eq!(&list.music[r], *m);
            assert!((list.scores[r] - score).abs() <= 1e-12 * score.abs().max(1.0));
        }
        assert!(list.scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn pool_of_one_and_duplicate_ties() {
    let (ds, store) = small_dataset(3);
    let params = params_for(&store, 4);
    let video = &ds.visual.ids()[0];
    let single = MusicPool::embed(&params, &store.music, &[ds.music.ids()[5].clone()]).unwrap();
    let list = rank_candidates(&params, &store, video, Modalities::BOTH, &single, None).unwrap();
    assert_eq!(list.music, vec![ds.music.ids()[5].clone()]);

    let row = store.music.matrix().row(0).to_vec();
    let mut data = Vec::new();
    for _ in 0..3 {
        data.extend_from_slice(&row);
    }
    let dup_ids = vec!["zz".to_string(), "aa".to_string(), "mm".to_string()];
    let table = FeatureTable::new(EntityKind::Music, dup_ids.clone(), Matrix::new(3, row.len(), data).unwrap()).unwrap();
    let pool = MusicPool::embed(&params, &table, &dup_ids).unwrap();
    let list = rank_candidates(&params, &store, video, Modalities::BOTH, &pool, None).unwrap();
    assert_eq!(list.music, vec!["aa", "mm", "zz"]);
}

#[test]
fn ranking_ignores_candidate_order() {
    let (ds, store) = small_dataset(5);
    let params = params_for(&store, 6);
    let mut ids: Vec<String> = ds.music.ids().to_vec();
    let a = MusicPool::embed(&params, &store.music, &ids).unwrap();
    ids.reverse();
    let b = MusicPool::embed(&params, &store.music, &ids).unwrap();
    for video in ds.visual.ids().iter().take(10) {
        let la = rank_candidates(&params, &store, video, Modalities::BOTH, &a, Some(15)).unwrap();
        let lb = rank_candidates(&params, &store, video, Modalities::BOTH, &b, Some(15)).unwrap();
        assert_eq!(la, lb);
    }
}

#[test]
fn random_baseline_matches_closed_form_expectation() {
    let pool: Vec<String> = (0..40).map(|i| format!("m{i:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let test: Vec<PairRecord> = (0..30)
        .map(|i| PairRecord::new(format!("v{i}"), pool[rng.random_range(0..40)].clone(), SplitTag::Test))
        .collect();
    let popularity: BTreeMap<String, u64> = pool.iter().map(|m| (m.clone(), rng.random_range(1..50))).collect();
    let w = propensity_weights(&test, &popularity).unwrap();
    let k = 7;
    let expected: f64 = w.iter().map(|wi| wi * k as f64 / pool.len() as f64).sum();
    let trials = 1000;
    let samples: Vec<f64> = (0..trials)
        .map(|_| {
            let lists: HashMap<String, RankedList> =
                test.iter().map(|p| (p.video.clone(), baseline_random(&p.video, &pool, k, &mut rng))).collect();
            recall_at_k(&lists, &test, &w, k).unwrap()
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    assert!((mean - expected).abs() <= 3.0 * se, "mean {mean} expected {expected} se {se}");
}

#[test]
fn k_at_least_pool_size_gives_full_recall() {
    let (ds, store) = small_dataset(7);
    let params = params_for(&store, 8);
    let manifest = split_strong(&ds.manifest, SplitRatios::default(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let set = EvalSet::from_manifest(&manifest, SplitTag::Test).unwrap();
    let k = set.pool.len();
    assert_eq!(set.model_recalls(&params, &store, Modalities::BOTH, &[k]).unwrap()[0], 1.0);
    assert_eq!(set.random_recalls(&[k], &mut ChaCha8Rng::seed_from_u64(0)).unwrap()[0], 1.0);
    assert_eq!(set.popular_recalls(manifest.popularity(), &[k]).unwrap()[0], 1.0);
}

#[test]
fn report_is_monotone_and_omits_popular_for_strong() {
    let (ds, store) = small_dataset(11);
    let params = params_for(&store, 12);
    let ks = vec![1, 3, 5, 10];
    for (manifest, has_popular) in [
        (split_weak(&ds.manifest, SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap(), true),
        (split_strong(&ds.manifest, SplitRatios::default(), 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap(), false),
    ] {
        let opts = EvalOptions {
            ks: ks.clone(),
            ..EvalOptions::default()
        };
        let report = evaluate(&params, &store, &manifest, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(report.recall("popular", 1).is_some(), has_popular);
        for method in ["cmvae", "random"] {
            let r: Vec<f64> = ks.iter().map(|&k| report.recall(method, k).unwrap()).collect();
            assert!(r.windows(2).all(|w| w[0] <= w[1]), "{method}: {r:?}");
            assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        for line in report.to_json_lines().unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for field in ["split", "K", "recall", "pool_size", "n_test", "seed"] {
                assert!(v.get(field).is_some(), "missing {field} in {line}");
            }
        }
    }
}

#[test]
fn uniform_popularity_equals_hit_ratio() {
    let test: Vec<PairRecord> = (0..7).map(|i| PairRecord::new(format!("v{i}"), format!("m{i}"), SplitTag::Test)).collect();
    let pop: BTreeMap<String, u64> = (0..7).map(|i| (format!("m{i}"), 4)).collect();
    let w = propensity_weights(&test, &pop).unwrap();
    let lists: HashMap<String, RankedList> = test
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let top = if i % 2 == 0 { p.music.clone() } else { "other".into() };
            (p.video.clone(), RankedList {
                video: p.video.clone(),
                music: vec![top],
                scores: vec![1.0],
            })
        })
        .collect();
    assert_eq!(recall_at_k(&lists, &test, &w, 1).unwrap(), 4.0 / 7.0);
}

#[test]
fn parallel_ranking_matches_sequential() {
    let (ds, store) = small_dataset(13);
    let params = params_for(&store, 14);
    let manifest = split_weak(&ds.manifest, SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let set = EvalSet::from_manifest(&manifest, SplitTag::Test).unwrap();
    let parallel = set.rank_all(&params, &store, Modalities::BOTH, 10).unwrap();
    let pool = MusicPool::embed(&params, &store.music, &set.pool).unwrap();
    for p in &set.pairs {
        let seq = rank_candidates(&params, &store, &p.video, Modalities::BOTH, &pool, Some(10)).unwrap();
        assert_eq!(parallel[&p.video], seq);
    }
}

#[test]
fn visual_only_surrogate_uses_single_expert() {
    let (ds, store) = small_dataset(15);
    let params = params_for(&store, 16);
    let video = &ds.visual.ids()[3];
    let pool = MusicPool::embed(&params, &store.music, ds.music.ids()).unwrap();
    let visual_only = Modalities {
        visual: true,
        textual: false,
    };
    let list = rank_candidates(&params, &store, video, visual_only, &pool, Some(5)).unwrap();
    let z = params.visual_encoder.encode(store.visual.row_of(video).unwrap()).unwrap();
    let direct = pool.rank(video, z.mu(), Some(5)).unwrap();
    assert_eq!(list, direct);
}
