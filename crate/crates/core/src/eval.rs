//! Candidate ranking, popularity-debiased Recall@K and the Random /
//! PopularRank baselines.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureStore, FeatureTable, PairRecord, SplitManifest, SplitMode, SplitTag};
use crate::error::{Error, Result};
use crate::model::CmvaeParams;
use crate::ndmath::{self, Matrix};

pub const DEFAULT_KS: [usize; 4] = [10, 15, 20, 25];

/// Music recommended for one video, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub video: String,
    pub music: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.music.len()
    }

    pub fn is_empty(&self) -> bool {
        self.music.is_empty()
    }

    pub fn contains_in_top(&self, music: &str, k: usize) -> bool {
        self.music.iter().take(k).any(|m| m == music)
    }
}

/// Candidate music with their posterior-mean embeddings.
#[derive(Clone, Debug)]
pub struct MusicPool {
    ids: Vec<String>,
    embeddings: Matrix,
}

impl MusicPool {
    /// Embeds `ids` (looked up in `table`) with the music encoder means.
    pub fn embed(params: &CmvaeParams, table: &FeatureTable, ids: &[String]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("empty music candidate pool".into()));
        }
        let rows: Vec<usize> = ids.iter().map(|id| table.require(id)).collect::<Result<_>>()?;
        let (mu, _) = params.music_encoder.encode_batch(&table.matrix().select_rows(&rows))?;
        Ok(MusicPool {
            ids: ids.to_vec(),
            embeddings: mu,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Ranks the pool against a video latent: descending dot product,
    /// ties by ascending music id. `top` truncates the list.
    pub fn rank(&self, video: &str, z_v: &[f64], top: Option<usize>) -> Result<RankedList> {
        if z_v.len() != self.embeddings.cols() {
            return Err(Error::dim("rank", format!("video latent {}", z_v.len()), format!("pool latent {}", self.embeddings.cols())));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.ids.len())
            .map(|j| (ndmath::dot(z_v, self.embeddings.row(j)), j))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let keep = top.unwrap_or(scored.len()).min(scored.len());
        if keep < scored.len() && keep > 0 {
            scored.select_nth_unstable_by(keep - 1, order);
            scored.truncate(keep);
        }
        scored.sort_unstable_by(order);
        scored.truncate(keep);
        Ok(RankedList {
            video: video.to_owned(),
            music: scored.iter().map(|&(_, j)| self.ids[j].clone()).collect(),
            scores: scored.iter().map(|&(s, _)| s).collect(),
        })
    }
}

/// Which video modalities are fed to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modalities {
    pub visual: bool,
    pub textual: bool,
}

impl Modalities {
    pub const BOTH: Modalities = Modalities {
        visual: true,
        textual: true,
    };

    pub fn label(self) -> &'static str {
        match (self.visual, self.textual) {
            (true, true) => "visual+textual",
            (true, false) => "visual",
            (false, true) => "textual",
            (false, false) => "none",
        }
    }
}

/// Posterior mean of the joint video latent (no sampling at inference).
pub fn video_latent(params: &CmvaeParams, store: &FeatureStore, video: &str, modalities: Modalities) -> Result<Vec<f64>> {
    let visual = if modalities.visual {
        Some(store.visual.row_of(video).ok_or_else(|| missing("visual", video))?)
    } else {
        None
    };
    let textual = if modalities.textual {
        Some(store.textual.row_of(video).ok_or_else(|| missing("textual", video))?)
    } else {
        None
    };
    Ok(params.encode_video(visual, textual)?.mu().to_vec())
}

fn missing(kind: &str, id: &str) -> Error {
    Error::Data(format!("{kind} features for video {id:?} not found"))
}

pub fn rank_candidates(
    params: &CmvaeParams,
    store: &FeatureStore,
    video: &str,
    modalities: Modalities,
    pool: &MusicPool,
    top: Option<usize>,
) -> Result<RankedList> {
    let z_v = video_latent(params, store, video, modalities)?;
    pool.rank(video, &z_v, top)
}

/// Inverse-popularity weights of the test videos, normalized to sum to one.
pub fn propensity_weights(test: &[PairRecord], popularity: &BTreeMap<String, u64>) -> Result<Vec<f64>> {
    let inv: Vec<f64> = test
        .iter()
        .map(|p| match popularity.get(&p.music) {
            Some(&c) if c >= 1 => Ok(1.0 / c as f64),
            _ => Err(Error::Data(format!("music {:?} has no positive popularity count", p.music))),
        })
        .collect::<Result<_>>()?;
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|w| w / total).collect())
}

/// Weighted hit ratio of the ground-truth music within the top `k`.
///
/// Computed as hit weight over total weight, so rounding in the
/// normalized weights cannot push an all-hit result off 1.0; with equal
/// weights the plain ratio `hits / n` is returned.
pub fn recall_at_k(lists: &HashMap<String, RankedList>, test: &[PairRecord], weights: &[f64], k: usize) -> Result<f64> {
    if test.len() != weights.len() {
        return Err(Error::dim("recall_at_k", format!("{} test pairs", test.len()), format!("{} weights", weights.len())));
    }
    if test.is_empty() {
        return Err(Error::Data("recall over an empty test set".into()));
    }
    let (mut hit_weight, mut total, mut hits) = (0.0, 0.0, 0usize);
    for (p, w) in test.iter().zip(weights) {
        let list = lists
            .get(&p.video)
            .ok_or_else(|| Error::Data(format!("no ranked list for test video {:?}", p.video)))?;
        total += w;
        if list.contains_in_top(&p.music, k) {
            hit_weight += w;
            hits += 1;
        }
    }
    if weights.iter().all(|w| *w == weights[0]) {
        return Ok(hits as f64 / test.len() as f64);
    }
    Ok(hit_weight / total)
}

/// `k` music drawn uniformly without replacement.
pub fn baseline_random<R: Rng + ?Sized>(video: &str, pool: &[String], k: usize, rng: &mut R) -> RankedList {
    let k = k.min(pool.len());
    let picks = index::sample(rng, pool.len(), k);
    RankedList {
        video: video.to_owned(),
        music: picks.iter().map(|i| pool[i].clone()).collect(),
        scores: (0..k).map(|r| (k - r) as f64).collect(),
    }
}

/// Top-`k` pool music by popularity, ties by id.
pub fn baseline_popular(video: &str, pool: &[String], popularity: &BTreeMap<String, u64>, k: usize) -> RankedList {
    let mut ranked: Vec<(u64, &String)> = pool.iter().map(|m| (popularity.get(m).copied().unwrap_or(0), m)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    ranked.truncate(k);
    RankedList {
        video: video.to_owned(),
        music: ranked.iter().map(|(_, m)| (*m).clone()).collect(),
        scores: ranked.iter().map(|(c, _)| *c as f64).collect(),
    }
}

/// Candidate pool for evaluating the `tag` split: all training music under
/// weak generalization, the music of the split itself under strong.
pub fn candidate_pool(manifest: &SplitManifest, mode: SplitMode, tag: SplitTag) -> Vec<String> {
    let set = match mode {
        SplitMode::Weak => manifest.music_in(SplitTag::Train),
        SplitMode::Strong => manifest.music_in(tag),
    };
    set.into_iter().collect()
}

/// Pairs, pool and weights for evaluating one split.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub pairs: Vec<PairRecord>,
    pub pool: Vec<String>,
    pub weights: Vec<f64>,
}

impl EvalSet {
    pub fn from_manifest(manifest: &SplitManifest, tag: SplitTag) -> Result<Self> {
        let mode = SplitMode::of(manifest)?;
        let pairs = manifest.pairs_in(tag);
        if pairs.is_empty() {
            return Err(Error::Data(format!("no {tag} pairs in manifest")));
        }
        let pool = candidate_pool(manifest, mode, tag);
        let weights = propensity_weights(&pairs, manifest.popularity())?;
        Ok(EvalSet { pairs, pool, weights })
    }

    /// Ranked lists of the model for every pair, truncated to `top`.
    pub fn rank_all(
        &self,
        params: &CmvaeParams,
        store: &FeatureStore,
        modalities: Modalities,
        top: usize,
    ) -> Result<HashMap<String, RankedList>> {
        let pool = MusicPool::embed(params, &store.music, &self.pool)?;
        let lists: Vec<RankedList> = self
            .pairs
            .par_iter()
            .map(|p| rank_candidates(params, store, &p.video, modalities, &pool, Some(top)))
            .collect::<Result<_>>()?;
        Ok(lists.into_iter().map(|l| (l.video.clone(), l)).collect())
    }

    /// Model Recall@K for each of `ks`.
    pub fn model_recalls(&self, params: &CmvaeParams, store: &FeatureStore, modalities: Modalities, ks: &[usize]) -> Result<Vec<f64>> {
        let top = ks.iter().copied().max().unwrap_or(0);
        let lists = self.rank_all(params, store, modalities, top)?;
        ks.iter().map(|&k| recall_at_k(&lists, &self.pairs, &self.weights, k)).collect()
    }

    pub fn random_recalls<R: Rng + ?Sized>(&self, ks: &[usize], rng: &mut R) -> Result<Vec<f64>> {
        let top = ks.iter().copied().max().unwrap_or(0);
        let lists: HashMap<String, RankedList> = self
            .pairs
            .iter()
            .map(|p| (p.video.clone(), baseline_random(&p.video, &self.pool, top, rng)))
            .collect();
        ks.iter().map(|&k| recall_at_k(&lists, &self.pairs, &self.weights, k)).collect()
    }

    pub fn popular_recalls(&self, popularity: &BTreeMap<String, u64>, ks: &[usize]) -> Result<Vec<f64>> {
        let top = ks.iter().copied().max().unwrap_or(0);
        let shared = baseline_popular("", &self.pool, popularity, top);
        let lists: HashMap<String, RankedList> = self
            .pairs
            .iter()
            .map(|p| {
                let mut l = shared.clone();
                l.video = p.video.clone();
                (p.video.clone(), l)
            })
            .collect();
        ks.iter().map(|&k| recall_at_k(&lists, &self.pairs, &self.weights, k)).collect()
    }

    /// Closed-form expected Recall@K of the random baseline.
    pub fn expected_random_recall(&self, k: usize) -> f64 {
        (k as f64 / self.pool.len() as f64).min(1.0)
    }
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub split: String,
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
    pub pool_size: usize,
    pub n_test: usize,
    pub seed: u64,
    pub modalities: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<ReportRecord>,
}

impl EvalReport {
    pub fn recall(&self, method: &str, k: usize) -> Option<f64> {
        self.records.iter().find(|r| r.method == method && r.k == k).map(|r| r.recall)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "split={} method={} K={} recall={:.6} pool_size={} n_test={} seed={} modalities={}",
                r.split, r.method, r.k, r.recall, r.pool_size, r.n_test, r.seed, r.modalities
            );
        }
        out
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, text_path: &Path, records_path: &Path) -> Result<()> {
        fs::write(text_path, self.to_text()).map_err(|e| Error::io(text_path, e))?;
        fs::write(records_path, self.to_json_lines()?).map_err(|e| Error::io(records_path, e))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub modalities: Modalities,
    pub tag: SplitTag,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: DEFAULT_KS.to_vec(),
            modalities: Modalities::BOTH,
            tag: SplitTag::Test,
            seed: 0,
        }
    }
}

/// Model plus baselines on one split. PopularRank is reported only under
/// weak generalization, where test music popularity is observable.
pub fn evaluate<R: Rng + ?Sized>(
    params: &CmvaeParams,
    store: &FeatureStore,
    manifest: &SplitManifest,
    opts: &EvalOptions,
    rng: &mut R,
) -> Result<EvalReport> {
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(Error::Config(format!("K values must be positive, got {:?}", opts.ks)));
    }
    let mode = SplitMode::of(manifest)?;
    let set = EvalSet::from_manifest(manifest, opts.tag)?;
    let mut methods: Vec<(&str, Vec<f64>, &str)> = vec![(
        "cmvae",
        set.model_recalls(params, store, opts.modalities, &opts.ks)?,
        opts.modalities.label(),
    )];
    methods.push(("random", set.random_recalls(&opts.ks, rng)?, "-"));
    if mode == SplitMode::Weak {
        methods.push(("popular", set.popular_recalls(manifest.popularity(), &opts.ks)?, "-"));
    }
    let split = format!("{}/{}", mode.as_str(), opts.tag);
    let mut report = EvalReport::default();
    for (method, recalls, modalities) in methods {
        for (&k, recall) in opts.ks.iter().zip(recalls) {
            report.records.push(ReportRecord {
                split: split.clone(),
                method: method.to_owned(),
                k,
                recall,
                pool_size: set.pool.len(),
                n_test: set.pairs.len(),
                seed: opts.seed,
                modalities: modalities.to_owned(),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(v: &str, m: &str) -> PairRecord {
        PairRecord::new(v, m, SplitTag::Test)
    }

    fn list(v: &str, music: &[&str]) -> RankedList {
        RankedList {
            video: v.into(),
            music: music.iter().map(|m| m.to_string()).collect(),
            scores: (0..music.len()).rev().map(|s| s as f64).collect(),
        }
    }

    #[test]
    fn weights_hand_example() {
        let test = [pair("a", "m1"), pair("b", "m3")];
        let pop = BTreeMap::from([("m1".to_string(), 1), ("m3".to_string(), 3)]);
        let w = propensity_weights(&test, &pop).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn uniform_popularity_gives_uniform_weights() {
        let test: Vec<_> = (0..4).map(|i| pair(&format!("v{i}"), &format!("m{i}"))).collect();
        let pop = (0..4).map(|i| (format!("m{i}"), 7)).collect();
        assert_eq!(propensity_weights(&test, &pop).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn missing_popularity_is_data_error() {
        let err = propensity_weights(&[pair("a", "mx")], &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn recall_hand_examples() {
        let test = [pair("a", "m1"), pair("b", "m3")];
        let lists: HashMap<_, _> = [("a".to_string(), list("a", &["m1", "m2"])), ("b".to_string(), list("b", &["m2", "m1"]))].into();
        assert!((recall_at_k(&lists, &test, &[0.75, 0.25], 2).unwrap() - 0.75).abs() < 1e-15);
        assert!((recall_at_k(&lists, &test, &[0.5, 0.5], 1).unwrap() - 0.5).abs() < 1e-15);
        let hits: HashMap<_, _> = [("a".to_string(), list("a", &["m1"])), ("b".to_string(), list("b", &["m3"]))].into();
        assert_eq!(recall_at_k(&hits, &test, &[0.75, 0.25], 1).unwrap(), 1.0);
    }

    #[test]
    fn recall_missing_list_is_data_error() {
        let test = [pair("a", "m1")];
        assert!(matches!(recall_at_k(&HashMap::new(), &test, &[1.0], 5), Err(Error::Data(_))));
    }

    #[test]
    fn popular_baseline_orders_by_count() {
        let pop = BTreeMap::from([("m1".to_string(), 5), ("m2".to_string(), 1)]);
        let l = baseline_popular("v", &["m2".to_string(), "m1".to_string()], &pop, 10);
        assert_eq!(l.music, vec!["m1", "m2"]);
    }

    #[test]
    fn random_baseline_has_no_duplicates() {
        use rand::SeedableRng;
        let pool: Vec<String> = (0..30).map(|i| format!("m{i}")).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let l = baseline_random("v", &pool, 12, &mut rng);
        let mut seen = l.music.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }
}
