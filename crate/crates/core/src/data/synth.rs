//! Planted-structure synthetic dataset.
//!
//! Every music clip owns a latent point near its cluster prototype. Music
//! features and the features of every video that uses the clip are linear
//! projections of that point plus independent per-modality noise, so the
//! video-to-music mapping is recoverable by construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

use super::features::{EntityKind, FeatureTable};
use super::manifest::{PairRecord, SplitManifest, SplitTag};

/// Standard deviation of the additive noise per modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityNoise {
    pub music: f64,
    pub visual: f64,
    pub textual: f64,
}

impl ModalityNoise {
    pub fn uniform(sigma: f64) -> Self {
        ModalityNoise {
            music: sigma,
            visual: sigma,
            textual: sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_music: usize,
    /// Total videos; `None` keeps the raw popularity draws as counts.
    pub n_videos: Option<usize>,
    pub n_clusters: usize,
    /// Dimension of the planted latent space.
    pub planted_dim: usize,
    pub music_dim: usize,
    pub visual_dim: usize,
    pub textual_dim: usize,
    pub noise: ModalityNoise,
    /// Spread of music latents around their cluster prototype.
    pub cluster_spread: f64,
    pub popularity_shape: f64,
    pub popularity_scale: f64,
    pub min_videos_per_music: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_music: 200,
            n_videos: Some(8000),
            n_clusters: 20,
            planted_dim: 8,
            music_dim: 32,
            visual_dim: 32,
            textual_dim: 32,
            noise: ModalityNoise {
                music: 0.3,
                visual: 0.3,
                textual: 0.6,
            },
            cluster_spread: 0.35,
            popularity_shape: 1.0,
            popularity_scale: 49.0,
            min_videos_per_music: 3,
        }
    }
}

/// Generator internals kept for oracles.
#[derive(Clone, Debug)]
pub struct PlantedTruth {
    pub music_cluster: Vec<usize>,
    /// `n_music x planted_dim`
    pub music_latents: Matrix,
    pub music_projection: Matrix,
    pub visual_projection: Matrix,
    pub textual_projection: Matrix,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub music: FeatureTable,
    pub visual: FeatureTable,
    pub textual: FeatureTable,
    /// All pairs tagged [`SplitTag::Unassigned`]; popularity is the usage count.
    pub manifest: SplitManifest,
    pub truth: PlantedTruth,
}

impl SyntheticDataset {
    pub fn mean_videos_per_music(&self) -> f64 {
        self.manifest.pairs().len() as f64 / self.music.len() as f64
    }
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sd: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            sd * e
        })
        .collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

fn add_noise<R: Rng + ?Sized>(m: &mut Matrix, sd: f64, rng: &mut R) {
    for v in m.data_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += sd * e;
    }
}

/// Splits `total` into integer counts with a floor of `min` each, the
/// rest apportioned by `weights` (largest remainder, ties to lower index).
fn apportion(weights: &[f64], total: usize, min: usize) -> Vec<usize> {
    let spare = total - min * weights.len();
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / wsum * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + min).collect()
}

pub fn generate_synthetic<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SyntheticDataset> {
    if cfg.n_music == 0 || cfg.n_clusters == 0 {
        return Err(Error::Config("need at least one music clip and one cluster".into()));
    }
    if cfg.n_clusters > cfg.n_music {
        return Err(Error::Config(format!(
            "{} clusters but only {} music clips; clusters must not exceed music",
            cfg.n_clusters, cfg.n_music
        )));
    }
    if cfg.music_dim < 2 || cfg.visual_dim < 2 || cfg.textual_dim < 2 || cfg.planted_dim == 0 {
        return Err(Error::Config("feature dimensions must be at least 2".into()));
    }
    if let Some(n) = cfg.n_videos {
        if n < cfg.min_videos_per_music * cfg.n_music {
            return Err(Error::Config(format!(
                "{n} videos cannot give each of {} music clips {} videos",
                cfg.n_music, cfg.min_videos_per_music
            )));
        }
    }
    let noise = cfg.noise;
    if ![noise.music, noise.visual, noise.textual, cfg.cluster_spread].iter().all(|s| s.is_finite() && *s >= 0.0) {
        return Err(Error::Config("noise levels must be finite and non-negative".into()));
    }
    let popularity = Gamma::new(cfg.popularity_shape, cfg.popularity_scale)
        .map_err(|e| Error::Config(format!("popularity distribution: {e}")))?;

    let l = cfg.planted_dim;
    let prototypes = normal_matrix(rng, cfg.n_clusters, l, 1.0);
    let music_cluster: Vec<usize> = (0..cfg.n_music).map(|j| j % cfg.n_clusters).collect();
    let mut music_latents = prototypes.select_rows(&music_cluster);
    add_noise(&mut music_latents, cfg.cluster_spread, rng);

    let proj_sd = 1.0 / (l as f64).sqrt();
    let music_projection = normal_matrix(rng, l, cfg.music_dim, proj_sd);
    let visual_projection = normal_matrix(rng, l, cfg.visual_dim, proj_sd);
    let textual_projection = normal_matrix(rng, l, cfg.textual_dim, proj_sd);

    let draws: Vec<f64> = (0..cfg.n_music).map(|_| popularity.sample(rng)).collect();
    let counts: Vec<usize> = match cfg.n_videos {
        Some(total) => apportion(&draws, total, cfg.min_videos_per_music),
        None => draws
            .iter()
            .map(|d| (d.ceil() as usize).max(cfg.min_videos_per_music))
            .collect(),
    };

    let mut assignment: Vec<usize> = counts.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat_n(j, c)).collect();
    assignment.shuffle(rng);

    let music_ids: Vec<String> = (0..cfg.n_music).map(|j| format!("m{j:05}")).collect();
    let video_ids: Vec<String> = (0..assignment.len()).map(|i| format!("v{i:06}")).collect();

    let mut music_features = music_latents.matmul(&music_projection)?;
    add_noise(&mut music_features, noise.music, rng);

    let video_latents = music_latents.select_rows(&assignment);
    let mut visual = video_latents.matmul(&visual_projection)?;
    add_noise(&mut visual, noise.visual, rng);
    let mut textual = video_latents.matmul(&textual_projection)?;
    add_noise(&mut textual, noise.textual, rng);

    let pairs: Vec<PairRecord> = assignment
        .iter()
        .zip(&video_ids)
        .map(|(&j, v)| PairRecord::new(v.clone(), music_ids[j].clone(), SplitTag::Unassigned))
        .collect();
    let pop: BTreeMap<String, u64> = music_ids.iter().cloned().zip(counts.iter().map(|&c| c as u64)).collect();
    let mut manifest = SplitManifest::new(pairs, pop)?;
    manifest.set_metadata("generator", "planted");

    Ok(SyntheticDataset {
        music: FeatureTable::new(EntityKind::Music, music_ids, music_features)?,
        visual: FeatureTable::new(EntityKind::Visual, video_ids.clone(), visual)?,
        textual: FeatureTable::new(EntityKind::Textual, video_ids, textual)?,
        manifest,
        truth: PlantedTruth {
            music_cluster,
            music_latents,
            music_projection,
            visual_projection,
            textual_projection,
        },
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn apportion_respects_total_and_floor() {
        let c = apportion(&[1.0, 10.0, 0.1, 5.0], 40, 3);
        assert_eq!(c.iter().sum::<usize>(), 40);
        assert!(c.iter().all(|&x| x >= 3));
        assert!(c[1] > c[3] && c[3] > c[0]);
    }

    #[test]
    fn rejects_more_clusters_than_music() {
        let cfg = SynthConfig {
            n_music: 200,
            n_clusters: 500,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig {
            n_music: 30,
            n_videos: Some(300),
            n_clusters: 5,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.visual.to_bytes(), b.visual.to_bytes());
        assert_eq!(a.music.to_bytes(), b.music.to_bytes());
        assert_eq!(a.manifest.manifest_text(), b.manifest.manifest_text());
    }

    #[test]
    fn counts_match_requested_total() {
        let d = generate_synthetic(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d.manifest.pairs().len(), 8000);
        assert_eq!(d.visual.len(), 8000);
        assert!(d.manifest.popularity().values().all(|&c| c >= 3));
        assert_eq!(d.manifest.popularity().values().sum::<u64>(), 8000);
    }
}
