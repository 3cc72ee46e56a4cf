//! Weak and strong generalization splits.
//!
//! Weak: every music clip's videos are divided train/val/test, so each
//! test music also occurs in training. Strong: music clips themselves are
//! divided (stratified by popularity) and carry all their videos along, so
//! test music is never seen in training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

use super::manifest::{SplitManifest, SplitTag};

/// Relative sizes of train, validation and test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8.0,
            val: 1.0,
            test: 1.0,
        }
    }
}

impl SplitRatios {
    fn shares(&self) -> Result<(f64, f64)> {
        let total = self.train + self.val + self.test;
        if !(self.train > 0.0 && self.val > 0.0 && self.test > 0.0 && total.is_finite()) {
            return Err(Error::Config(format!("split ratios must be positive, got {self:?}")));
        }
        Ok((self.val / total, self.test / total))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Weak,
    Strong,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Weak => "weak",
            SplitMode::Strong => "strong",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(SplitMode::Weak),
            "strong" => Ok(SplitMode::Strong),
            other => Err(Error::Config(format!("unknown split mode {other:?} (expected weak|strong)"))),
        }
    }

    /// Split mode recorded in a manifest's metadata.
    pub fn of(manifest: &SplitManifest) -> Result<Self> {
        let mode = manifest
            .metadata()
            .get("mode")
            .ok_or_else(|| Error::Data("manifest carries no split mode; run `split` first".into()))?;
        SplitMode::parse(mode).map_err(|_| Error::Data(format!("manifest has unknown split mode {mode:?}")))
    }
}

/// Pair indices grouped by music id, in music-id order.
fn videos_by_music(manifest: &SplitManifest) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in manifest.pairs().iter().enumerate() {
        groups.entry(p.music.as_str()).or_default().push(i);
    }
    groups
}

/// Per music clip, its videos are shuffled and cut into train/val/test.
///
/// Validation and test each get `floor(n * share)` videos but at least
/// one; the remainder goes to train. Clips with fewer than three videos
/// go wholly to train and are listed in the `weak_small_clips` metadata.
pub fn split_weak<R: Rng + ?Sized>(manifest: &SplitManifest, ratios: SplitRatios, rng: &mut R) -> Result<SplitManifest> {
    let (val_share, test_share) = ratios.shares()?;
    let mut tags = vec![SplitTag::Train; manifest.pairs().len()];
    let mut small = Vec::new();
    for (music, mut idx) in videos_by_music(manifest) {
        let n = idx.len();
        if n < 3 {
            small.push(music.to_owned());
            continue;
        }
        idx.shuffle(rng);
        let n_val = ((n as f64 * val_share).floor() as usize).max(1);
        let n_test = ((n as f64 * test_share).floor() as usize).max(1);
        for &i in &idx[..n_val] {
            tags[i] = SplitTag::Val;
        }
        for &i in &idx[n_val..n_val + n_test] {
            tags[i] = SplitTag::Test;
        }
    }
    let mut out = manifest.with_tags(&tags);
    out.set_metadata("mode", "weak");
    if !small.is_empty() {
        out.set_metadata("weak_small_clips", small.join(","));
    }
    Ok(out)
}

/// Equal-frequency popularity strata over music ids (ascending
/// popularity, ties by id). Strata with fewer than three music are merged
/// into the next one up, the last into its predecessor.
pub fn popularity_strata(manifest: &SplitManifest, n_strata: usize) -> Result<(Vec<Vec<String>>, usize)> {
    if n_strata == 0 {
        return Err(Error::Config("number of strata must be at least 1".into()));
    }
    let referenced = manifest.all_music();
    let mut music: Vec<(u64, &str)> = manifest
        .popularity()
        .iter()
        .filter(|(m, _)| referenced.contains(*m))
        .map(|(m, c)| (*c, m.as_str()))
        .collect();
    music.sort_unstable();
    let total = music.len();
    let mut strata: Vec<Vec<String>> = (0..n_strata)
        .map(|s| {
            let (lo, hi) = (s * total / n_strata, (s + 1) * total / n_strata);
            music[lo..hi].iter().map(|(_, m)| (*m).to_owned()).collect()
        })
        .collect();
    let mut merges = 0;
    let mut s = 0;
    while s < strata.len() {
        if strata[s].len() >= 3 || strata.len() == 1 {
            s += 1;
            continue;
        }
        let moved = strata.remove(s);
        merges += 1;
        if s < strata.len() {
            let mut merged = moved;
            merged.append(&mut strata[s]);
            strata[s] = merged;
        } else {
            strata[s - 1].extend(moved);
            s -= 1;
        }
    }
    Ok((strata, merges))
}

/// Music clips are split within popularity strata; all videos follow
/// their music. Validation and test take `round(n * share)` clips of each
/// stratum, at least one each.
pub fn split_strong<R: Rng + ?Sized>(
    manifest: &SplitManifest,
    ratios: SplitRatios,
    n_strata: usize,
    rng: &mut R,
) -> Result<SplitManifest> {
    let (val_share, test_share) = ratios.shares()?;
    let (strata, merges) = popularity_strata(manifest, n_strata)?;
    let mut music_tag: BTreeMap<String, SplitTag> = BTreeMap::new();
    for mut stratum in strata.iter().cloned() {
        stratum.shuffle(rng);
        let n = stratum.len();
        let (n_val, n_test) = if n >= 3 {
            (
                ((n as f64 * val_share).round() as usize).max(1),
                ((n as f64 * test_share).round() as usize).max(1),
            )
        } else {
            (0, 0)
        };
        for (i, m) in stratum.into_iter().enumerate() {
            let tag = if i < n_val {
                SplitTag::Val
            } else if i < n_val + n_test {
                SplitTag::Test
            } else {
                SplitTag::Train
            };
            music_tag.insert(m, tag);
        }
    }
    let tags: Vec<SplitTag> = manifest.pairs().iter().map(|p| music_tag[&p.music]).collect();
    let mut out = manifest.with_tags(&tags);
    out.set_metadata("mode", "strong");
    out.set_metadata("strata", strata.len().to_string());
    out.set_metadata("strata_requested", n_strata.to_string());
    out.set_metadata("strata_merged", merges.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::manifest::PairRecord;

    /// Music `m{i}` gets `counts[i]` videos.
    fn manifest(counts: &[usize]) -> SplitManifest {
        let mut pairs = Vec::new();
        for (m, &c) in counts.iter().enumerate() {
            for v in 0..c {
                pairs.push(PairRecord::new(format!("v{m}_{v}"), format!("m{m:03}"), SplitTag::Unassigned));
            }
        }
        SplitManifest::with_usage_popularity(pairs).unwrap()
    }

    #[test]
    fn weak_ten_videos_is_eight_one_one() {
        let out = split_weak(&manifest(&[10]), SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((out.count(SplitTag::Train), out.count(SplitTag::Val), out.count(SplitTag::Test)), (8, 1, 1));
    }

    #[test]
    fn weak_three_videos_one_each() {
        let out = split_weak(&manifest(&[3]), SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((out.count(SplitTag::Train), out.count(SplitTag::Val), out.count(SplitTag::Test)), (1, 1, 1));
    }

    #[test]
    fn weak_small_clip_goes_to_train() {
        let out = split_weak(&manifest(&[2, 5]), SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.pairs().iter().filter(|p| p.music == "m000").all(|p| p.split == SplitTag::Train));
        assert_eq!(out.metadata()["weak_small_clips"], "m000");
    }

    #[test]
    fn weak_test_music_seen_in_train() {
        let counts: Vec<usize> = (0..40).map(|i| 3 + (i * 7) % 23).collect();
        let out = split_weak(&manifest(&counts), SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(out.music_in(SplitTag::Test).is_subset(&out.music_in(SplitTag::Train)));
    }

    #[test]
    fn strong_is_disjoint_and_one_stratum_is_plain() {
        let counts: Vec<usize> = (0..60).map(|i| 3 + (i * 11) % 37).collect();
        let m = manifest(&counts);
        for strata in [1, 10] {
            let out = split_strong(&m, SplitRatios::default(), strata, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert!(out.music_in(SplitTag::Train).is_disjoint(&out.music_in(SplitTag::Test)));
            assert!(out.music_in(SplitTag::Train).is_disjoint(&out.music_in(SplitTag::Val)));
        }
        let (strata, merges) = popularity_strata(&m, 1).unwrap();
        assert_eq!((strata.len(), merges), (1, 0));
        let plain = split_strong(&m, SplitRatios::default(), 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(plain.music_in(SplitTag::Test).len(), 6);
    }

    #[test]
    fn degenerate_strata_merge_upward() {
        let m = manifest(&[3, 4, 5, 6, 7]);
        let (strata, merges) = popularity_strata(&m, 4).unwrap();
        assert!(strata.iter().all(|s| s.len() >= 3));
        assert_eq!(strata.iter().map(Vec::len).sum::<usize>(), 5);
        assert!(merges > 0);
    }

    #[test]
    fn strong_per_stratum_test_share() {
        let counts: Vec<usize> = (0..200).map(|i| 3 + (i * 13) % 97).collect();
        let m = manifest(&counts);
        let out = split_strong(&m, SplitRatios::default(), 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let test = out.music_in(SplitTag::Test);
        for stratum in popularity_strata(&m, 10).unwrap().0 {
            let n_test = stratum.iter().filter(|s| test.contains(*s)).count() as f64;
            assert!((n_test - 0.1 * stratum.len() as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn same_seed_same_split() {
        let m = manifest(&[5, 9, 12, 3, 30]);
        let a = split_weak(&m, SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = split_weak(&m, SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.manifest_text(), b.manifest_text());
    }
}
