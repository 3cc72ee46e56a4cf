//! Video/music pair manifests and popularity sidecars.
//!
//! Manifest: one `video_id<TAB>music_id<TAB>split` record per line, with
//! optional `# key=value` metadata lines at the top. Popularity sidecar:
//! `music_id<TAB>count` per line.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    /// Not yet split (as written by the synthetic generator).
    Unassigned,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Unassigned => "none",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            "none" => Ok(SplitTag::Unassigned),
            other => Err(Error::Data(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRecord {
    pub video: String,
    pub music: String,
    pub split: SplitTag,
}

impl PairRecord {
    pub fn new(video: impl Into<String>, music: impl Into<String>, split: SplitTag) -> Self {
        PairRecord {
            video: video.into(),
            music: music.into(),
            split,
        }
    }
}

/// Ground-truth (video, music) pairs with split assignment and music
/// popularity counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pairs: Vec<PairRecord>,
    popularity: BTreeMap<String, u64>,
    metadata: BTreeMap<String, String>,
}

impl SplitManifest {
    /// Validates that every video appears once and every referenced music
    /// has a popularity count of at least one.
    pub fn new(pairs: Vec<PairRecord>, popularity: BTreeMap<String, u64>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if !seen.insert(p.video.as_str()) {
                return Err(Error::Data(format!("video {:?} appears in more than one pair", p.video)));
            }
            match popularity.get(&p.music) {
                Some(&c) if c >= 1 => {}
                Some(_) => return Err(Error::Data(format!("music {:?} has zero popularity", p.music))),
                None => return Err(Error::Data(format!("music {:?} has no popularity count", p.music))),
            }
        }
        Ok(SplitManifest {
            pairs,
            popularity,
            metadata: BTreeMap::new(),
        })
    }

    /// Popularity of each music taken as its number of pairs.
    pub fn with_usage_popularity(pairs: Vec<PairRecord>) -> Result<Self> {
        let mut pop = BTreeMap::new();
        for p in &pairs {
            *pop.entry(p.music.clone()).or_insert(0u64) += 1;
        }
        SplitManifest::new(pairs, pop)
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn popularity(&self) -> &BTreeMap<String, u64> {
        &self.popularity
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_owned(), value.into());
    }

    pub fn pairs_in(&self, tag: SplitTag) -> Vec<PairRecord> {
        self.pairs.iter().filter(|p| p.split == tag).cloned().collect()
    }

    pub fn music_in(&self, tag: SplitTag) -> BTreeSet<String> {
        self.pairs.iter().filter(|p| p.split == tag).map(|p| p.music.clone()).collect()
    }

    pub fn all_music(&self) -> BTreeSet<String> {
        self.pairs.iter().map(|p| p.music.clone()).collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.pairs.iter().filter(|p| p.split == tag).count()
    }

    /// Copy with split tags replaced; the pair order is kept.
    pub(crate) fn with_tags(&self, tags: &[SplitTag]) -> SplitManifest {
        let pairs = self
            .pairs
            .iter()
            .zip(tags)
            .map(|(p, &t)| PairRecord { split: t, ..p.clone() })
            .collect();
        SplitManifest {
            pairs,
            popularity: self.popularity.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for p in &self.pairs {
            out.push_str(&format!("{}\t{}\t{}\n", p.video, p.music, p.split));
        }
        out
    }

    pub fn popularity_text(&self) -> String {
        self.popularity.iter().map(|(m, c)| format!("{m}\t{c}\n")).collect()
    }

    pub fn save(&self, manifest: &Path, popularity: &Path) -> Result<()> {
        fs::write(manifest, self.manifest_text()).map_err(|e| Error::io(manifest, e))?;
        fs::write(popularity, self.popularity_text()).map_err(|e| Error::io(popularity, e))
    }

    pub fn load(manifest: &Path, popularity: &Path) -> Result<Self> {
        let pop_text = fs::read_to_string(popularity).map_err(|e| Error::io(popularity, e))?;
        let pop = parse_popularity(&pop_text).map_err(|e| prefix(popularity, e))?;
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let (pairs, metadata) = parse_manifest(&text).map_err(|e| prefix(manifest, e))?;
        let mut m = SplitManifest::new(pairs, pop).map_err(|e| prefix(manifest, e))?;
        m.metadata = metadata;
        Ok(m)
    }
}

fn prefix(path: &Path, e: Error) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    }
}

pub fn parse_manifest(text: &str) -> Result<(Vec<PairRecord>, BTreeMap<String, String>)> {
    let mut pairs = Vec::new();
    let mut metadata = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.trim().split_once('=') {
                metadata.insert(k.trim().to_owned(), v.trim().to_owned());
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Data(format!("line {}: expected video<TAB>music<TAB>split", n + 1)));
        }
        let split = fields[2].parse().map_err(|e: Error| Error::Data(format!("line {}: {e}", n + 1)))?;
        pairs.push(PairRecord::new(fields[0], fields[1], split));
    }
    Ok((pairs, metadata))
}

pub fn parse_popularity(text: &str) -> Result<BTreeMap<String, u64>> {
    let mut pop = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, count) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("line {}: expected music<TAB>count", n + 1)))?;
        let count: u64 = count
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad count {count:?}", n + 1)))?;
        if pop.insert(id.to_owned(), count).is_some() {
            return Err(Error::Data(format!("line {}: duplicate music id {id:?}", n + 1)));
        }
    }
    Ok(pop)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SplitManifest {
        let pairs = vec![
            PairRecord::new("v1", "m1", SplitTag::Train),
            PairRecord::new("v2", "m1", SplitTag::Test),
            PairRecord::new("v3", "m2", SplitTag::Val),
        ];
        let mut m = SplitManifest::with_usage_popularity(pairs).unwrap();
        m.set_metadata("mode", "weak");
        m
    }

    #[test]
    fn text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("m.tsv"), dir.path().join("p.tsv"));
        let m = sample();
        m.save(&a, &b).unwrap();
        assert_eq!(SplitManifest::load(&a, &b).unwrap(), m);
        assert_eq!(m.popularity()["m1"], 2);
    }

    #[test]
    fn duplicate_video_rejected() {
        let pairs = vec![PairRecord::new("v1", "m1", SplitTag::Train), PairRecord::new("v1", "m2", SplitTag::Train)];
        let err = SplitManifest::with_usage_popularity(pairs).unwrap_err().to_string();
        assert!(err.contains("v1"));
    }

    #[test]
    fn missing_popularity_rejected() {
        let pairs = vec![PairRecord::new("v1", "m1", SplitTag::Train)];
        assert!(SplitManifest::new(pairs.clone(), BTreeMap::new()).is_err());
        let zero = BTreeMap::from([("m1".to_string(), 0)]);
        assert!(SplitManifest::new(pairs, zero).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_manifest("v1\tm1\ttrain\nbroken line\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
