//! Command-line entry point: synth, split, train, eval, recommend.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{
    fit_gamma_mle, generate_synthetic, split_strong, split_weak, FeatureStore, FeatureTable, ModalityNoise, SplitManifest, SplitMode,
    SplitRatios, SplitTag, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{candidate_pool, evaluate, rank_candidates, EvalOptions, Modalities, MusicPool, DEFAULT_KS};
use crate::train::{fit, Checkpoint, Profile, TrainConfig, CONFIG_KEYS};

pub const MUSIC_FILE: &str = "music.cmft";
pub const VISUAL_FILE: &str = "visual.cmft";
pub const TEXTUAL_FILE: &str = "textual.cmft";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const POPULARITY_FILE: &str = "popularity.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.txt";

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

const AFTER_HELP: &str = "\
Settings are resolved as: command-line flag, then environment variable
(paths only: CMVAE_DATA, CMVAE_SPLIT, CMVAE_CHECKPOINT, CMVAE_REPORT),
then the --config file (flat key=value lines, # comments), then defaults.

Exit codes:
  0  success
  1  internal contract or dimension error
  2  configuration error (bad flag, config key or value)
  3  data error (missing, malformed or inconsistent input files)
  4  numeric failure (non-finite training loss)";

#[derive(Parser, Debug)]
#[command(name = "cmvae", version, about = "Cross-modal VAE background music recommendation", after_help = AFTER_HELP)]
struct Cli {
    /// Flat key=value config file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted synthetic dataset.
    Synth(SynthArgs),
    /// Assign pairs to train/val/test (weak or strong generalization).
    Split(SplitArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint with debiased Recall@K against baselines.
    Eval(EvalArgs),
    /// Print the top-K music for one video.
    Recommend(RecommendArgs),
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory [default: data]
    #[arg(long, env = "CMVAE_DATA", value_name = "DIR", alias = "out")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    data: DataArg,
    /// Number of music clips [default: 200]
    #[arg(long)]
    music: Option<usize>,
    /// Number of videos [default: 8000]
    #[arg(long)]
    videos: Option<usize>,
    /// Number of latent clusters [default: 20]
    #[arg(long)]
    clusters: Option<usize>,
    /// Feature width of every modality [default: 32]
    #[arg(long)]
    dim: Option<usize>,
    /// Noise sd of music / visual / textual features [default: 0.3,0.3,0.6]
    #[arg(long, value_name = "M,V,T")]
    noise: Option<String>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArg,
    /// weak | strong [default: weak]
    #[arg(long)]
    mode: Option<String>,
    /// Popularity strata for the strong split [default: 10]
    #[arg(long)]
    strata: Option<usize>,
    /// Output manifest [default: <data>/split.tsv]
    #[arg(long, env = "CMVAE_SPLIT", value_name = "FILE")]
    split: Option<PathBuf>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelPaths {
    #[command(flatten)]
    data: DataArg,
    /// Split manifest [default: <data>/split.tsv]
    #[arg(long, env = "CMVAE_SPLIT", value_name = "FILE")]
    split: Option<PathBuf>,
    /// Checkpoint file [default: <data>/model.ckpt]
    #[arg(long, env = "CMVAE_CHECKPOINT", value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    paths: ModelPaths,
    /// Training log, one JSON record per epoch [default: <checkpoint>.log.jsonl]
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// weak | strong | desk [default: desk]
    #[arg(long)]
    profile: Option<String>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum epochs (profile default otherwise)
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate (profile default otherwise)
    #[arg(long)]
    lr: Option<f64>,
    /// Reconstruction weight (profile default otherwise)
    #[arg(long)]
    beta: Option<f64>,
    /// Ranking weight (profile default otherwise)
    #[arg(long)]
    gamma: Option<f64>,
    /// Any training key, e.g. --set batch_size=128 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    paths: ModelPaths,
    /// Text report [default: <data>/report.txt]
    #[arg(long, env = "CMVAE_REPORT", value_name = "FILE")]
    report: Option<PathBuf>,
    /// JSON-lines records [default: report path with .jsonl extension]
    #[arg(long, value_name = "FILE")]
    records: Option<PathBuf>,
    /// Comma-separated cutoffs [default: 10,15,20,25]
    #[arg(long)]
    k: Option<String>,
    /// Split to evaluate: test | val [default: test]
    #[arg(long)]
    tag: Option<String>,
    /// Encode videos from visual features only.
    #[arg(long)]
    drop_textual: bool,
    /// Seed of the random baseline [default: the checkpoint's training seed]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    #[command(flatten)]
    paths: ModelPaths,
    /// Video id to recommend for.
    #[arg(long)]
    video: String,
    /// Number of music to list [default: 10]
    #[arg(long)]
    k: Option<usize>,
    /// Encode the video from visual features only.
    #[arg(long)]
    drop_textual: bool,
}

const FILE_KEYS: [&str; 17] = [
    "data", "split", "checkpoint", "report", "records", "log", "profile", "mode", "strata", "k", "tag", "music", "videos", "clusters",
    "dim", "noise", "drop_textual",
];

/// Values from a `--config` file.
#[derive(Debug, Default)]
struct FileConfig {
    values: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{} line {}: expected key=value", path.display(), n + 1)))?;
            let k = k.trim();
            if !FILE_KEYS.contains(&k) && !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!("{} line {}: unknown key {k:?}", path.display(), n + 1)));
            }
            values.insert(k.to_owned(), v.trim().to_owned());
        }
        Ok(FileConfig {
            values,
            path: Some(path.to_path_buf()),
        })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                let file = self.path.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
                Error::Config(format!("{file}: bad value {v:?} for {key}"))
            }),
        }
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn print_digest(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    say!("sha256 {}  {}", hex(&Sha256::digest(&bytes)), path.display());
    Ok(())
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad {what} entry {x:?} in {s:?}"))))
        .collect()
}

fn parse_tag(s: &str) -> Result<SplitTag> {
    match s {
        "test" => Ok(SplitTag::Test),
        "val" => Ok(SplitTag::Val),
        other => Err(Error::Config(format!("evaluation tag must be test or val, got {other:?}"))),
    }
}

struct Resolved {
    data: PathBuf,
    split: PathBuf,
    checkpoint: PathBuf,
}

impl Resolved {
    fn data_dir(arg: &DataArg, file: &FileConfig) -> Result<PathBuf> {
        file.pick(arg.data.clone(), "data", PathBuf::from("data"))
    }

    fn new(paths: &ModelPaths, file: &FileConfig) -> Result<Self> {
        let data = Resolved::data_dir(&paths.data, file)?;
        Ok(Resolved {
            split: file.pick(paths.split.clone(), "split", data.join(SPLIT_FILE))?,
            checkpoint: file.pick(paths.checkpoint.clone(), "checkpoint", data.join(CHECKPOINT_FILE))?,
            data,
        })
    }

    fn store(&self) -> Result<FeatureStore> {
        Ok(FeatureStore {
            music: FeatureTable::load(&self.data.join(MUSIC_FILE))?,
            visual: FeatureTable::load(&self.data.join(VISUAL_FILE))?,
            textual: FeatureTable::load(&self.data.join(TEXTUAL_FILE))?,
        })
    }

    fn manifest(&self) -> Result<SplitManifest> {
        SplitManifest::load(&self.split, &self.data.join(POPULARITY_FILE))
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.render().to_string().trim_end().to_owned())),
    };
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, &file),
        Command::Split(a) => cmd_split(&a, &file),
        Command::Train(a) => cmd_train(&a, &file),
        Command::Eval(a) => cmd_eval(&a, &file),
        Command::Recommend(a) => cmd_recommend(&a, &file),
    }
}

fn cmd_synth(a: &SynthArgs, file: &FileConfig) -> Result<()> {
    let dir = Resolved::data_dir(&a.data, file)?;
    if !dir.is_dir() {
        return Err(Error::io(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist")));
    }
    let defaults = SynthConfig::default();
    let dim = file.pick(a.dim, "dim", defaults.music_dim)?;
    let noise = match file.pick(a.noise.clone(), "noise", String::new())? {
        s if s.is_empty() => defaults.noise,
        s => match parse_list::<f64>(&s, "noise")?[..] {
            [m, v, t] => ModalityNoise {
                music: m,
                visual: v,
                textual: t,
            },
            [x] => ModalityNoise::uniform(x),
            _ => return Err(Error::Config(format!("noise takes 1 or 3 values, got {s:?}"))),
        },
    };
    let cfg = SynthConfig {
        n_music: file.pick(a.music, "music", defaults.n_music)?,
        n_videos: Some(file.pick(a.videos, "videos", defaults.n_videos.unwrap_or(0))?),
        n_clusters: file.pick(a.clusters, "clusters", defaults.n_clusters)?,
        music_dim: dim,
        visual_dim: dim,
        textual_dim: dim,
        noise,
        ..defaults
    };
    let seed = file.pick(a.seed, "seed", 0)?;
    let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let files = [
        dir.join(MUSIC_FILE),
        dir.join(VISUAL_FILE),
        dir.join(TEXTUAL_FILE),
        dir.join(PAIRS_FILE),
        dir.join(POPULARITY_FILE),
    ];
    ds.music.save(&files[0])?;
    ds.visual.save(&files[1])?;
    ds.textual.save(&files[2])?;
    ds.manifest.save(&files[3], &files[4])?;
    say!(
        "n_music={} n_videos={} mean_videos_per_music={:.2}",
        ds.music.len(),
        ds.visual.len(),
        ds.mean_videos_per_music()
    );
    let counts: Vec<f64> = ds.manifest.popularity().values().map(|&c| c as f64).collect();
    match fit_gamma_mle(&counts) {
        Ok(g) => say!("popularity gamma fit: shape={:.4} scale={:.4}", g.shape, g.scale),
        Err(e) => say!("popularity gamma fit: unavailable ({e})"),
    }
    for f in &files {
        print_digest(f)?;
    }
    Ok(())
}

fn cmd_split(a: &SplitArgs, file: &FileConfig) -> Result<()> {
    let dir = Resolved::data_dir(&a.data, file)?;
    let out = file.pick(a.split.clone(), "split", dir.join(SPLIT_FILE))?;
    let mode = SplitMode::parse(&file.pick(a.mode.clone(), "mode", "weak".to_owned())?)?;
    let seed = file.pick(a.seed, "seed", 0)?;
    let source = SplitManifest::load(&dir.join(PAIRS_FILE), &dir.join(POPULARITY_FILE))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = match mode {
        SplitMode::Weak => split_weak(&source, SplitRatios::default(), &mut rng)?,
        SplitMode::Strong => split_strong(&source, SplitRatios::default(), file.pick(a.strata, "strata", 10)?, &mut rng)?,
    };
    let total = split.pairs().len() as f64;
    for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
        let n = split.count(tag);
        say!(
            "{tag}: {n} pairs ({:.1}%), {} music",
            100.0 * n as f64 / total,
            split.music_in(tag).len()
        );
    }
    let train = split.music_in(SplitTag::Train);
    let test = split.music_in(SplitTag::Test);
    match mode {
        SplitMode::Weak => {
            let unseen: Vec<&String> = test.difference(&train).collect();
            if !unseen.is_empty() {
                return Err(Error::Data(format!("weak split invariant violated: test music not in train: {unseen:?}")));
            }
            say!("test music ⊆ train music: OK");
        }
        SplitMode::Strong => {
            let shared = train.intersection(&test).count();
            say!("train∩test music: {shared}");
            if shared != 0 {
                return Err(Error::Data(format!("strong split invariant violated: {shared} music in both train and test")));
            }
        }
    }
    fs::write(&out, split.manifest_text()).map_err(|e| Error::io(&out, e))?;
    print_digest(&out)
}

fn train_config(a: &TrainArgs, file: &FileConfig) -> Result<TrainConfig> {
    let profile = Profile::parse(&file.pick(a.profile.clone(), "profile", "desk".to_owned())?)?;
    let mut cfg = TrainConfig::profile(profile);
    for key in CONFIG_KEYS {
        if let Some(v) = file.values.get(key) {
            cfg.set(key, v)?;
        }
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, file: &FileConfig) -> Result<()> {
    let paths = Resolved::new(&a.paths, file)?;
    let cfg = train_config(a, file)?;
    let log_path = file.pick(a.log.clone(), "log", {
        let mut p = paths.checkpoint.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    })?;
    let store = paths.store()?;
    let manifest = paths.manifest()?;
    store.check_pairs(manifest.pairs())?;
    let outcome = fit(&store, &manifest, &cfg)?;
    for r in &outcome.log {
        match r.total {
            Some(total) => say!("epoch {:>3} loss {:.6e} val_recall@10 {:.6}", r.epoch, total, r.val_recall),
            None => say!("epoch {:>3} (untrained) val_recall@10 {:.6}", r.epoch, r.val_recall),
        }
    }
    let ck = &outcome.checkpoint;
    say!(
        "best epoch {} of {} run: val_recall@10 {:.6}",
        ck.epoch, outcome.epochs_run, ck.best_val_recall
    );
    ck.save(&paths.checkpoint)?;
    fs::write(&log_path, outcome.log_json_lines()).map_err(|e| Error::io(&log_path, e))?;
    print_digest(&paths.checkpoint)
}

fn modalities(drop_textual: bool) -> Modalities {
    Modalities {
        visual: true,
        textual: !drop_textual,
    }
}

fn cmd_eval(a: &EvalArgs, file: &FileConfig) -> Result<()> {
    let paths = Resolved::new(&a.paths, file)?;
    let report_path = file.pick(a.report.clone(), "report", paths.data.join(REPORT_FILE))?;
    let records_path = file.pick(a.records.clone(), "records", report_path.with_extension("jsonl"))?;
    let ks = match file.pick(a.k.clone(), "k", String::new())? {
        s if s.is_empty() => DEFAULT_KS.to_vec(),
        s => parse_list(&s, "K")?,
    };
    let tag = parse_tag(&file.pick(a.tag.clone(), "tag", "test".to_owned())?)?;
    let drop_textual = a.drop_textual || file.get("drop_textual")?.unwrap_or(false);
    let ck = Checkpoint::load(&paths.checkpoint)?;
    let store = paths.store()?;
    let manifest = paths.manifest()?;
    let seed = a.seed.unwrap_or(ck.config.seed);
    let opts = EvalOptions {
        ks,
        modalities: modalities(drop_textual),
        tag,
        seed,
    };
    let report = evaluate(&ck.params, &store, &manifest, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
    say!("{}", report.to_text().trim_end());
    report.save(&report_path, &records_path)?;
    print_digest(&report_path)?;
    print_digest(&records_path)
}

fn cmd_recommend(a: &RecommendArgs, file: &FileConfig) -> Result<()> {
    let paths = Resolved::new(&a.paths, file)?;
    let k = file.pick(a.k, "k", 10)?;
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let drop_textual = a.drop_textual || file.get("drop_textual")?.unwrap_or(false);
    let ck = Checkpoint::load(&paths.checkpoint)?;
    let store = paths.store()?;
    let manifest = paths.manifest()?;
    let mode = SplitMode::of(&manifest)?;
    let tag = manifest
        .pairs()
        .iter()
        .find(|p| p.video == a.video)
        .map_or(SplitTag::Test, |p| p.split);
    let pool_ids = candidate_pool(&manifest, mode, if tag == SplitTag::Train { SplitTag::Test } else { tag });
    let pool = MusicPool::embed(&ck.params, &store.music, &pool_ids)?;
    let list = rank_candidates(&ck.params, &store, &a.video, modalities(drop_textual), &pool, Some(k))?;
    say!("# video {} via {} (pool of {})", a.video, modalities(drop_textual).label(), pool.len());
    for (r, (m, s)) in list.music.iter().zip(&list.scores).enumerate() {
        say!("{}\t{m}\t{s:.6}", r + 1);
    }
    Ok(())
}
