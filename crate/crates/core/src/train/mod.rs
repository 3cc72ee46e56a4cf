//! Mini-batch SGD over the composite objective with validation-based early
//! stopping.

mod checkpoint;
mod config;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{FeatureStore, SplitManifest, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{EvalSet, Modalities};
use crate::loss::{composite_objective, BatchLatents, LossBreakdown, Objective, ObjectiveWeights, PosteriorNodes, Reconstructions, Targets};
use crate::model::{mlp_on_tape, CmvaeParams, LayerIds, ParamHandles, TensorRole};
use crate::ndmath::{Matrix, NodeId, Tape};

pub use checkpoint::{rng_digest, Checkpoint};
pub use config::{Profile, TrainConfig, DESK_BETA, DESK_LEARNING_RATE, KEYS as CONFIG_KEYS};

/// Validation cutoff used for model selection.
pub const SELECTION_K: usize = 10;

/// Shuffled index chunks of `batch_size`; a trailing chunk shorter than
/// two is dropped.
pub fn make_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// `w <- w - lr * (g + l2 * w)`; biases skip the decay term.
pub fn sgd_step(params: &mut CmvaeParams, grads: &[Matrix], lr: f64, l2: f64) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(Error::dim("sgd_step", format!("{} tensors", tensors.len()), format!("{} gradients", grads.len())));
    }
    for ((w, _), g) in tensors.iter().zip(grads) {
        w.ensure_same_shape(g, "sgd_step")?;
    }
    for ((w, role), g) in tensors.iter_mut().zip(grads) {
        let decay = if *role == TensorRole::Weight { l2 } else { 0.0 };
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * (gi + decay * *wi);
        }
    }
    Ok(())
}

/// Feature rows and noise for one mini-batch. Row `i` of every matrix is
/// the same (video, music) pair.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub music: Matrix,
    pub visual: Matrix,
    pub textual: Matrix,
    /// Reparameterization noise for the music posterior.
    pub eps_music: Matrix,
    /// Noise shared by the joint, visual-only and textual-only branches.
    pub eps_video: Matrix,
    /// Music identity per row; rows sharing it are never negatives.
    pub groups: Vec<u64>,
}

impl BatchInputs {
    pub fn sample_noise<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> (Matrix, Matrix) {
        let mut draw = || {
            let data = (0..rows * d)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    e
                })
                .collect();
            Matrix::new(rows, d, data).expect("sized by construction")
        };
        let eps_music = draw();
        let eps_video = draw();
        (eps_music, eps_video)
    }
}

fn encoder_on_tape(tape: &mut Tape, layers: &[LayerIds], x: NodeId, d: usize) -> Result<(NodeId, NodeId)> {
    let out = mlp_on_tape(tape, layers, x)?;
    Ok((tape.slice_cols(out, 0, d)?, tape.slice_cols(out, d, 2 * d)?))
}

fn sample_on_tape(tape: &mut Tape, mu: NodeId, logvar: NodeId, eps: NodeId) -> Result<PosteriorNodes> {
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let noise = tape.mul(sigma, eps)?;
    let z = tape.add(mu, noise)?;
    Ok(PosteriorNodes { mu, logvar, z })
}

/// Product of two diagonal Gaussians given as (mean, log-variance).
fn poe_on_tape(tape: &mut Tape, a: (NodeId, NodeId), b: (NodeId, NodeId)) -> Result<(NodeId, NodeId)> {
    let neg_a = tape.scale(a.1, -1.0)?;
    let prec_a = tape.exp(neg_a)?;
    let neg_b = tape.scale(b.1, -1.0)?;
    let prec_b = tape.exp(neg_b)?;
    let prec = tape.add(prec_a, prec_b)?;
    let var = tape.recip(prec)?;
    let log_prec = tape.log(prec)?;
    let logvar = tape.scale(log_prec, -1.0)?;
    let wa = tape.mul(a.0, prec_a)?;
    let wb = tape.mul(b.0, prec_b)?;
    let num = tape.add(wa, wb)?;
    let mu = tape.mul(num, var)?;
    Ok((mu, logvar))
}

/// Records the forward pass of one batch and the composite objective.
///
/// Video branches are, in order: PoE joint, visual-only, textual-only.
pub fn batch_objective(
    tape: &mut Tape,
    params: &CmvaeParams,
    handles: &ParamHandles,
    inputs: &BatchInputs,
    weights: &ObjectiveWeights,
) -> Result<Objective> {
    let d = params.latent_dim();
    let music = tape.constant(inputs.music.clone())?;
    let visual = tape.constant(inputs.visual.clone())?;
    let textual = tape.constant(inputs.textual.clone())?;
    let eps_m = tape.constant(inputs.eps_music.clone())?;
    let eps_v = tape.constant(inputs.eps_video.clone())?;

    let (mu_m, lv_m) = encoder_on_tape(tape, &handles.music_encoder, music, d)?;
    let vis = encoder_on_tape(tape, &handles.visual_encoder, visual, d)?;
    let txt = encoder_on_tape(tape, &handles.textual_encoder, textual, d)?;
    let joint = poe_on_tape(tape, vis, txt)?;

    let music_post = sample_on_tape(tape, mu_m, lv_m, eps_m)?;
    let mut videos = Vec::with_capacity(3);
    for (mu, lv) in [joint, vis, txt] {
        videos.push(sample_on_tape(tape, mu, lv, eps_v)?);
    }

    let mut music_from_video = Vec::with_capacity(3);
    for v in &videos {
        music_from_video.push(mlp_on_tape(tape, &handles.music_decoder, v.z)?);
    }
    let recon = Reconstructions {
        music_from_video,
        visual_from_music: mlp_on_tape(tape, &handles.visual_decoder, music_post.z)?,
        textual_from_music: mlp_on_tape(tape, &handles.textual_decoder, music_post.z)?,
    };
    let latents = BatchLatents {
        music: music_post,
        videos,
    };
    let targets = Targets { music, visual, textual };
    let mut w = weights.clone();
    w.neg_k = w.neg_k.min(inputs.music.rows() - 1);
    composite_objective(tape, &latents, &recon, &targets, &w, Some(&inputs.groups))
}

/// Objective value and the gradient of every parameter tensor, in
/// [`CmvaeParams::tensors`] order.
pub fn objective_and_gradients(
    params: &CmvaeParams,
    inputs: &BatchInputs,
    weights: &ObjectiveWeights,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let handles = params.register(&mut tape)?;
    let obj = batch_objective(&mut tape, params, &handles, inputs, weights)?;
    let grads = tape.backward(obj.total)?;
    let g = handles
        .flat()
        .into_iter()
        .map(|id| grads.get_or_zeros(id, tape.value(id)))
        .collect();
    Ok((obj.breakdown, g))
}

/// One record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means of each term; absent for the untrained epoch 0.
    pub recon_m: Option<f64>,
    pub recon_vv: Option<f64>,
    pub recon_vt: Option<f64>,
    pub kl_m: Option<f64>,
    pub kl_v: Option<f64>,
    pub rank_v2m: Option<f64>,
    pub rank_m2v: Option<f64>,
    pub total: Option<f64>,
    pub val_recall: f64,
    pub wall_secs: f64,
}

impl EpochLog {
    fn new(epoch: usize, losses: Option<&LossBreakdown>, val_recall: f64, wall_secs: f64) -> Self {
        EpochLog {
            epoch,
            recon_m: losses.map(|l| l.recon_m),
            recon_vv: losses.map(|l| l.recon_vv),
            recon_vt: losses.map(|l| l.recon_vt),
            kl_m: losses.map(|l| l.kl_m),
            kl_v: losses.map(|l| l.kl_v),
            rank_v2m: losses.map(|l| l.rank_v2m),
            rank_m2v: losses.map(|l| l.rank_m2v),
            total: losses.map(|l| l.total),
            val_recall,
            wall_secs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Epochs actually run.
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn log_json_lines(&self) -> String {
        self.log.iter().map(|r| r.to_json() + "\n").collect()
    }
}

/// Row indices of every training pair in the three feature tables.
struct ResolvedPairs {
    music: Vec<usize>,
    visual: Vec<usize>,
    textual: Vec<usize>,
}

fn resolve(store: &FeatureStore, manifest: &SplitManifest, tag: SplitTag) -> Result<ResolvedPairs> {
    let pairs = manifest.pairs_in(tag);
    let mut r = ResolvedPairs {
        music: Vec::with_capacity(pairs.len()),
        visual: Vec::with_capacity(pairs.len()),
        textual: Vec::with_capacity(pairs.len()),
    };
    for p in &pairs {
        r.music.push(store.music.require(&p.music)?);
        r.visual.push(store.visual.require(&p.video)?);
        r.textual.push(store.textual.require(&p.video)?);
    }
    Ok(r)
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.recon_m += b.recon_m;
    acc.recon_vv += b.recon_vv;
    acc.recon_vt += b.recon_vt;
    acc.kl_m += b.kl_m;
    acc.kl_v += b.kl_v;
    acc.rank_v2m += b.rank_v2m;
    acc.rank_m2v += b.rank_m2v;
    acc.total += b.total;
}

fn scale_breakdown(b: &mut LossBreakdown, c: f64) {
    for v in [
        &mut b.recon_m,
        &mut b.recon_vv,
        &mut b.recon_vt,
        &mut b.kl_m,
        &mut b.kl_v,
        &mut b.rank_v2m,
        &mut b.rank_m2v,
        &mut b.total,
    ] {
        *v *= c;
    }
}

/// Trains on the `train` pairs of `manifest` and selects the epoch with
/// the best validation debiased Recall@10 (strict improvement only).
pub fn fit(store: &FeatureStore, manifest: &SplitManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = resolve(store, manifest, SplitTag::Train)?;
    if train.music.len() < 2 {
        return Err(Error::Data(format!("need at least 2 training pairs, got {}", train.music.len())));
    }
    let val = EvalSet::from_manifest(manifest, SplitTag::Val)?;
    for p in &val.pairs {
        store.visual.require(&p.video)?;
        store.textual.require(&p.video)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = cfg.architecture(store.music.dim(), store.visual.dim(), store.textual.dim());
    let mut params = CmvaeParams::init(arch, &mut rng)?;
    let weights = cfg.weights();
    let validate = |p: &CmvaeParams| -> Result<f64> { Ok(val.model_recalls(p, store, Modalities::BOTH, &[SELECTION_K])?[0]) };

    let started = Instant::now();
    let initial = validate(&params)?;
    let mut log = vec![EpochLog::new(0, None, initial, started.elapsed().as_secs_f64())];
    let mut best = Checkpoint {
        params: params.clone(),
        config: cfg.clone(),
        epoch: 0,
        best_val_recall: initial,
        rng_digest: rng_digest(&rng),
    };
    let d = cfg.latent_dim;
    let mut epochs_run = 0;
    let mut last_finite: Option<LossBreakdown> = None;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let batches = make_batches(train.music.len(), cfg.batch_size, &mut rng)?;
        let mut mean = LossBreakdown::default();
        for (b, idx) in batches.iter().enumerate() {
            let rows_of = |rows: &[usize]| -> Vec<usize> { idx.iter().map(|&i| rows[i]).collect() };
            let music_rows = rows_of(&train.music);
            let (eps_music, eps_video) = BatchInputs::sample_noise(idx.len(), d, &mut rng);
            let inputs = BatchInputs {
                music: store.music.matrix().select_rows(&music_rows),
                visual: store.visual.matrix().select_rows(&rows_of(&train.visual)),
                textual: store.textual.matrix().select_rows(&rows_of(&train.textual)),
                eps_music,
                eps_video,
                groups: music_rows.iter().map(|&r| r as u64).collect(),
            };
            let (breakdown, grads) = objective_and_gradients(&params, &inputs, &weights).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "training diverged at epoch {epoch}, batch {b}: {msg}; last finite terms: {last_finite:?}"
                )),
                other => other,
            })?;
            last_finite = Some(breakdown.clone());
            sgd_step(&mut params, &grads, cfg.learning_rate, cfg.l2_weight)?;
            add_breakdown(&mut mean, &breakdown);
        }
        scale_breakdown(&mut mean, 1.0 / batches.len().max(1) as f64);
        let recall = validate(&params)?;
        epochs_run = epoch;
        log.push(EpochLog::new(epoch, Some(&mean), recall, t0.elapsed().as_secs_f64()));
        if recall > best.best_val_recall {
            best = Checkpoint {
                params: params.clone(),
                config: cfg.clone(),
                epoch,
                best_val_recall: recall,
                rng_digest: rng_digest(&rng),
            };
        } else if epoch - best.epoch >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        log,
        epochs_run,
    })
}


#[cfg(test)]
mod gradient_check {
    use rand::Rng;

    use super::*;
    use crate::model::Architecture;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = Architecture {
            latent_dim: 3,
            hidden: vec![4],
            music_dim: 5,
            visual_dim: 5,
            textual_dim: 5,
        };
        let params = CmvaeParams::init(arch, &mut rng).unwrap();
        let b = 4;
        let (eps_music, eps_video) = BatchInputs::sample_noise(b, 3, &mut rng);
        let inputs = BatchInputs {
            music: random_matrix(b, 5, &mut rng),
            visual: random_matrix(b, 5, &mut rng),
            textual: random_matrix(b, 5, &mut rng),
            eps_music,
            eps_video,
            groups: vec![0, 1, 2, 3],
        };
        let w = ObjectiveWeights {
            beta: 2.0,
            gamma: 1.0,
            alpha: 3.0,
            margin: 5.0,
            neg_k: 2,
        };
        let (_, grads) = objective_and_gradients(&params, &inputs, &w).unwrap();
        let value = |p: &CmvaeParams| objective_and_gradients(p, &inputs, &w).unwrap().0.total;
        let h = 1e-5;
        let n = params.tensors().len();
        for t in 0..n {
            let len = params.tensors()[t].0.len();
            for i in 0..len {
                let mut plus = params.clone();
                plus.tensors_mut()[t].0.data_mut()[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t].0.data_mut()[i] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let an = grads[t].data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel <= 1e-4, "tensor {t} entry {i}: analytic {an} vs numeric {fd}");
            }
        }
    }
}
