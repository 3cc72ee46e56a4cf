//! Training objective: cross-generation MSE, KL to the standard normal
//! prior, and the bi-directional margin ranking loss over in-batch hard
//! negatives.
//!
//! Everything here is written as a quantity to minimize:
//! `beta * mse + kl + gamma * (rank_v2m + alpha * rank_m2v)`, summed over
//! the joint, visual-only and textual-only video branches.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::GaussianLatent;
use crate::ndmath::{Matrix, NodeId, Tape};

/// Squared error summed over feature dimensions.
pub fn mse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::dim("mse", format!("len {}", x.len()), format!("len {}", x_hat.len())));
    }
    Ok(x.iter().zip(x_hat).fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b)))
}

/// `KL(N(mu, sigma²) || N(0, I))` in closed form.
pub fn kl_std_normal(g: &GaussianLatent) -> f64 {
    g.mu().iter().zip(g.sigma()).fold(0.0, |acc, (m, s)| {
        let var = s * s;
        acc + 0.5 * (var + m * m - 1.0 - var.ln())
    })
}

/// Hard negatives per anchor, in selection order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSets {
    /// For video anchor `i`, the selected music rows.
    pub video_to_music: Vec<Vec<usize>>,
    /// For music anchor `j`, the selected video rows.
    pub music_to_video: Vec<Vec<usize>>,
}

fn check_ranking_args(batch: usize, k: usize, margin: f64) -> Result<()> {
    if batch < 2 {
        return Err(Error::Contract(format!("ranking loss needs a batch of at least 2, got {batch}")));
    }
    if k == 0 || k > batch - 1 {
        return Err(Error::Contract(format!("negative count k={k} outside 1..={}", batch - 1)));
    }
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::Contract(format!("margin must be positive, got {margin}")));
    }
    Ok(())
}

/// Top-`k` candidates of one anchor by descending score, ties to the lower index.
fn top_k(candidates: &mut Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering { b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)) };
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k, by_rank);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(by_rank);
    candidates.iter().map(|c| c.1).collect()
}

/// Selects, for every anchor, the `k` unmatched rows with the highest
/// score. `scores[i][j]` is the match score of video `i` and music `j`;
/// row `i` of both sides is a matched pair.
///
/// When `groups` is given, rows sharing the anchor's group (the same
/// music clip appearing twice in a batch) are not eligible, and an anchor
/// may end up with fewer than `k` negatives.
pub fn hard_negatives(scores: &Matrix, k: usize, groups: Option<&[u64]>) -> Result<NegativeSets> {
    let b = scores.rows();
    if scores.cols() != b {
        return Err(Error::dim("hard_negatives", scores.shape_str(), "square score matrix"));
    }
    if let Some(g) = groups {
        if g.len() != b {
            return Err(Error::dim("hard_negatives", format!("batch {b}"), format!("{} groups", g.len())));
        }
    }
    let eligible = |anchor: usize, other: usize| match groups {
        Some(g) => g[anchor] != g[other],
        None => anchor != other,
    };
    let mut buf = Vec::with_capacity(b);
    let mut video_to_music = Vec::with_capacity(b);
    for i in 0..b {
        buf.clear();
        buf.extend((0..b).filter(|&j| eligible(i, j)).map(|j| (scores.get(i, j), j)));
        video_to_music.push(top_k(&mut buf, k));
    }
    let mut music_to_video = Vec::with_capacity(b);
    for j in 0..b {
        buf.clear();
        buf.extend((0..b).filter(|&i| eligible(j, i)).map(|i| (scores.get(i, j), i)));
        music_to_video.push(top_k(&mut buf, k));
    }
    Ok(NegativeSets {
        video_to_music,
        music_to_video,
    })
}

/// Unweighted `(rank_v2m, rank_m2v)` hinge sums for matched latent rows.
pub fn bidirectional_ranking(z_v: &Matrix, z_m: &Matrix, margin: f64, k: usize) -> Result<(f64, f64)> {
    z_v.ensure_same_shape(z_m, "bidirectional_ranking")?;
    check_ranking_args(z_v.rows(), k, margin)?;
    let scores = z_v.matmul_t(z_m)?;
    let neg = hard_negatives(&scores, k, None)?;
    Ok(hinge_sums(&scores, &neg, margin))
}

fn hinge_sums(scores: &Matrix, neg: &NegativeSets, margin: f64) -> (f64, f64) {
    let mut v2m = 0.0;
    for (i, ms) in neg.video_to_music.iter().enumerate() {
        for &j in ms {
            v2m += (margin + scores.get(i, j) - scores.get(i, i)).max(0.0);
        }
    }
    let mut m2v = 0.0;
    for (j, vs) in neg.music_to_video.iter().enumerate() {
        for &i in vs {
            m2v += (margin + scores.get(i, j) - scores.get(j, j)).max(0.0);
        }
    }
    (v2m, m2v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub margin: f64,
    pub neg_k: usize,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            beta: 1e5,
            gamma: 1.0,
            alpha: 3.0,
            margin: 0.2,
            neg_k: 10,
        }
    }
}

/// Unweighted loss terms, each summed over the video branches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon_m: f64,
    pub recon_vv: f64,
    pub recon_vt: f64,
    pub kl_m: f64,
    pub kl_v: f64,
    pub rank_v2m: f64,
    pub rank_m2v: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted combination the optimizer minimizes.
    pub fn combine(&self, w: &ObjectiveWeights) -> f64 {
        w.beta * (self.recon_m + self.recon_vv + self.recon_vt)
            + self.kl_m
            + self.kl_v
            + w.gamma * (self.rank_v2m + w.alpha * self.rank_m2v)
    }
}

/// Mean, log-variance and reparameterized sample of one batch posterior.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorNodes {
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
}

/// Music posterior plus one video posterior per branch (joint, visual-only,
/// textual-only). Row `i` of every node is the same matched pair.
#[derive(Clone, Debug)]
pub struct BatchLatents {
    pub music: PosteriorNodes,
    pub videos: Vec<PosteriorNodes>,
}

/// Cross-generated features: music decoded from each video branch, video
/// modalities decoded from the music latent.
#[derive(Clone, Debug)]
pub struct Reconstructions {
    pub music_from_video: Vec<NodeId>,
    pub visual_from_music: NodeId,
    pub textual_from_music: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct Targets {
    pub music: NodeId,
    pub visual: NodeId,
    pub textual: NodeId,
}

#[derive(Debug)]
pub struct Objective {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Negatives selected for each video branch.
    pub negatives: Vec<NegativeSets>,
}

/// Batch mean of the per-row squared error.
pub fn mse_node(tape: &mut Tape, target: NodeId, recon: NodeId) -> Result<NodeId> {
    let rows = tape.value(target).rows();
    let d = tape.sub(target, recon)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / rows as f64)
}

/// Batch mean of the analytic KL to `N(0, I)`.
pub fn kl_node(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let rows = tape.value(mu).rows();
    let var = tape.exp(logvar)?;
    let mu2 = tape.mul(mu, mu)?;
    let t = tape.add(var, mu2)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum(t)?;
    tape.scale(s, 0.5 / rows as f64)
}

/// Hinge sums for both directions, recorded on the tape.
pub fn ranking_nodes(
    tape: &mut Tape,
    z_v: NodeId,
    z_m: NodeId,
    margin: f64,
    k: usize,
    groups: Option<&[u64]>,
) -> Result<(NodeId, NodeId, NegativeSets)> {
    check_ranking_args(tape.value(z_v).rows(), k, margin)?;
    let scores = tape.matmul_t(z_v, z_m)?;
    let neg = hard_negatives(tape.value(scores), k, groups)?;

    let mut v2m_neg = Vec::new();
    let mut v2m_pos = Vec::new();
    for (i, ms) in neg.video_to_music.iter().enumerate() {
        for &j in ms {
            v2m_neg.push((i, j));
            v2m_pos.push((i, i));
        }
    }
    let mut m2v_neg = Vec::new();
    let mut m2v_pos = Vec::new();
    for (j, vs) in neg.music_to_video.iter().enumerate() {
        for &i in vs {
            m2v_neg.push((i, j));
            m2v_pos.push((j, j));
        }
    }
    let v2m = hinge_node(tape, scores, v2m_neg, v2m_pos, margin)?;
    let m2v = hinge_node(tape, scores, m2v_neg, m2v_pos, margin)?;
    Ok((v2m, m2v, neg))
}

fn hinge_node(
    tape: &mut Tape,
    scores: NodeId,
    neg: Vec<(usize, usize)>,
    pos: Vec<(usize, usize)>,
    margin: f64,
) -> Result<NodeId> {
    if neg.is_empty() {
        return tape.constant(Matrix::scalar(0.0));
    }
    let n = tape.gather(scores, neg)?;
    let p = tape.gather(scores, pos)?;
    let diff = tape.sub(n, p)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let h = tape.relu(shifted)?;
    tape.sum(h)
}

/// Full minimized objective over all video branches.
///
/// Per branch `z`: `beta * (mse(m, f_m(z)) + mse(v_v, f_vv(z_m)) +
/// mse(v_t, f_vt(z_m))) + KL(z) + KL(z_m) + gamma * (v2m + alpha * m2v)`.
/// The music-side terms recur once per branch.
pub fn composite_objective(
    tape: &mut Tape,
    latents: &BatchLatents,
    recon: &Reconstructions,
    targets: &Targets,
    w: &ObjectiveWeights,
    groups: Option<&[u64]>,
) -> Result<Objective> {
    if latents.videos.is_empty() || latents.videos.len() != recon.music_from_video.len() {
        return Err(Error::Contract(format!(
            "{} video branches but {} music reconstructions",
            latents.videos.len(),
            recon.music_from_video.len()
        )));
    }
    let n_branches = latents.videos.len() as f64;
    let scalar = |tape: &Tape, id: NodeId| tape.value(id).get(0, 0);

    let recon_vv = mse_node(tape, targets.visual, recon.visual_from_music)?;
    let recon_vt = mse_node(tape, targets.textual, recon.textual_from_music)?;
    let kl_m = kl_node(tape, latents.music.mu, latents.music.logvar)?;

    let mut bd = LossBreakdown {
        recon_vv: n_branches * scalar(tape, recon_vv),
        recon_vt: n_branches * scalar(tape, recon_vt),
        kl_m: n_branches * scalar(tape, kl_m),
        ..LossBreakdown::default()
    };
    let mut terms: Vec<(NodeId, f64)> = vec![
        (recon_vv, w.beta * n_branches),
        (recon_vt, w.beta * n_branches),
        (kl_m, n_branches),
    ];
    let mut negatives = Vec::with_capacity(latents.videos.len());
    for (video, &music_hat) in latents.videos.iter().zip(&recon.music_from_video) {
        let recon_m = mse_node(tape, targets.music, music_hat)?;
        let kl_v = kl_node(tape, video.mu, video.logvar)?;
        let (v2m, m2v, neg) = ranking_nodes(tape, video.z, latents.music.z, w.margin, w.neg_k, groups)?;
        bd.recon_m += scalar(tape, recon_m);
        bd.kl_v += scalar(tape, kl_v);
        bd.rank_v2m += scalar(tape, v2m);
        bd.rank_m2v += scalar(tape, m2v);
        terms.extend([
            (recon_m, w.beta),
            (kl_v, 1.0),
            (v2m, w.gamma),
            (m2v, w.gamma * w.alpha),
        ]);
        negatives.push(neg);
    }

    let mut total: Option<NodeId> = None;
    for (node, coef) in terms {
        if coef == 0.0 {
            continue;
        }
        let scaled = if coef == 1.0 { node } else { tape.scale(node, coef)? };
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Matrix::scalar(0.0))?,
    };
    bd.total = scalar(tape, total);
    if !bd.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective: {bd:?}")));
    }
    Ok(Objective {
        total,
        breakdown: bd,
        negatives,
    })
}
