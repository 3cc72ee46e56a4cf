//! Encoder/decoder networks, product-of-experts fusion and latent scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndmath::{self, Matrix, NodeId, Tape};

/// Diagonal Gaussian over the shared latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::dim("GaussianLatent", format!("mu len {}", mu.len()), format!("sigma len {}", sigma.len())));
        }
        if let Some(m) = mu.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite latent mean {m}")));
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Contract(format!("latent sigma must be positive and finite, got {s}")));
        }
        Ok(GaussianLatent { mu, sigma })
    }

    /// Standard normal prior `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        GaussianLatent {
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    /// From a mean and a log-variance: `sigma = exp(logvar / 2)`.
    pub fn from_log_variance(mu: &[f64], logvar: &[f64]) -> Result<Self> {
        GaussianLatent::new(mu.to_vec(), logvar.iter().map(|lv| (0.5 * lv).exp()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn variance(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }
}

/// One fully connected layer: `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::dim("Layer::new", format!("W {}", weight.shape_str()), format!("b {}", bias.shape_str())));
        }
        Ok(Layer { weight, bias })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        Layer {
            weight: Matrix::new(fan_in, fan_out, data).expect("sized by construction"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }
}

/// Multilayer perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Tape handles for one layer's weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::dim(
                    "Mlp::new",
                    format!("layer {i} outputs {}", pair[0].output_width()),
                    format!("layer {} takes {}", i + 1, pair[1].input_width()),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Mlp::new(widths.windows(2).map(|w| Layer::glorot(w[0], w[1], rng)).collect())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(Layer::output_width))
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = ndmath::affine(&h, &layer.weight, &layer.bias)?;
            if i + 1 < self.layers.len() {
                h = ndmath::relu(&h);
            }
        }
        Ok(h)
    }

    pub fn register(&self, tape: &mut Tape) -> Result<Vec<LayerIds>> {
        self.layers
            .iter()
            .map(|l| {
                Ok(LayerIds {
                    weight: tape.param(l.weight.clone())?,
                    bias: tape.param(l.bias.clone())?,
                })
            })
            .collect()
    }
}

/// Runs an MLP recorded by [`Mlp::register`] on a tape node.
pub fn mlp_on_tape(tape: &mut Tape, layers: &[LayerIds], x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = tape.affine(h, l.weight, l.bias)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Gaussian inference network. Output width is `2d`: means, then log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    mlp: Mlp,
    latent_dim: usize,
}

impl EncoderNet {
    pub fn new(mlp: Mlp, latent_dim: usize) -> Result<Self> {
        if mlp.output_width() != 2 * latent_dim {
            return Err(Error::dim(
                "EncoderNet::new",
                format!("output width {}", mlp.output_width()),
                format!("2 x latent dim {latent_dim}"),
            ));
        }
        Ok(EncoderNet { mlp, latent_dim })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn encode(&self, x: &[f64]) -> Result<GaussianLatent> {
        if x.len() != self.input_width() {
            return Err(Error::dim("encode", format!("feature len {}", x.len()), format!("encoder input {}", self.input_width())));
        }
        let out = self.mlp.forward(&Matrix::row_vector(x))?;
        let d = self.latent_dim;
        let g = GaussianLatent::from_log_variance(&out.data()[..d], &out.data()[d..])?;
        debug_assert!(g.sigma().iter().all(|s| *s > 0.0));
        Ok(g)
    }

    /// Batched encoding: returns `(mu, logvar)`, each `rows x d`.
    pub fn encode_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.input_width() {
            return Err(Error::dim("encode_batch", x.shape_str(), format!("encoder input {}", self.input_width())));
        }
        let out = self.mlp.forward(x)?;
        let d = self.latent_dim;
        Ok((out.slice_cols(0, d)?, out.slice_cols(d, 2 * d)?))
    }
}

/// Generation network from the latent space back to a feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    mlp: Mlp,
}

impl DecoderNet {
    pub fn new(mlp: Mlp) -> Self {
        DecoderNet { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim("decode", format!("latent len {}", z.len()), format!("decoder input {}", self.latent_dim())));
        }
        Ok(self.mlp.forward(&Matrix::row_vector(z))?.into_data())
    }
}

/// Product of Gaussian experts: precisions add, means are precision-weighted.
pub fn poe_fuse(experts: &[GaussianLatent]) -> Result<GaussianLatent> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Contract("poe_fuse needs at least one expert".into()))?;
    let d = first.dim();
    if experts.len() == 1 {
        return Ok(first.clone());
    }
    for (i, e) in experts.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::dim("poe_fuse", format!("expert 0 dim {d}"), format!("expert {i} dim {}", e.dim())));
        }
    }
    let mut mu = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    let mut terms = Vec::with_capacity(experts.len());
    for j in 0..d {
        terms.clear();
        terms.extend(experts.iter().map(|e| {
            let p = 1.0 / (e.sigma[j] * e.sigma[j]);
            (p, e.mu[j] * p)
        }));
        // canonical summation order makes the result permutation invariant
        terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let precision = terms.iter().fold(0.0, |acc, t| acc + t.0);
        let weighted = terms.iter().fold(0.0, |acc, t| acc + t.1);
        mu.push(weighted / precision);
        sigma.push((1.0 / precision).sqrt());
    }
    GaussianLatent::new(mu, sigma)
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize(g: &GaussianLatent, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(Error::dim("reparameterize", format!("latent dim {}", g.dim()), format!("noise len {}", eps.len())));
    }
    Ok(g.mu.iter().zip(&g.sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
}

/// Matching degree of a video and a music latent: their dot product.
pub fn match_score(z_v: &[f64], z_m: &[f64]) -> Result<f64> {
    if z_v.len() != z_m.len() {
        return Err(Error::dim("match_score", format!("len {}", z_v.len()), format!("len {}", z_m.len())));
    }
    Ok(ndmath::dot(z_v, z_m))
}

/// Layer widths and feature dimensions shared by all six networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub latent_dim: usize,
    /// Hidden widths of the encoders; decoders use them reversed.
    pub hidden: Vec<usize>,
    pub music_dim: usize,
    pub visual_dim: usize,
    pub textual_dim: usize,
}

impl Architecture {
    pub fn encoder_widths(&self, feature_dim: usize) -> Vec<usize> {
        let mut w = vec![feature_dim];
        w.extend(&self.hidden);
        w.push(2 * self.latent_dim);
        w
    }

    pub fn decoder_widths(&self, feature_dim: usize) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(self.hidden.iter().rev());
        w.push(feature_dim);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
}

/// All trainable weights of the cross-modal VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct CmvaeParams {
    pub arch: Architecture,
    pub music_encoder: EncoderNet,
    pub visual_encoder: EncoderNet,
    pub textual_encoder: EncoderNet,
    pub music_decoder: DecoderNet,
    pub visual_decoder: DecoderNet,
    pub textual_decoder: DecoderNet,
}

/// Tape handles for every network of a [`CmvaeParams`].
#[derive(Clone, Debug)]
pub struct ParamHandles {
    pub music_encoder: Vec<LayerIds>,
    pub visual_encoder: Vec<LayerIds>,
    pub textual_encoder: Vec<LayerIds>,
    pub music_decoder: Vec<LayerIds>,
    pub visual_decoder: Vec<LayerIds>,
    pub textual_decoder: Vec<LayerIds>,
}

impl ParamHandles {
    /// Handles in the same order as [`CmvaeParams::tensors`].
    pub fn flat(&self) -> Vec<NodeId> {
        [
            &self.music_encoder,
            &self.visual_encoder,
            &self.textual_encoder,
            &self.music_decoder,
            &self.visual_decoder,
            &self.textual_decoder,
        ]
        .into_iter()
        .flatten()
        .flat_map(|l| [l.weight, l.bias])
        .collect()
    }
}

impl CmvaeParams {
    /// Randomly initialized parameters for `arch`.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        if arch.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let d = arch.latent_dim;
        let music_encoder = EncoderNet::new(Mlp::init(&arch.encoder_widths(arch.music_dim), rng)?, d)?;
        let visual_encoder = EncoderNet::new(Mlp::init(&arch.encoder_widths(arch.visual_dim), rng)?, d)?;
        let textual_encoder = EncoderNet::new(Mlp::init(&arch.encoder_widths(arch.textual_dim), rng)?, d)?;
        let music_decoder = DecoderNet::new(Mlp::init(&arch.decoder_widths(arch.music_dim), rng)?);
        let visual_decoder = DecoderNet::new(Mlp::init(&arch.decoder_widths(arch.visual_dim), rng)?);
        let textual_decoder = DecoderNet::new(Mlp::init(&arch.decoder_widths(arch.textual_dim), rng)?);
        Ok(CmvaeParams {
            arch,
            music_encoder,
            visual_encoder,
            textual_encoder,
            music_decoder,
            visual_decoder,
            textual_decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn mlps(&self) -> [&Mlp; 6] {
        [
            self.music_encoder.mlp(),
            self.visual_encoder.mlp(),
            self.textual_encoder.mlp(),
            self.music_decoder.mlp(),
            self.visual_decoder.mlp(),
            self.textual_decoder.mlp(),
        ]
    }

    /// Every weight and bias in declared order: music, visual, textual
    /// encoders, then music, visual, textual decoders; per layer W then b.
    pub fn tensors(&self) -> Vec<(&Matrix, TensorRole)> {
        self.mlps()
            .into_iter()
            .flat_map(|m| m.layers())
            .flat_map(|l| [(&l.weight, TensorRole::Weight), (&l.bias, TensorRole::Bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut Matrix, TensorRole)> {
        [
            self.music_encoder.mlp_mut(),
            self.visual_encoder.mlp_mut(),
            self.textual_encoder.mlp_mut(),
            self.music_decoder.mlp_mut(),
            self.visual_decoder.mlp_mut(),
            self.textual_decoder.mlp_mut(),
        ]
        .into_iter()
        .flat_map(|m| m.layers_mut())
        .flat_map(|l| [(&mut l.weight, TensorRole::Weight), (&mut l.bias, TensorRole::Bias)])
        .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ParamHandles> {
        Ok(ParamHandles {
            music_encoder: self.music_encoder.mlp().register(tape)?,
            visual_encoder: self.visual_encoder.mlp().register(tape)?,
            textual_encoder: self.textual_encoder.mlp().register(tape)?,
            music_decoder: self.music_decoder.mlp().register(tape)?,
            visual_decoder: self.visual_decoder.mlp().register(tape)?,
            textual_decoder: self.textual_decoder.mlp().register(tape)?,
        })
    }

    pub fn encode_music(&self, m: &[f64]) -> Result<GaussianLatent> {
        self.music_encoder.encode(m)
    }

    /// Joint video posterior. With one modality absent the remaining
    /// expert stands in for the joint posterior.
    pub fn encode_video(&self, visual: Option<&[f64]>, textual: Option<&[f64]>) -> Result<GaussianLatent> {
        match (visual, textual) {
            (Some(v), Some(t)) => poe_fuse(&[self.visual_encoder.encode(v)?, self.textual_encoder.encode(t)?]),
            (Some(v), None) => self.visual_encoder.encode(v),
            (None, Some(t)) => self.textual_encoder.encode(t),
            (None, None) => Err(Error::Contract("encode_video needs at least one video modality".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn zero_encoder(input: usize, d: usize) -> EncoderNet {
        let layer = Layer::new(Matrix::zeros(input, 2 * d), Matrix::zeros(1, 2 * d)).unwrap();
        EncoderNet::new(Mlp::new(vec![layer]).unwrap(), d).unwrap()
    }

    fn latent(mu: &[f64], var: &[f64]) -> GaussianLatent {
        GaussianLatent::new(mu.to_vec(), var.iter().map(|v| v.sqrt()).collect()).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture {
            latent_dim: 3,
            hidden: vec![4],
            music_dim: 5,
            visual_dim: 6,
            textual_dim: 7,
        }
    }

    #[test]
    fn zero_encoder_yields_prior() {
        let g = zero_encoder(4, 3).encode(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(g.mu(), &[0.0; 3]);
        assert_eq!(g.sigma(), &[1.0; 3]);
    }

    #[test]
    fn log_variance_head_sets_sigma() {
        let d = 2;
        let ln4 = 2.0 * std::f64::consts::LN_2;
        let layer = Layer::new(Matrix::zeros(1, 4), Matrix::row_vector(&[0.0, 0.0, ln4, ln4])).unwrap();
        let enc = EncoderNet::new(Mlp::new(vec![layer]).unwrap(), d).unwrap();
        let g = enc.encode(&[1.0]).unwrap();
        for s in g.sigma() {
            assert!((s - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_rejects_wrong_length() {
        assert!(matches!(zero_encoder(4, 3).encode(&[1.0; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn encoder_output_width_must_be_twice_latent() {
        let layer = Layer::new(Matrix::zeros(2, 5), Matrix::zeros(1, 5)).unwrap();
        assert!(EncoderNet::new(Mlp::new(vec![layer]).unwrap(), 2).is_err());
    }

    #[test]
    fn poe_single_expert_unchanged() {
        let g = latent(&[0.3, -1.0], &[0.5, 2.0]);
        assert_eq!(poe_fuse(&[g.clone()]).unwrap(), g);
    }

    #[test]
    fn poe_equal_variance_midpoint() {
        let f = poe_fuse(&[latent(&[1.0], &[1.0]), latent(&[3.0], &[1.0])]).unwrap();
        assert!((f.mu()[0] - 2.0).abs() < 1e-15);
        assert!((f.sigma()[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn poe_unequal_variance_hand_value() {
        let f = poe_fuse(&[latent(&[0.0], &[1.0]), latent(&[4.0], &[3.0])]).unwrap();
        assert!((f.mu()[0] - 1.0).abs() < 1e-14);
        assert!((f.variance()[0] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn poe_errors() {
        assert!(matches!(poe_fuse(&[]), Err(Error::Contract(_))));
        let r = poe_fuse(&[latent(&[0.0], &[1.0]), latent(&[0.0, 1.0], &[1.0, 1.0])]);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn reparameterize_cases() {
        let g = latent(&[0.5, -2.0], &[4.0, 0.25]);
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), g.mu());
        let e = [0.7, -1.3];
        assert_eq!(reparameterize(&GaussianLatent::standard(2), &e).unwrap(), e);
        assert!(reparameterize(&g, &[0.0]).is_err());
    }

    #[test]
    fn reparameterized_sample_mean() {
        let g = latent(&[1.5, -0.5, 0.0], &[4.0, 0.25, 1.0]);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (s, z) in sums.iter_mut().zip(reparameterize(&g, &eps).unwrap()) {
                *s += z;
            }
        }
        for j in 0..3 {
            let mean = sums[j] / n as f64;
            let bound = 3.0 * g.sigma()[j] / (n as f64).sqrt();
            assert!((mean - g.mu()[j]).abs() <= bound, "dim {j}: {mean}");
        }
    }

    #[test]
    fn decode_cases() {
        let zero = DecoderNet::new(Mlp::new(vec![Layer::new(Matrix::zeros(2, 4), Matrix::zeros(1, 4)).unwrap()]).unwrap());
        assert_eq!(zero.decode(&[1.0, 2.0]).unwrap(), vec![0.0; 4]);

        let eye = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let id = DecoderNet::new(Mlp::new(vec![Layer::new(eye, Matrix::zeros(1, 3)).unwrap()]).unwrap());
        assert_eq!(id.decode(&[0.1, -0.2, 0.3]).unwrap(), vec![0.1, -0.2, 0.3]);
        assert!(id.decode(&[0.0; 2]).is_err());
    }

    #[test]
    fn decode_matches_plain_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = Mlp::init(&[3, 6, 4], &mut rng).unwrap();
        for layer in mlp.layers_mut() {
            for b in layer.bias.data_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let dec = DecoderNet::new(mlp.clone());
        let z = [0.4, -1.1, 2.0];
        let got = dec.decode(&z).unwrap();

        // hand-rolled loops, independent of Matrix::matmul
        let (l0, l1) = (&mlp.layers()[0], &mlp.layers()[1]);
        let hidden: Vec<f64> = (0..6)
            .map(|j| {
                let s: f64 = (0..3).map(|i| z[i] * l0.weight.get(i, j)).sum::<f64>() + l0.bias.get(0, j);
                s.max(0.0)
            })
            .collect();
        for (k, g) in got.iter().enumerate() {
            let s: f64 = (0..6).map(|j| hidden[j] * l1.weight.get(j, k)).sum::<f64>() + l1.bias.get(0, k);
            assert!((g - s).abs() < 1e-12);
        }
    }

    #[test]
    fn match_score_cases() {
        assert_eq!(match_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(match_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 5.0);
        let (a, b) = ([0.3, -1.2, 4.0], [2.0, 0.5, -0.1]);
        assert_eq!(match_score(&a, &b).unwrap(), match_score(&b, &a).unwrap());
        assert!(match_score(&a, &[1.0]).is_err());
    }

    #[test]
    fn encode_video_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = CmvaeParams::init(small_arch(), &mut rng).unwrap();
        let v = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        let t = [1.0, -1.0, 0.5, 0.25, 0.0, 0.3, -0.7];

        let ev = params.visual_encoder.encode(&v).unwrap();
        let et = params.textual_encoder.encode(&t).unwrap();
        let joint = params.encode_video(Some(&v), Some(&t)).unwrap();
        for j in 0..3 {
            let (pv, pt) = (1.0 / ev.variance()[j], 1.0 / et.variance()[j]);
            let mu = (ev.mu()[j] * pv + et.mu()[j] * pt) / (pv + pt);
            let sigma = (1.0 / (pv + pt)).sqrt();
            assert!((joint.mu()[j] - mu).abs() < 1e-14);
            assert!((joint.sigma()[j] - sigma).abs() < 1e-14);
        }
        assert_eq!(params.encode_video(Some(&v), None).unwrap(), ev);
        assert!(matches!(params.encode_video(None, None), Err(Error::Contract(_))));
    }

    #[test]
    fn tensor_order_matches_handles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = CmvaeParams::init(small_arch(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let handles = params.register(&mut tape).unwrap();
        let flat = handles.flat();
        let tensors = params.tensors();
        assert_eq!(flat.len(), tensors.len());
        for (id, (m, _)) in flat.iter().zip(tensors) {
            assert_eq!(tape.value(*id), m);
        }
    }

    fn arb_expert(d: usize) -> impl Strategy<Value = GaussianLatent> {
        (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(0.05f64..5.0, d))
            .prop_map(|(mu, sigma)| GaussianLatent::new(mu, sigma).unwrap())
    }

    proptest! {
        #[test]
        fn poe_precision_adds_and_mean_is_between(experts in prop::collection::vec(arb_expert(3), 1..5)) {
            let f = poe_fuse(&experts).unwrap();
            for j in 0..3 {
                let precision: f64 = experts.iter().map(|e| 1.0 / e.variance()[j]).sum();
                let fused = 1.0 / f.variance()[j];
                prop_assert!((fused - precision).abs() <= 1e-12 * precision);
                let lo = experts.iter().map(|e| e.mu()[j]).fold(f64::INFINITY, f64::min);
                let hi = experts.iter().map(|e| e.mu()[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f.mu()[j] >= lo - 1e-12 && f.mu()[j] <= hi + 1e-12);
            }
        }

        #[test]
        fn poe_is_order_invariant(experts in prop::collection::vec(arb_expert(2), 2..6), rot in 0usize..6) {
            let mut shuffled = experts.clone();
            shuffled.reverse();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            prop_assert_eq!(poe_fuse(&experts).unwrap(), poe_fuse(&shuffled).unwrap());
        }

        #[test]
        fn encoder_sigma_is_positive(seed in 0u64..500, x in prop::collection::vec(-10.0f64..10.0, 5)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = CmvaeParams::init(small_arch(), &mut rng).unwrap();
            let g = params.encode_music(&x).unwrap();
            prop_assert!(g.sigma().iter().all(|s| *s > 0.0 && s.is_finite()));
        }
    }
}
