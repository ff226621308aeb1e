//! The multi-modal triplet VAE: an image encoder and a WBT encoder whose
//! feature maps are concatenated into shared mean / log-variance heads, and
//! two decoders fed by the same reparameterized latent sample.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{Conv2dLayer, Mode, ParamStore, ResidualDownBlock, ResidualUpBlock, Session};
use crate::tensor::{Result, Tensor, TensorError};

/// Which architecture constants to start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64 px inputs, 128-d latent, five down / six up blocks.
    Paper,
    /// 32 px inputs, 16-d latent; trains in minutes on a CPU.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub wbt_channels: usize,
    pub latent_dim: usize,
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paper()
    }
}

impl ModelConfig {
    pub fn paper() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            image_channels: 3,
            wbt_channels: 1,
            latent_dim: 128,
            enc_widths: alloc::vec![64, 128, 256, 512, 512],
            dec_widths: alloc::vec![512, 256, 128, 64, 32, 32],
            leaky_slope: 0.2,
        }
    }

    pub fn desk() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            image_channels: 3,
            wbt_channels: 1,
            latent_dim: 16,
            enc_widths: alloc::vec![8, 16, 32, 64],
            dec_widths: alloc::vec![64, 32, 16, 8, 8],
            leaky_slope: 0.2,
        }
    }

    pub fn preset(p: Preset) -> ModelConfig {
        match p {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
        }
    }

    /// The encoders must end at 2x2 maps and the decoders must grow a 1x1
    /// latent map back to `image_size`.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TensorError::Invalid(format!("model config: {msg}")));
        if self.enc_widths.is_empty() || self.dec_widths.is_empty() {
            return bad("empty width schedule");
        }
        if self.enc_widths.iter().chain(&self.dec_widths).any(|&w| w == 0) {
            return bad("zero channel width");
        }
        if self.latent_dim == 0 || self.image_channels == 0 || self.wbt_channels == 0 {
            return bad("zero latent or channel count");
        }
        if self.image_size != 1usize << (self.enc_widths.len() + 1) {
            return bad("image_size must equal 2^(len(enc_widths)+1)");
        }
        if self.image_size != 1usize << self.dec_widths.len() {
            return bad("image_size must equal 2^len(dec_widths)");
        }
        Ok(())
    }
}

/// Stack of residual down blocks for one modality.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<ResidualDownBlock>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        slope: f64,
        rng: &mut R,
    ) -> Encoder {
        let mut c_in = in_channels;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResidualDownBlock::new(store, &format!("{name}.block{i}"), c_in, w, slope, rng);
                c_in = w;
                b
            })
            .collect();
        Encoder { blocks }
    }

    pub fn forward(&self, s: &mut Session, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        self.blocks
            .iter()
            .try_fold(x, |h, b| b.forward(s, store, h, mode))
    }
}

/// Residual up blocks, a final 3x3 convolution and a logistic squash.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<ResidualUpBlock>,
    pub head: Conv2dLayer,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        latent_dim: usize,
        widths: &[usize],
        out_channels: usize,
        slope: f64,
        rng: &mut R,
    ) -> Decoder {
        let mut c_in = latent_dim;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResidualUpBlock::new(store, &format!("{name}.block{i}"), c_in, w, slope, rng);
                c_in = w;
                b
            })
            .collect();
        let head = Conv2dLayer::new(store, &format!("{name}.head"), c_in, out_channels, 3, 1, 1, rng);
        Decoder { blocks, head }
    }

    pub fn forward(&self, s: &mut Session, store: &mut ParamStore, z: Var, mode: Mode) -> Result<Var> {
        let h = self
            .blocks
            .iter()
            .try_fold(z, |h, b| b.forward(s, store, h, mode))?;
        let h = self.head.forward(s, store, h)?;
        s.graph.sigmoid(h)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub recon_image: Var,
    pub recon_wbt: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Materialized forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeOutput {
    pub recon_image: Tensor,
    pub recon_wbt: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

impl ForwardVars {
    pub fn materialize(&self, g: &Graph) -> VaeOutput {
        VaeOutput {
            recon_image: g.value(self.recon_image).clone(),
            recon_wbt: g.value(self.recon_wbt).clone(),
            mu: g.value(self.mu).clone(),
            logvar: g.value(self.logvar).clone(),
            z: g.value(self.z).clone(),
        }
    }
}

/// `z = mu + exp(0.5 * logvar) * eps`; `eps` should be a constant leaf so no
/// gradient reaches it.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// Standard-normal noise of the given shape.
pub fn sample_eps<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Default chunk size for eager inference helpers.
pub const INFERENCE_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct TripletVae {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub image_encoder: Encoder,
    pub wbt_encoder: Encoder,
    pub mu_head: Conv2dLayer,
    pub logvar_head: Conv2dLayer,
    pub image_decoder: Decoder,
    pub wbt_decoder: Decoder,
}

impl TripletVae {
    /// Build a model with fan-in uniform initialization drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<TripletVae> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let slope = config.leaky_slope;
        let image_encoder = Encoder::new(
            &mut store,
            "image_encoder",
            config.image_channels,
            &config.enc_widths,
            slope,
            &mut rng,
        );
        let wbt_encoder = Encoder::new(
            &mut store,
            "wbt_encoder",
            config.wbt_channels,
            &config.enc_widths,
            slope,
            &mut rng,
        );
        let fused = 2 * config.enc_widths[config.enc_widths.len() - 1];
        let mu_head = Conv2dLayer::new(&mut store, "mu_head", fused, config.latent_dim, 2, 1, 0, &mut rng);
        let logvar_head =
            Conv2dLayer::new(&mut store, "logvar_head", fused, config.latent_dim, 2, 1, 0, &mut rng);
        let image_decoder = Decoder::new(
            &mut store,
            "image_decoder",
            config.latent_dim,
            &config.dec_widths,
            config.image_channels,
            slope,
            &mut rng,
        );
        let wbt_decoder = Decoder::new(
            &mut store,
            "wbt_decoder",
            config.latent_dim,
            &config.dec_widths,
            config.wbt_channels,
            slope,
            &mut rng,
        );
        Ok(TripletVae {
            config,
            params: store,
            image_encoder,
            wbt_encoder,
            mu_head,
            logvar_head,
            image_decoder,
            wbt_decoder,
        })
    }

    fn check_input(&self, g: &Graph, v: Var, channels: usize, what: &'static str) -> Result<()> {
        let s = self.config.image_size;
        let shape = g.shape(v);
        if shape.len() != 4 || shape[1] != channels || shape[2] != s || shape[3] != s {
            return Err(TensorError::ShapeMismatch {
                op: what,
                lhs: alloc::vec![shape.first().copied().unwrap_or(0), channels, s, s],
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Latent mean and log-variance, each `(N, latent_dim)`.
    pub fn encode(&mut self, s: &mut Session, image: Var, wbt: Var, mode: Mode) -> Result<(Var, Var)> {
        self.check_input(&s.graph, image, self.config.image_channels, "encode image")?;
        self.check_input(&s.graph, wbt, self.config.wbt_channels, "encode wbt")?;
        if s.graph.shape(image)[0] != s.graph.shape(wbt)[0] {
            return Err(TensorError::ShapeMismatch {
                op: "encode batch",
                lhs: s.graph.shape(image).to_vec(),
                rhs: s.graph.shape(wbt).to_vec(),
            });
        }
        let n = s.graph.shape(image)[0];
        let fi = self.image_encoder.forward(s, &mut self.params, image, mode)?;
        let fw = self.wbt_encoder.forward(s, &mut self.params, wbt, mode)?;
        let fused = s.graph.concat_channels(fi, fw)?;
        let d = self.config.latent_dim;
        let mu = self.mu_head.forward(s, &self.params, fused)?;
        let mu = s.graph.reshape(mu, [n, d])?;
        let logvar = self.logvar_head.forward(s, &self.params, fused)?;
        let logvar = s.graph.reshape(logvar, [n, d])?;
        Ok((mu, logvar))
    }

    /// Image and WBT reconstructions from latent vectors `(N, latent_dim)`.
    pub fn decode(&mut self, s: &mut Session, z: Var, mode: Mode) -> Result<(Var, Var)> {
        let d = self.config.latent_dim;
        let shape = s.graph.shape(z);
        if shape.len() != 2 || shape[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: alloc::vec![shape.first().copied().unwrap_or(0), d],
                rhs: shape.to_vec(),
            });
        }
        let n = shape[0];
        let z4 = s.graph.reshape(z, [n, d, 1, 1])?;
        let image = self.image_decoder.forward(s, &mut self.params, z4, mode)?;
        let wbt = self.wbt_decoder.forward(s, &mut self.params, z4, mode)?;
        Ok((image, wbt))
    }

    /// Encode, sample with the supplied noise, decode.
    pub fn forward(
        &mut self,
        s: &mut Session,
        image: Var,
        wbt: Var,
        eps: Tensor,
        mode: Mode,
    ) -> Result<ForwardVars> {
        let (mu, logvar) = self.encode(s, image, wbt, mode)?;
        if eps.shape() != s.graph.shape(mu) {
            return Err(TensorError::ShapeMismatch {
                op: "reparameterize",
                lhs: s.graph.shape(mu).to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let eps = s.graph.constant(eps);
        let z = reparameterize(&mut s.graph, mu, logvar, eps)?;
        let (recon_image, recon_wbt) = self.decode(s, z, mode)?;
        Ok(ForwardVars {
            recon_image,
            recon_wbt,
            mu,
            logvar,
            z,
        })
    }

    /// Eval-mode forward pass with fresh noise.
    pub fn infer<R: Rng + ?Sized>(&mut self, image: &Tensor, wbt: &Tensor, rng: &mut R) -> Result<VaeOutput> {
        let mut s = Session::inference(Graph::new());
        let iv = s.graph.constant(image.clone());
        let wv = s.graph.constant(wbt.clone());
        let n = image.shape().first().copied().unwrap_or(0);
        let eps = sample_eps(&[n, self.config.latent_dim], rng);
        let out = self.forward(&mut s, iv, wv, eps, Mode::Eval)?;
        Ok(out.materialize(&s.graph))
    }

    /// Eval-mode latent means and log-variances for a batch of pairs,
    /// processed in chunks.
    pub fn encode_batch(&mut self, images: &Tensor, wbts: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = images.shape().first().copied().unwrap_or(0);
        let d = self.config.latent_dim;
        let mut mu = Vec::with_capacity(n * d);
        let mut logvar = Vec::with_capacity(n * d);
        for (imgs, ws) in chunks(images, INFERENCE_CHUNK).zip(chunks(wbts, INFERENCE_CHUNK)) {
            let mut s = Session::inference(Graph::new());
            let iv = s.graph.constant(imgs);
            let wv = s.graph.constant(ws);
            let (m, l) = self.encode(&mut s, iv, wv, Mode::Eval)?;
            mu.extend_from_slice(s.graph.value(m).data());
            logvar.extend_from_slice(s.graph.value(l).data());
        }
        Ok((Tensor::new([n, d], mu)?, Tensor::new([n, d], logvar)?))
    }

    /// Eval-mode decoding of latent vectors, processed in chunks.
    pub fn decode_batch(&mut self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, _) = z.dims2("decode_batch")?;
        let size = self.config.image_size;
        let mut images = Vec::new();
        let mut wbts = Vec::new();
        for zc in chunks(z, INFERENCE_CHUNK) {
            let mut s = Session::inference(Graph::new());
            let zv = s.graph.constant(zc);
            let (i, w) = self.decode(&mut s, zv, Mode::Eval)?;
            images.extend_from_slice(s.graph.value(i).data());
            wbts.extend_from_slice(s.graph.value(w).data());
        }
        Ok((
            Tensor::new([n, self.config.image_channels, size, size], images)?,
            Tensor::new([n, self.config.wbt_channels, size, size], wbts)?,
        ))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }
}

/// Split a batched tensor into leading-axis chunks.
fn chunks(t: &Tensor, size: usize) -> impl Iterator<Item = Tensor> + '_ {
    let n = t.shape().first().copied().unwrap_or(0);
    let per = if n == 0 { 0 } else { t.numel() / n };
    (0..n).step_by(size.max(1)).map(move |start| {
        let end = (start + size).min(n);
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        Tensor::new(shape, t.data()[start * per..end * per].to_vec()).expect("chunk shape")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        let mut bad = ModelConfig::desk();
        bad.image_size = 64;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eps_zero_gives_mean() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new([1, 3], alloc::vec![1.0, -2.0, 0.5]).unwrap());
        let lv = g.constant(Tensor::new([1, 3], alloc::vec![0.3, -1.0, 2.0]).unwrap());
        let eps = g.constant(Tensor::zeros([1, 3]));
        let z = reparameterize(&mut g, mu, lv, eps).unwrap();
        assert_eq!(g.value(z), g.value(mu));
    }

    #[test]
    fn reparameterize_gradient_skips_eps() {
        let mut g = Graph::new();
        let mu = g.variable(Tensor::full([2], 0.0));
        let lv = g.variable(Tensor::full([2], 0.0));
        let eps = g.constant(Tensor::full([2], 1.5));
        let z = reparameterize(&mut g, mu, lv, eps).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(mu).unwrap().data(), &[1.0, 1.0]);
        // d/dlv of exp(lv/2) * eps at lv=0 is eps/2
        assert_eq!(g.grad(lv).unwrap().data(), &[0.75, 0.75]);
        assert!(g.grad(eps).is_none());
    }
}
