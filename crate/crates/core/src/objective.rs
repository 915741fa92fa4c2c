//! Loss functions and their supporting networks.
//!
//! * Feature-reconstruction loss: a small decoder maps discriminator
//!   features back to a patch; the loss is the per-layer-normalized L2
//!   distance between extractor features of the decoded patch and of the
//!   real patch, averaged over extractor layers.
//! * MSE between predicted and true pixels.
//! * Fixed-weight combination of the two (ablation mode) and the
//!   uncertainty-weighted combination with learned log-variances
//!   `s_i = log sigma_i^2`:
//!   `L = e^{-s1} L_r / 2 + e^{-s2} L_mse / 2 + (s1 + s2) / 2`,
//!   whose minimizer over `s_i` satisfies `exp(s_i) = L_i`.
//! * Non-saturating adversarial losses with an R1 gradient penalty.
//!
//! The feature extractor is pluggable: a frozen seed-deterministic conv
//! pyramid by default, or user-supplied weights loaded from the documented
//! array container.

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, conv2d, softplus, upsample2x};
use crate::io::ArrayContainer;
use crate::tensor::Tensor;

pub const FX_MAGIC: &str = "RFWGT1";

/// Frozen feature pyramid: `stages` of 3x3 stride-2 convs with leaky-relu.
/// An empty stage list is the identity extractor (the input itself is the
/// single feature layer), used by tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub descriptor: String,
    stages: Vec<(Tensor, Tensor)>,
    leaky_alpha: f64,
}

/// How to build a feature extractor.
#[derive(Debug, Clone)]
pub enum FxSpec {
    SeededRandom { seed: u64 },
    External { path: std::path::PathBuf },
}

pub fn make_feature_extractor(spec: &FxSpec) -> Result<FeatureExtractor> {
    match spec {
        FxSpec::SeededRandom { seed } => Ok(FeatureExtractor::seeded_random(*seed)),
        FxSpec::External { path } => FeatureExtractor::load(path),
    }
}

impl FeatureExtractor {
    /// Four-stage strided conv pyramid with frozen seed-deterministic
    /// weights; channels 8, 16, 32, 64.
    pub fn seeded_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = [8usize, 16, 32, 64];
        let mut stages = Vec::new();
        let mut c_in = 1usize;
        for &c_out in &channels {
            let fan_in = c_in * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let k = Tensor::new(
                vec![c_out, fan_in],
                (0..c_out * fan_in)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            );
            stages.push((k, Tensor::zeros(vec![c_out])));
            c_in = c_out;
        }
        FeatureExtractor {
            descriptor: format!("seeded-random(seed={seed})"),
            stages,
            leaky_alpha: 0.2,
        }
    }

    /// Identity extractor: the input is the single feature layer.
    pub fn identity() -> Self {
        FeatureExtractor {
            descriptor: "identity".to_string(),
            stages: Vec::new(),
            leaky_alpha: 0.2,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Apply to a CHW map already on the graph; returns all stage outputs
    /// (the input itself for the identity extractor).
    pub fn apply_graph(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        if self.stages.is_empty() {
            return vec![x];
        }
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (k, b) in &self.stages {
            let kv = g.constant(k.clone());
            let bv = g.constant(b.clone());
            let p = conv2d(g, h, kv, bv, 3, 2, 1);
            h = g.leaky_relu(p, self.leaky_alpha);
            outs.push(h);
        }
        outs
    }

    /// Value-level feature maps of an `[H, W]` image in [0, 1].
    pub fn apply(&self, img: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let x = chw(&mut g, img);
        let outs = self.apply_graph(&mut g, x);
        outs.into_iter().map(|v| g.value(v).clone()).collect()
    }

    /// Fixed-length embedding for set-level metrics: channel-wise spatial
    /// mean of the final stage.
    pub fn pooled_features(&self, img: &Tensor) -> Vec<f64> {
        let maps = self.apply(img);
        let last = maps.last().expect("at least one feature layer");
        let shape = last.shape();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        (0..c)
            .map(|ci| last.data()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = ArrayContainer::new(serde_json::json!({
            "descriptor": self.descriptor,
            "stages": self.stages.len(),
            "leaky_alpha": self.leaky_alpha,
        }));
        for (i, (k, b)) in self.stages.iter().enumerate() {
            c.insert(format!("stage{i}.k"), k.clone());
            c.insert(format!("stage{i}.b"), b.clone());
        }
        c.save(path, FX_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = ArrayContainer::load(path, FX_MAGIC)?;
        let n = c.meta["stages"]
            .as_u64()
            .ok_or_else(|| Error::format("feature container missing stage count"))?
            as usize;
        let alpha = c.meta["leaky_alpha"].as_f64().unwrap_or(0.2);
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let k = c.take(&format!("stage{i}.k"))?;
            let b = c.take(&format!("stage{i}.b"))?;
            stages.push((k, b));
        }
        Ok(FeatureExtractor {
            descriptor: format!("external({})", path.display()),
            stages,
            leaky_alpha: alpha,
        })
    }
}

/// Lift an `[H, W]` image to a `[1, H, W]` map on the graph.
pub fn chw(g: &mut Graph, img: &Tensor) -> Var {
    let shape = img.shape().to_vec();
    assert_eq!(shape.len(), 2, "expected an [H, W] image");
    g.constant(img.clone().reshaped(vec![1, shape[0], shape[1]]))
}

/// Learned log-variances of the two-task uncertainty weighting,
/// `s_i = log sigma_i^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyParams {
    pub s: Tensor,
}

impl UncertaintyParams {
    pub fn new(s1: f64, s2: f64) -> Self {
        UncertaintyParams {
            s: Tensor::from_slice(&[s1, s2]),
        }
    }

    pub fn zeros() -> Self {
        UncertaintyParams::new(0.0, 0.0)
    }

    pub fn s1(&self) -> f64 {
        self.s.data()[0]
    }

    pub fn s2(&self) -> f64 {
        self.s.data()[1]
    }

    pub fn sigma1_sq(&self) -> f64 {
        self.s1().exp()
    }

    pub fn sigma2_sq(&self) -> f64 {
        self.s2().exp()
    }
}

/// Small conv decoder mapping discriminator features back to a patch.
/// Two nearest-neighbor upsamplings, so the patch side is 4x the feature
/// side.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxDecoder {
    pub in_channels: usize,
    pub conv1: (Tensor, Tensor),
    pub conv2: (Tensor, Tensor),
    pub conv3: (Tensor, Tensor),
    pub leaky_alpha: f64,
}

pub struct DecoderVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub conv3: (Var, Var),
}

impl DecoderVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.conv1.0,
            self.conv1.1,
            self.conv2.0,
            self.conv2.1,
            self.conv3.0,
            self.conv3.1,
        ]
    }
}

pub fn init_decoder(in_channels: usize, seed: u64) -> AuxDecoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |c_out: usize, c_in: usize| {
        let fan_in = c_in * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        (
            Tensor::new(
                vec![c_out, fan_in],
                (0..c_out * fan_in)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            ),
            Tensor::zeros(vec![c_out]),
        )
    };
    let conv1 = make(16, in_channels);
    let conv2 = make(8, 16);
    let conv3 = make(1, 8);
    AuxDecoder {
        in_channels,
        conv1,
        conv2,
        conv3,
        leaky_alpha: 0.2,
    }
}

impl AuxDecoder {
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("dec.conv1.k".into(), &self.conv1.0),
            ("dec.conv1.b".into(), &self.conv1.1),
            ("dec.conv2.k".into(), &self.conv2.0),
            ("dec.conv2.b".into(), &self.conv2.1),
            ("dec.conv3.k".into(), &self.conv3.0),
            ("dec.conv3.b".into(), &self.conv3.1),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.0,
            &mut self.conv1.1,
            &mut self.conv2.0,
            &mut self.conv2.1,
            &mut self.conv3.0,
            &mut self.conv3.1,
        ]
    }

    pub fn mount(&self, g: &mut Graph) -> DecoderVars {
        DecoderVars {
            conv1: (g.leaf(self.conv1.0.clone()), g.leaf(self.conv1.1.clone())),
            conv2: (g.leaf(self.conv2.0.clone()), g.leaf(self.conv2.1.clone())),
            conv3: (g.leaf(self.conv3.0.clone()), g.leaf(self.conv3.1.clone())),
        }
    }

    /// Features `[C, h, w]` -> decoded patch `[4h, 4w]` in (0, 1).
    pub fn forward_graph(&self, g: &mut Graph, vars: &DecoderVars, f: Var) -> Var {
        let up1 = upsample2x(g, f);
        let p1 = conv2d(g, up1, vars.conv1.0, vars.conv1.1, 3, 1, 1);
        let h1 = g.leaky_relu(p1, self.leaky_alpha);
        let up2 = upsample2x(g, h1);
        let p2 = conv2d(g, up2, vars.conv2.0, vars.conv2.1, 3, 1, 1);
        let h2 = g.leaky_relu(p2, self.leaky_alpha);
        let p3 = conv2d(g, h2, vars.conv3.0, vars.conv3.1, 3, 1, 1);
        let out = g.sigmoid(p3);
        let shape = g.value(out).shape().to_vec();
        g.reshape(out, vec![shape[1], shape[2]])
    }
}

/// Per-layer feature distance: `|a - b|_2 / (w*h*d)` where the
/// normalizer is the element count of the layer.
pub fn feature_distance_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let n = g.value(a).len();
    assert_eq!(n, g.value(b).len(), "feature layer shapes must agree");
    let d = g.sub(a, b);
    let sq = g.square(d);
    let ss = g.sum_all(sq);
    let norm = g.sqrt(ss);
    g.scale(norm, 1.0 / n as f64)
}

/// Feature-reconstruction loss on the graph: decode the discriminator
/// features, then average the per-layer feature distance between the
/// decoded patch and the real patch over all extractor layers.
pub fn feature_recon_loss_graph(
    g: &mut Graph,
    fx: &FeatureExtractor,
    dec: &AuxDecoder,
    dec_vars: &DecoderVars,
    features: Var,
    real_patch: &Tensor,
) -> Var {
    let decoded = dec.forward_graph(g, dec_vars, features);
    let dec_shape = g.value(decoded).shape().to_vec();
    assert_eq!(
        dec_shape,
        real_patch.shape().to_vec(),
        "decoded patch shape must match the real patch"
    );
    let dec_chw = g.reshape(decoded, vec![1, dec_shape[0], dec_shape[1]]);
    let real_chw = chw(g, real_patch);
    let fa = fx.apply_graph(g, dec_chw);
    let fb = fx.apply_graph(g, real_chw);
    let mut acc: Option<Var> = None;
    let layers = fa.len();
    for (a, b) in fa.into_iter().zip(fb) {
        let d = feature_distance_graph(g, a, b);
        acc = Some(match acc {
            None => d,
            Some(p) => g.add(p, d),
        });
    }
    let total = acc.expect("extractor must expose at least one layer");
    g.scale(total, 1.0 / layers as f64)
}

/// Value-level feature-reconstruction loss.
pub fn feature_recon_loss(
    fx: &FeatureExtractor,
    dec: &AuxDecoder,
    features: &Tensor,
    real_patch: &Tensor,
) -> f64 {
    let mut g = Graph::new();
    let dv = dec.mount(&mut g);
    let fv = g.constant(features.clone());
    let l = feature_recon_loss_graph(&mut g, fx, dec, &dv, fv, real_patch);
    g.value(l).item()
}

/// Mean squared error `(1/N) sum (y_i - yhat_i)^2`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "mse on mismatched shapes");
    assert!(!pred.is_empty());
    let mut acc = 0.0;
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = t - p;
        acc += d * d;
    }
    acc / pred.len() as f64
}

pub fn mse_loss_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(target, pred);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Manually weighted generator loss (ablation mode).
pub fn fixed_gen_loss(l_r: f64, l_mse: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * l_r + lambda2 * l_mse
}

/// Uncertainty-weighted multitask loss with log-variance parameters.
pub fn uncertainty_loss(l_r: f64, l_mse: f64, u: &UncertaintyParams) -> f64 {
    (-u.s1()).exp() * l_r / 2.0 + (-u.s2()).exp() * l_mse / 2.0 + (u.s1() + u.s2()) / 2.0
}

/// Analytic gradient of [`uncertainty_loss`] w.r.t. `(s1, s2)`.
pub fn uncertainty_grad(l_r: f64, l_mse: f64, u: &UncertaintyParams) -> (f64, f64) {
    (
        -(-u.s1()).exp() * l_r / 2.0 + 0.5,
        -(-u.s2()).exp() * l_mse / 2.0 + 0.5,
    )
}

/// Graph version: `l_r`, `l_mse` scalar nodes, `s` a `[2]` leaf.
pub fn uncertainty_loss_graph(g: &mut Graph, l_r: Var, l_mse: Var, s: Var) -> Var {
    let s1 = g.gather(s, Arc::new(vec![0i64]), vec![1]);
    let s2 = g.gather(s, Arc::new(vec![1i64]), vec![1]);
    let n1 = g.neg(s1);
    let w1 = g.exp(n1);
    let n2 = g.neg(s2);
    let w2 = g.exp(n2);
    let t1 = g.mul(w1, l_r);
    let t1 = g.scale(t1, 0.5);
    let t2 = g.mul(w2, l_mse);
    let t2 = g.scale(t2, 0.5);
    let sr = g.add(s1, s2);
    let reg = g.scale(sr, 0.5);
    let a = g.add(t1, t2);
    g.add(a, reg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GanLossMode {
    NonSaturating,
}

#[derive(Debug, Clone, Copy)]
pub struct GanLosses {
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub r1_penalty: f64,
}

/// Non-saturating logistic GAN losses plus the (already computed) squared
/// input-gradient norm on real patches:
/// `loss_D = mean softplus(-D(real)) + mean softplus(D(fake))`,
/// `loss_G = mean softplus(-D(fake))`,
/// `r1 = gamma/2 * mean |grad_x D(real)|^2`.
pub fn gan_losses(
    real_logits: &[f64],
    fake_logits: &[f64],
    grad_sq_real: &[f64],
    gamma_r1: f64,
    mode: GanLossMode,
) -> GanLosses {
    let GanLossMode::NonSaturating = mode;
    assert!(!real_logits.is_empty() && !fake_logits.is_empty());
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| -> f64 {
        xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
    };
    let loss_d = mean(real_logits, &|x| softplus(-x)) + mean(fake_logits, &softplus);
    let loss_g_adv = mean(fake_logits, &|x| softplus(-x));
    let r1_penalty = if grad_sq_real.is_empty() {
        0.0
    } else {
        gamma_r1 / 2.0 * grad_sq_real.iter().sum::<f64>() / grad_sq_real.len() as f64
    };
    GanLosses {
        loss_d,
        loss_g_adv,
        r1_penalty,
    }
}
