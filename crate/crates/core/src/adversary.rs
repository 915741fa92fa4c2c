//! Multi-scale patch sampling and the patch discriminator.
//!
//! Patches are K x K corner-aligned lattices of continuous image
//! coordinates: a patch of scale `s` centered at `u` spans
//! `[u - s, u + s]` inclusive per axis, so adjacent samples sit
//! `2s/(K-1)` apart. The discriminator is a small strided conv stack
//! conditioned on the patch scale (constant extra channel); it exposes the
//! output of its penultimate conv block as the feature map consumed by the
//! feature-reconstruction loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

use crate::drr::RadiographImage;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, conv2d};
use crate::tensor::Tensor;

/// Where and how large a patch is sampled, in image coords.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub k: usize,
    /// Fraction of the image half-extent, in (0, 1].
    pub scale: f64,
    /// Patch center; the footprint must stay inside [-1, 1]^2.
    pub center: (f64, f64),
}

impl PatchSpec {
    pub fn new(k: usize, scale: f64, center: (f64, f64)) -> Result<Self> {
        if k < 4 {
            return Err(Error::invalid("patch side K must be >= 4"));
        }
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::invalid("patch scale must be in (0, 1]"));
        }
        let eps = 1e-9;
        if center.0.abs() + scale > 1.0 + eps || center.1.abs() + scale > 1.0 + eps {
            return Err(Error::invalid("patch footprint leaves [-1, 1]^2"));
        }
        Ok(PatchSpec { k, scale, center })
    }

    /// Row-major K x K lattice of (u, v) coords covered by this patch.
    pub fn coords(&self) -> Vec<(f64, f64)> {
        lattice_coords(self.k, self.scale, self.center)
    }
}

/// Corner-aligned lattice: K x K samples spanning `[c - s, c + s]`
/// inclusive per axis (row-major, v varying over rows).
pub fn lattice_coords(k: usize, scale: f64, center: (f64, f64)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(k * k);
    let step = if k > 1 {
        2.0 * scale / (k - 1) as f64
    } else {
        0.0
    };
    for r in 0..k {
        let v = if k > 1 {
            center.1 - scale + step * r as f64
        } else {
            center.1
        };
        for c in 0..k {
            let u = if k > 1 {
                center.0 - scale + step * c as f64
            } else {
                center.0
            };
            out.push((u, v));
        }
    }
    out
}

/// Draw a patch spec: scale uniform in [s_min, s_max], center uniform over
/// the valid region. Deterministic per seed.
pub fn sample_patch_spec(seed: u64, k: usize, s_min: f64, s_max: f64) -> Result<PatchSpec> {
    if !(s_min > 0.0 && s_min <= s_max && s_max <= 1.0) {
        return Err(Error::invalid(format!(
            "invalid scale range [{s_min}, {s_max}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if s_max > s_min {
        rng.random_range(s_min..s_max)
    } else {
        s_min
    };
    let free = 1.0 - scale;
    let center = if free > 0.0 {
        (rng.random_range(-free..free), rng.random_range(-free..free))
    } else {
        (0.0, 0.0)
    };
    PatchSpec::new(k, scale, center)
}

/// Bilinear sample of an image at continuous coords. The lattice rule maps
/// u = -1 to column 0 and u = +1 to column W-1 (rows likewise), matching
/// the projector's pixel lattice, so coords at pixel centers return exact
/// pixel values.
pub fn extract_patch(img: &RadiographImage, coords: &[(f64, f64)], k: usize) -> Tensor {
    assert_eq!(coords.len(), k * k, "coords must be a K x K lattice");
    let (h, w) = img.res;
    let mut out = Vec::with_capacity(coords.len());
    for &(u, v) in coords {
        out.push(bilinear(&img.pixels, h, w, u, v));
    }
    Tensor::new(vec![k, k], out)
}

fn bilinear(pixels: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let fx = if w > 1 {
        (u + 1.0) / 2.0 * (w - 1) as f64
    } else {
        0.0
    };
    let fy = if h > 1 {
        (v + 1.0) / 2.0 * (h - 1) as f64
    } else {
        0.0
    };
    let x0 = (fx.floor() as isize).clamp(0, w as isize - 1) as usize;
    let y0 = (fy.floor() as isize).clamp(0, h as isize - 1) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = (fx - x0 as f64).clamp(0.0, 1.0);
    let ty = (fy - y0 as f64).clamp(0.0, 1.0);
    let p00 = pixels[y0 * w + x0];
    let p01 = pixels[y0 * w + x1];
    let p10 = pixels[y1 * w + x0];
    let p11 = pixels[y1 * w + x1];
    (1.0 - ty) * ((1.0 - tx) * p00 + tx * p01) + ty * ((1.0 - tx) * p10 + tx * p11)
}

/// Discriminator layout. Three stride-2 conv blocks with leaky-relu, then
/// a linear head; `features` come from the second (penultimate) block.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscArch {
    pub k: usize,
    pub channels: (usize, usize, usize),
    pub leaky_alpha: f64,
}

impl DiscArch {
    pub fn for_patch(k: usize) -> Self {
        DiscArch {
            k,
            channels: (16, 32, 64),
            leaky_alpha: 0.2,
        }
    }

    fn block_dims(&self) -> [(usize, usize); 3] {
        let o1 = conv_out(self.k, 3, 2, 1);
        let o2 = conv_out(o1, 3, 2, 1);
        let o3 = conv_out(o2, 3, 2, 1);
        [(o1, o1), (o2, o2), (o3, o3)]
    }

    /// Feature-map shape `(w, h, d)` exposed for the reconstruction loss.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let dims = self.block_dims();
        (dims[1].0, dims[1].1, self.channels.1)
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub arch: DiscArch,
    pub conv1: (Tensor, Tensor),
    pub conv2: (Tensor, Tensor),
    pub conv3: (Tensor, Tensor),
    pub fc: (Tensor, Tensor),
}

pub struct DiscVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub conv3: (Var, Var),
    pub fc: (Var, Var),
}

impl DiscVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.conv1.0,
            self.conv1.1,
            self.conv2.0,
            self.conv2.1,
            self.conv3.0,
            self.conv3.1,
            self.fc.0,
            self.fc.1,
        ]
    }
}

/// Graph handles of one discriminator evaluation.
pub struct DiscOut {
    pub logit: Var,
    /// Output of the penultimate conv block, CHW.
    pub features: Var,
}

/// Value-level discriminator output.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub logit: f64,
    pub features: Tensor,
}

fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::new(
        vec![c_out, fan_in],
        (0..c_out * fan_in).map(|_| normal.sample(rng)).collect(),
    )
}

pub fn init_discriminator(arch: DiscArch, seed: u64) -> Result<Discriminator> {
    if arch.k < 4 || !arch.k.is_multiple_of(4) {
        return Err(Error::invalid(
            "discriminator patch side must be a positive multiple of 4",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c1, c2, c3) = arch.channels;
    let conv1 = (conv_init(&mut rng, c1, 2 * 9), Tensor::zeros(vec![c1]));
    let conv2 = (conv_init(&mut rng, c2, c1 * 9), Tensor::zeros(vec![c2]));
    let conv3 = (conv_init(&mut rng, c3, c2 * 9), Tensor::zeros(vec![c3]));
    let o3 = arch.block_dims()[2].0;
    let flat = c3 * o3 * o3;
    let fc = (
        conv_init(&mut rng, 1, flat).reshaped(vec![flat, 1]),
        Tensor::zeros(vec![1]),
    );
    Ok(Discriminator {
        arch,
        conv1,
        conv2,
        conv3,
        fc,
    })
}

impl Discriminator {
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("disc.conv1.k".into(), &self.conv1.0),
            ("disc.conv1.b".into(), &self.conv1.1),
            ("disc.conv2.k".into(), &self.conv2.0),
            ("disc.conv2.b".into(), &self.conv2.1),
            ("disc.conv3.k".into(), &self.conv3.0),
            ("disc.conv3.b".into(), &self.conv3.1),
            ("disc.fc.w".into(), &self.fc.0),
            ("disc.fc.b".into(), &self.fc.1),
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
            &mut self.fc.0,
            &mut self.fc.1,
        ]
    }

    pub fn mount(&self, g: &mut Graph) -> DiscVars {
        DiscVars {
            conv1: (g.leaf(self.conv1.0.clone()), g.leaf(self.conv1.1.clone())),
            conv2: (g.leaf(self.conv2.0.clone()), g.leaf(self.conv2.1.clone())),
            conv3: (g.leaf(self.conv3.0.clone()), g.leaf(self.conv3.1.clone())),
            fc: (g.leaf(self.fc.0.clone()), g.leaf(self.fc.1.clone())),
        }
    }

    /// Build the conv input: the patch plus a constant channel holding the
    /// patch scale.
    fn stack_input(&self, g: &mut Graph, patch: Var, scale: f64) -> Var {
        let k = self.arch.k;
        assert_eq!(g.value(patch).shape(), &[k, k], "patch side mismatch");
        let flat = g.reshape(patch, vec![1, k * k]);
        let schan = g.constant(Tensor::full(vec![1, k * k], scale));
        let both = g.concat_cols(&[flat, schan]);
        g.reshape(both, vec![2, k, k])
    }

    /// Forward pass. When `record_preacts` is provided, the three conv
    /// pre-activations are pushed onto it (used to freeze activation masks
    /// for the R1 replay).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &DiscVars,
        patch: Var,
        scale: f64,
        mut record_preacts: Option<&mut Vec<Var>>,
    ) -> DiscOut {
        let alpha = self.arch.leaky_alpha;
        let x = self.stack_input(g, patch, scale);

        let p1 = conv2d(g, x, vars.conv1.0, vars.conv1.1, 3, 2, 1);
        if let Some(rec) = record_preacts.as_deref_mut() {
            rec.push(p1);
        }
        let h1 = g.leaky_relu(p1, alpha);

        let p2 = conv2d(g, h1, vars.conv2.0, vars.conv2.1, 3, 2, 1);
        if let Some(rec) = record_preacts.as_deref_mut() {
            rec.push(p2);
        }
        let h2 = g.leaky_relu(p2, alpha);

        let p3 = conv2d(g, h2, vars.conv3.0, vars.conv3.1, 3, 2, 1);
        if let Some(rec) = record_preacts {
            rec.push(p3);
        }
        let h3 = g.leaky_relu(p3, alpha);

        let flat_len = self.fc.0.shape()[0];
        let flat = g.reshape(h3, vec![1, flat_len]);
        let logit = g.matmul(flat, vars.fc.0);
        let logit = g.add_bias_row(logit, vars.fc.1);
        let logit = g.reshape(logit, vec![1]);

        DiscOut {
            logit,
            features: h2,
        }
    }

    /// Replay of the forward pass with frozen activation masks, making the
    /// network linear in its input. Used by [`Discriminator::r1`].
    fn masked_forward(
        &self,
        g: &mut Graph,
        vars: &DiscVars,
        patch: Var,
        scale: f64,
        masks: &[Arc<Tensor>; 3],
    ) -> Var {
        let x = self.stack_input(g, patch, scale);
        let p1 = conv2d(g, x, vars.conv1.0, vars.conv1.1, 3, 2, 1);
        let h1 = g.mul_const(p1, masks[0].clone());
        let p2 = conv2d(g, h1, vars.conv2.0, vars.conv2.1, 3, 2, 1);
        let h2 = g.mul_const(p2, masks[1].clone());
        let p3 = conv2d(g, h2, vars.conv3.0, vars.conv3.1, 3, 2, 1);
        let h3 = g.mul_const(p3, masks[2].clone());
        let flat_len = self.fc.0.shape()[0];
        let flat = g.reshape(h3, vec![1, flat_len]);
        let logit = g.matmul(flat, vars.fc.0);
        let logit = g.add_bias_row(logit, vars.fc.1);
        g.reshape(logit, vec![1])
    }

    /// Value-level forward.
    pub fn discriminate(&self, patch: &Tensor, scale: f64) -> DiscOutput {
        let mut g = Graph::new();
        let vars = self.mount(&mut g);
        let pv = g.leaf(patch.clone());
        let out = self.forward_graph(&mut g, &vars, pv, scale, None);
        DiscOutput {
            logit: g.value(out.logit).item(),
            features: g.value(out.features).clone(),
        }
    }

    /// R1 penalty on a real patch and its exact parameter gradients:
    /// `penalty = gamma/2 * |grad_patch logit|^2`.
    ///
    /// The parameter gradient is computed by replaying the network with
    /// frozen leaky-relu masks (the activation pattern is piecewise
    /// constant, so its contribution to the second derivative is zero
    /// almost everywhere): with masks fixed the logit is linear in the
    /// input and `grad_theta penalty = gamma * grad_theta [D(x+u) - D(x)]`
    /// where `u = grad_x D(x)` is held constant.
    pub fn r1(&self, patch: &Tensor, scale: f64, gamma: f64) -> (f64, Vec<Tensor>) {
        // pass 1: input gradient and activation masks
        let mut g1 = Graph::new();
        let vars1 = self.mount(&mut g1);
        let pv = g1.leaf(patch.clone());
        let mut preacts = Vec::new();
        let out = self.forward_graph(&mut g1, &vars1, pv, scale, Some(&mut preacts));
        let grads1 = g1.backward(out.logit);
        let u = grads1
            .get(pv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(patch.shape().to_vec()));
        let alpha = self.arch.leaky_alpha;
        let mask = |v: Var| -> Arc<Tensor> {
            Arc::new(g1.value(v).map(|x| if x > 0.0 { 1.0 } else { alpha }))
        };
        let masks = [mask(preacts[0]), mask(preacts[1]), mask(preacts[2])];

        let grad_sq: f64 = u.data().iter().map(|x| x * x).sum();
        let penalty = gamma / 2.0 * grad_sq;

        // pass 2: frozen-mask replay, differentiate D(x+u) - D(x) in theta
        let mut g2 = Graph::new();
        let vars2 = self.mount(&mut g2);
        let x_plus = g2.constant(patch.add(&u));
        let x_base = g2.constant(patch.clone());
        let lp = self.masked_forward(&mut g2, &vars2, x_plus, scale, &masks);
        let lb = self.masked_forward(&mut g2, &vars2, x_base, scale, &masks);
        let diff = g2.sub(lp, lb);
        let s = g2.reshape(diff, vec![1]);
        let s = g2.sum_all(s);
        let grads2 = g2.backward(s);

        let theta_grads = vars2
            .all()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let shape = self.named_params()[i].1.shape().to_vec();
                grads2.get_or_zeros(v, &shape).scale(gamma)
            })
            .collect();
        (penalty, theta_grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::Pose;

    fn test_image(h: usize, w: usize) -> RadiographImage {
        RadiographImage {
            res: (h, w),
            pixels: (0..h * w)
                .map(|i| ((i * 2654435761usize) % 997) as f64 / 996.0)
                .collect(),
            pose: Pose::new(0.0, 10.0),
        }
    }

    #[test]
    fn full_scale_patch_centers_at_origin() {
        let spec = sample_patch_spec(5, 16, 1.0, 1.0).unwrap();
        assert_eq!(spec.scale, 1.0);
        assert_eq!(spec.center, (0.0, 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_patch_spec(123, 16, 0.25, 1.0).unwrap();
        let b = sample_patch_spec(123, 16, 0.25, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(sample_patch_spec(0, 16, 0.0, 1.0).is_err());
        assert!(sample_patch_spec(0, 16, 0.5, 0.25).is_err());
    }

    #[test]
    fn scale_distribution_mean() {
        let (s_min, s_max) = (0.25, 1.0);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| sample_patch_spec(i as u64, 16, s_min, s_max).unwrap().scale)
            .sum::<f64>()
            / n as f64;
        let expect = (s_min + s_max) / 2.0;
        let sigma = (s_max - s_min) / 12f64.sqrt() / (n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * sigma,
            "mean {mean} vs {expect} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn footprints_stay_in_bounds() {
        for seed in 0..500 {
            let spec = sample_patch_spec(seed, 16, 0.1, 1.0).unwrap();
            for (u, v) in spec.coords() {
                assert!((-1.0..=1.0).contains(&u) && (-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn lattice_corners_at_k2() {
        let coords = lattice_coords(2, 1.0, (0.0, 0.0));
        assert_eq!(
            coords,
            vec![(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
        );
    }

    #[test]
    fn lattice_spacing_closed_form() {
        let k = 16;
        let s = 0.4;
        let coords = lattice_coords(k, s, (0.1, -0.2));
        let step = 2.0 * s / (k - 1) as f64;
        for r in 0..k {
            for c in 0..k.saturating_sub(1) {
                let a = coords[r * k + c];
                let b = coords[r * k + c + 1];
                assert!((b.0 - a.0 - step).abs() < 1e-12);
                assert!((b.1 - a.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extract_constant_image() {
        let img = RadiographImage {
            res: (8, 8),
            pixels: vec![0.42; 64],
            pose: Pose::new(0.0, 10.0),
        };
        let spec = PatchSpec::new(4, 0.5, (0.2, -0.1)).unwrap();
        let patch = extract_patch(&img, &spec.coords(), 4);
        assert!(patch.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn extract_at_pixel_centers_is_exact() {
        let img = test_image(9, 9);
        // the full-image lattice at K = 9 hits pixel centers exactly
        let coords = lattice_coords(9, 1.0, (0.0, 0.0));
        let patch = extract_patch(&img, &coords, 9);
        assert_eq!(patch.data(), &img.pixels[..]);
    }

    #[test]
    fn extract_matches_bruteforce_bilinear() {
        let img = test_image(13, 11);
        let spec = PatchSpec::new(8, 0.63, (-0.21, 0.17)).unwrap();
        let coords = spec.coords();
        let patch = extract_patch(&img, &coords, 8);
        let (h, w) = img.res;
        for (i, &(u, v)) in coords.iter().enumerate() {
            // independent scalar oracle
            let fx = (u + 1.0) / 2.0 * (w - 1) as f64;
            let fy = (v + 1.0) / 2.0 * (h - 1) as f64;
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let val = img.pixels[y0 * w + x0] * (1.0 - tx) * (1.0 - ty)
                + img.pixels[y0 * w + x1] * tx * (1.0 - ty)
                + img.pixels[y1 * w + x0] * (1.0 - tx) * ty
                + img.pixels[y1 * w + x1] * tx * ty;
            assert!((patch.data()[i] - val).abs() < 1e-6);
        }
    }

    #[test]
    fn discriminator_deterministic_and_shaped() {
        let arch = DiscArch::for_patch(16);
        let d = init_discriminator(arch, 9).unwrap();
        let patch = Tensor::new(
            vec![16, 16],
            (0..256).map(|i| (i as f64 / 255.0).sin().abs()).collect(),
        );
        let a = d.discriminate(&patch, 0.5);
        let b = d.discriminate(&patch, 0.5);
        assert_eq!(a.logit, b.logit);
        assert_eq!(a.features, b.features);
        let (fw, fh, fd) = arch.feature_shape();
        assert_eq!((fw, fh, fd), (4, 4, 32));
        assert_eq!(a.features.shape(), &[fd, fh, fw]);
        // scale conditioning changes the logit
        let c = d.discriminate(&patch, 0.9);
        assert_ne!(a.logit, c.logit);
    }

    #[test]
    fn logit_gradient_wrt_patch_matches_fd() {
        let arch = DiscArch::for_patch(8);
        let d = init_discriminator(arch, 4).unwrap();
        let patch0 = Tensor::new(
            vec![8, 8],
            (0..64)
                .map(|i| ((i as f64) * 0.19).sin() * 0.5 + 0.5)
                .collect(),
        );

        let mut g = Graph::new();
        let vars = d.mount(&mut g);
        let pv = g.leaf(patch0.clone());
        let out = d.forward_graph(&mut g, &vars, pv, 0.7, None);
        let grads = g.backward(out.logit);
        let pg = grads.get(pv).unwrap().clone();

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-10);
        for &flat in &[0usize, 13, 37, 63] {
            let mut pp = patch0.clone();
            pp.data_mut()[flat] += h;
            let mut pm = patch0.clone();
            pm.data_mut()[flat] -= h;
            let fd = (d.discriminate(&pp, 0.7).logit - d.discriminate(&pm, 0.7).logit) / (2.0 * h);
            assert!(
                rel(pg.data()[flat], fd) < 1e-4,
                "{} vs {}",
                pg.data()[flat],
                fd
            );
        }
    }

    #[test]
    fn r1_zero_for_zero_discriminator() {
        let arch = DiscArch::for_patch(8);
        let mut d = init_discriminator(arch, 0).unwrap();
        for p in d.params_mut() {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        let patch = Tensor::full(vec![8, 8], 0.3);
        let (penalty, grads) = d.r1(&patch, 0.5, 10.0);
        assert_eq!(penalty, 0.0);
        for gt in &grads {
            assert!(gt.data().iter().all(|&x| x == 0.0));
        }
    }

    /// The replayed parameter gradient must match central differences of
    /// the penalty itself.
    #[test]
    fn r1_parameter_gradients_match_fd() {
        let arch = DiscArch::for_patch(8);
        let d = init_discriminator(arch, 31).unwrap();
        let patch = Tensor::new(
            vec![8, 8],
            (0..64).map(|i| ((i * 29) % 64) as f64 / 63.0).collect(),
        );
        let gamma = 3.0;
        let (_, grads) = d.r1(&patch, 0.6, gamma);

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        // probe a few parameters across the stack
        let probes: [(usize, usize); 4] = [(0, 3), (2, 10), (4, 50), (6, 7)];
        for &(pi, flat) in &probes {
            let mut dp = d.clone();
            dp.params_mut()[pi].data_mut()[flat] += h;
            let mut dm = d.clone();
            dm.params_mut()[pi].data_mut()[flat] -= h;
            let (pp, _) = dp.r1(&patch, 0.6, gamma);
            let (pm, _) = dm.r1(&patch, 0.6, gamma);
            let fd = (pp - pm) / (2.0 * h);
            let got = grads[pi].data()[flat];
            assert!(rel(got, fd) < 1e-4, "param {pi}[{flat}]: {got} vs fd {fd}");
        }
    }
}
