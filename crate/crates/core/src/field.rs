//! The conditional radiance field generator.
//!
//! Positions and directions pass through a sinusoidal frequency encoding,
//! then an MLP conditioned on a shape latent (density trunk) and an
//! appearance latent (color head) produces volume density and a grayscale
//! pixel value per query point. All forward paths run on the autodiff
//! graph so gradients w.r.t. parameters, inputs and latents are exact.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Frequency counts for the sinusoidal encoding.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncodingConfig {
    pub l_pos: usize,
    pub l_dir: usize,
    /// Pass the raw coordinates through alongside the encoding.
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            l_pos: 6,
            l_dir: 2,
            include_input: true,
        }
    }
}

/// Shape and appearance latent vectors conditioning the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub z_s: Tensor,
    pub z_a: Tensor,
}

impl LatentPair {
    pub fn zeros(dim_s: usize, dim_a: usize) -> Self {
        LatentPair {
            z_s: Tensor::zeros(vec![dim_s]),
            z_a: Tensor::zeros(vec![dim_a]),
        }
    }

    pub fn standard_normal(dim_s: usize, dim_a: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        LatentPair {
            z_s: Tensor::new(
                vec![dim_s],
                (0..dim_s).map(|_| normal.sample(rng)).collect(),
            ),
            z_a: Tensor::new(
                vec![dim_a],
                (0..dim_a).map(|_| normal.sample(rng)).collect(),
            ),
        }
    }
}

/// Architecture of the generator MLP.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldArch {
    /// Hidden layers in the density trunk.
    pub depth: usize,
    pub width: usize,
    /// Hidden width of the color head.
    pub color_width: usize,
    pub dim_zs: usize,
    pub dim_za: usize,
    pub encoding: EncodingConfig,
}

impl Default for FieldArch {
    fn default() -> Self {
        FieldArch {
            depth: 8,
            width: 128,
            color_width: 64,
            dim_zs: 32,
            dim_za: 32,
            encoding: EncodingConfig::default(),
        }
    }
}

impl FieldArch {
    /// A small architecture for CPU-bound desk runs.
    pub fn desk() -> Self {
        FieldArch {
            depth: 3,
            width: 48,
            color_width: 24,
            dim_zs: 8,
            dim_za: 8,
            encoding: EncodingConfig::default(),
        }
    }

    pub fn enc_dim_pos(&self) -> usize {
        let raw = if self.encoding.include_input { 3 } else { 0 };
        raw + 6 * self.encoding.l_pos
    }

    pub fn enc_dim_dir(&self) -> usize {
        let raw = if self.encoding.include_input { 3 } else { 0 };
        raw + 6 * self.encoding.l_dir
    }

    fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 || self.color_width < 1 {
            return Err(Error::invalid("field depth and widths must be >= 1"));
        }
        Ok(())
    }
}

/// Fourier-feature encoding of a vector, component-major:
/// `[sin(2^0 pi x_c), cos(2^0 pi x_c), ..., sin(2^{L-1} pi x_c), cos(...)]`
/// for each component `c` in turn. Output length `2 * L * x.len()`;
/// every entry lies in [-1, 1]. `L = 0` returns an empty vector.
pub fn encode(x: &[f64], l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * l * x.len());
    for &xc in x {
        for li in 0..l {
            let arg = (1u64 << li) as f64 * std::f64::consts::PI * xc;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Graph-level encoding of a `[N, D]` batch, same component-major column
/// order as [`encode`], optionally prefixed by the raw coordinates.
pub fn encode_graph(g: &mut Graph, x: Var, l: usize, include_input: bool) -> Var {
    let (n, d) = (g.value(x).rows(), g.value(x).cols());
    let mut blocks: Vec<Var> = Vec::new();
    if include_input {
        blocks.push(x);
    }
    if l > 0 {
        // frequency blocks first, then one gather permutes columns into
        // component-major order so the layout matches `encode`
        let mut freq_blocks = Vec::with_capacity(2 * l);
        for li in 0..l {
            let scaled = g.scale(x, (1u64 << li) as f64 * std::f64::consts::PI);
            freq_blocks.push(g.sin(scaled));
            freq_blocks.push(g.cos(scaled));
        }
        let stacked = g.concat_cols(&freq_blocks); // [N, 2*l*d] frequency-major
        let total = 2 * l * d;
        let mut idx = Vec::with_capacity(n * total);
        for row in 0..n {
            for c in 0..d {
                for li in 0..l {
                    // sin block 2*li, cos block 2*li+1; component c within each
                    idx.push((row * total + (2 * li) * d + c) as i64);
                    idx.push((row * total + (2 * li + 1) * d + c) as i64);
                }
            }
        }
        blocks.push(g.gather(stacked, Arc::new(idx), vec![n, total]));
    }
    match blocks.len() {
        0 => g.constant(Tensor::zeros(vec![n, 0])),
        1 => blocks[0],
        _ => g.concat_cols(&blocks),
    }
}

/// Parameters of the conditional generator. The shape latent conditions
/// the density trunk input; the appearance latent conditions the color
/// head input.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub arch: FieldArch,
    /// Trunk layers, each `(w [in, out], b [out])`.
    pub trunk: Vec<(Tensor, Tensor)>,
    pub sigma_head: (Tensor, Tensor),
    pub color_hidden: (Tensor, Tensor),
    pub color_out: (Tensor, Tensor),
}

/// Graph handles for one mounted copy of the field parameters.
pub struct FieldVars {
    pub trunk: Vec<(Var, Var)>,
    pub sigma_head: (Var, Var),
    pub color_hidden: (Var, Var),
    pub color_out: (Var, Var),
}

impl FieldVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.trunk {
            out.push(*w);
            out.push(*b);
        }
        for (w, b) in [&self.sigma_head, &self.color_hidden, &self.color_out] {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

/// Latent handles mounted on a graph.
pub struct LatentVars {
    pub z_s: Var,
    pub z_a: Var,
}

fn he_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / rows as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
}

/// Deterministic initialization of a field for a fixed seed.
pub fn init_field(arch: FieldArch, seed: u64) -> Result<RadianceField> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk_in = arch.enc_dim_pos() + arch.dim_zs;
    let mut trunk = Vec::with_capacity(arch.depth);
    let mut prev = trunk_in;
    for _ in 0..arch.depth {
        trunk.push((
            he_init(&mut rng, prev, arch.width),
            Tensor::zeros(vec![arch.width]),
        ));
        prev = arch.width;
    }
    let sigma_head = (he_init(&mut rng, arch.width, 1), Tensor::zeros(vec![1]));
    let color_in = arch.width + arch.enc_dim_dir() + arch.dim_za;
    let color_hidden = (
        he_init(&mut rng, color_in, arch.color_width),
        Tensor::zeros(vec![arch.color_width]),
    );
    let color_out = (
        he_init(&mut rng, arch.color_width, 1),
        Tensor::zeros(vec![1]),
    );
    Ok(RadianceField {
        arch,
        trunk,
        sigma_head,
        color_hidden,
        color_out,
    })
}

impl RadianceField {
    /// All-zero parameters; useful as a fixed point of the activations
    /// (softplus(0) = ln 2, sigmoid(0) = 1/2).
    pub fn zeros(arch: FieldArch) -> Result<Self> {
        arch.validate()?;
        let trunk_in = arch.enc_dim_pos() + arch.dim_zs;
        let mut trunk = Vec::new();
        let mut prev = trunk_in;
        for _ in 0..arch.depth {
            trunk.push((
                Tensor::zeros(vec![prev, arch.width]),
                Tensor::zeros(vec![arch.width]),
            ));
            prev = arch.width;
        }
        let color_in = arch.width + arch.enc_dim_dir() + arch.dim_za;
        Ok(RadianceField {
            arch,
            trunk,
            sigma_head: (Tensor::zeros(vec![arch.width, 1]), Tensor::zeros(vec![1])),
            color_hidden: (
                Tensor::zeros(vec![color_in, arch.color_width]),
                Tensor::zeros(vec![arch.color_width]),
            ),
            color_out: (
                Tensor::zeros(vec![arch.color_width, 1]),
                Tensor::zeros(vec![1]),
            ),
        })
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.trunk.iter().enumerate() {
            out.push((format!("field.trunk{i}.w"), w));
            out.push((format!("field.trunk{i}.b"), b));
        }
        out.push(("field.sigma.w".to_string(), &self.sigma_head.0));
        out.push(("field.sigma.b".to_string(), &self.sigma_head.1));
        out.push(("field.color_h.w".to_string(), &self.color_hidden.0));
        out.push(("field.color_h.b".to_string(), &self.color_hidden.1));
        out.push(("field.color_o.w".to_string(), &self.color_out.0));
        out.push(("field.color_o.b".to_string(), &self.color_out.1));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, b) in &mut self.trunk {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.sigma_head.0);
        out.push(&mut self.sigma_head.1);
        out.push(&mut self.color_hidden.0);
        out.push(&mut self.color_hidden.1);
        out.push(&mut self.color_out.0);
        out.push(&mut self.color_out.1);
        out
    }

    /// Copy the parameters into a graph as differentiable leaves.
    pub fn mount(&self, g: &mut Graph) -> FieldVars {
        FieldVars {
            trunk: self
                .trunk
                .iter()
                .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
                .collect(),
            sigma_head: (
                g.leaf(self.sigma_head.0.clone()),
                g.leaf(self.sigma_head.1.clone()),
            ),
            color_hidden: (
                g.leaf(self.color_hidden.0.clone()),
                g.leaf(self.color_hidden.1.clone()),
            ),
            color_out: (
                g.leaf(self.color_out.0.clone()),
                g.leaf(self.color_out.1.clone()),
            ),
        }
    }

    pub fn mount_latents(&self, g: &mut Graph, z: &LatentPair) -> LatentVars {
        LatentVars {
            z_s: g.leaf(z.z_s.clone()),
            z_a: g.leaf(z.z_a.clone()),
        }
    }

    /// Query the mounted field at a batch of positions and directions.
    /// Returns `(c, sigma)`, both `[N]`: `sigma = softplus(raw) >= 0`,
    /// `c = sigmoid(raw)` in (0, 1), single-channel.
    pub fn query_graph(
        &self,
        g: &mut Graph,
        vars: &FieldVars,
        z: &LatentVars,
        x: Var,
        d: Var,
    ) -> (Var, Var) {
        let n = g.value(x).rows();
        assert_eq!(g.value(d).rows(), n, "position/direction batch mismatch");
        assert_eq!(g.value(z.z_s).len(), self.arch.dim_zs, "z_s dim mismatch");
        assert_eq!(g.value(z.z_a).len(), self.arch.dim_za, "z_a dim mismatch");

        let enc_x = encode_graph(
            g,
            x,
            self.arch.encoding.l_pos,
            self.arch.encoding.include_input,
        );
        let zs_rows = g.broadcast_row(z.z_s, n);
        let mut h = g.concat_cols(&[enc_x, zs_rows]);
        for (w, b) in &vars.trunk {
            let lin = g.matmul(h, *w);
            let lin = g.add_bias_row(lin, *b);
            h = g.relu(lin);
        }

        let sig_lin = g.matmul(h, vars.sigma_head.0);
        let sig_lin = g.add_bias_row(sig_lin, vars.sigma_head.1);
        let sig = g.softplus(sig_lin);
        let sigma = g.reshape(sig, vec![n]);

        let enc_d = encode_graph(
            g,
            d,
            self.arch.encoding.l_dir,
            self.arch.encoding.include_input,
        );
        let za_rows = g.broadcast_row(z.z_a, n);
        let color_in = g.concat_cols(&[h, enc_d, za_rows]);
        let ch = g.matmul(color_in, vars.color_hidden.0);
        let ch = g.add_bias_row(ch, vars.color_hidden.1);
        let ch = g.relu(ch);
        let co = g.matmul(ch, vars.color_out.0);
        let co = g.add_bias_row(co, vars.color_out.1);
        let c = g.sigmoid(co);
        let c = g.reshape(c, vec![n]);
        (c, sigma)
    }

    /// Value-level query on a scratch graph.
    pub fn query(&self, x: &Tensor, d: &Tensor, z: &LatentPair) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let vars = self.mount(&mut g);
        let zv = self.mount_latents(&mut g, z);
        let xv = g.leaf(x.clone());
        let dv = g.leaf(d.clone());
        let (c, sigma) = self.query_graph(&mut g, &vars, &zv, xv, dv);
        (g.value(c).clone(), g.value(sigma).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_zero_vector() {
        let e = encode(&[0.0, 0.0, 0.0], 2);
        assert_eq!(e.len(), 12);
        for c in 0..3 {
            assert_eq!(&e[c * 4..c * 4 + 4], &[0.0, 1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn encode_half() {
        let e = encode(&[0.5], 2);
        // (sin pi/2, cos pi/2, sin pi, cos pi)
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
        assert!(e[2].abs() < 1e-12);
        assert!((e[3] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn encode_bounded_and_sized() {
        let x = [0.123, -0.77, 3.4];
        let e = encode(&x, 8);
        assert_eq!(e.len(), 16 * 3);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(encode(&x, 0).is_empty());
    }

    #[test]
    fn graph_encode_matches_value_encode() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(
            vec![2, 3],
            vec![0.1, -0.4, 0.9, 0.0, 0.5, -1.2],
        ));
        let e = encode_graph(&mut g, x, 3, false);
        assert_eq!(g.value(e).shape(), &[2, 18]);
        let row0 = encode(&[0.1, -0.4, 0.9], 3);
        let row1 = encode(&[0.0, 0.5, -1.2], 3);
        assert_eq!(&g.value(e).data()[..18], &row0[..]);
        assert_eq!(&g.value(e).data()[18..], &row1[..]);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = FieldArch::desk();
        let a = init_field(arch, 42).unwrap();
        let b = init_field(arch, 42).unwrap();
        let c = init_field(arch, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let arch = FieldArch {
            depth: 8,
            width: 128,
            color_width: 64,
            dim_zs: 32,
            dim_za: 32,
            encoding: EncodingConfig::default(),
        };
        let f = init_field(arch, 0).unwrap();
        // closed form computed from the declared topology
        let enc_x = 3 + 6 * arch.encoding.l_pos;
        let enc_d = 3 + 6 * arch.encoding.l_dir;
        let trunk_in = enc_x + arch.dim_zs;
        let mut expect = trunk_in * arch.width + arch.width;
        expect += (arch.depth - 1) * (arch.width * arch.width + arch.width);
        expect += arch.width + 1; // sigma head
        expect += (arch.width + enc_d + arch.dim_za) * arch.color_width + arch.color_width;
        expect += arch.color_width + 1; // color out
        assert_eq!(f.param_count(), expect);
    }

    #[test]
    fn zero_field_outputs_ln2_and_half() {
        let f = RadianceField::zeros(FieldArch::desk()).unwrap();
        let x = Tensor::new(vec![4, 3], vec![0.3; 12]);
        let d = Tensor::new(
            vec![4, 3],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        );
        let z = LatentPair::zeros(8, 8);
        let (c, sigma) = f.query(&x, &d, &z);
        for &s in sigma.data() {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
        }
        for &cc in c.data() {
            assert!((cc - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn query_shapes_and_ranges() {
        let arch = FieldArch::desk();
        let f = init_field(arch, 7).unwrap();
        let n = 17;
        let x = Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let d = Tensor::new(vec![n, 3], [0.0, 1.0, 0.0].repeat(n));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = LatentPair::standard_normal(arch.dim_zs, arch.dim_za, &mut rng);
        let (c, sigma) = f.query(&x, &d, &z);
        assert_eq!(c.shape(), &[n]);
        assert_eq!(sigma.shape(), &[n]);
        assert!(sigma.data().iter().all(|&s| s >= 0.0));
        assert!(c.data().iter().all(|&v| (0.0..1.0).contains(&v) && v > 0.0));
    }

    /// Central finite differences vs autodiff for a tiny field (width 8,
    /// depth 2), w.r.t. a weight, the latents and a position.
    #[test]
    fn gradients_match_finite_differences() {
        let arch = FieldArch {
            depth: 2,
            width: 8,
            color_width: 8,
            dim_zs: 4,
            dim_za: 4,
            encoding: EncodingConfig {
                l_pos: 2,
                l_dir: 1,
                include_input: true,
            },
        };
        let field = init_field(arch, 11).unwrap();
        let n = 5;
        let x0 = Tensor::new(
            vec![n, 3],
            (0..n * 3)
                .map(|i| ((i as f64) * 0.61).sin() * 0.8)
                .collect(),
        );
        let d0 = Tensor::new(vec![n, 3], [1.0, 0.0, 0.0].repeat(n));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = LatentPair::standard_normal(4, 4, &mut rng);

        // loss = mean sigma + mean c so both heads contribute
        let eval = |field: &RadianceField, x: &Tensor, z: &LatentPair| -> f64 {
            let (c, sigma) = field.query(x, &d0, z);
            sigma.mean() + c.mean()
        };

        let mut g = Graph::new();
        let vars = field.mount(&mut g);
        let zv = field.mount_latents(&mut g, &z0);
        let xv = g.leaf(x0.clone());
        let dv = g.leaf(d0.clone());
        let (c, sigma) = field.query_graph(&mut g, &vars, &zv, xv, dv);
        let ms = g.mean_all(sigma);
        let mc = g.mean_all(c);
        let loss = g.add(ms, mc);
        let grads = g.backward(loss);

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-10);

        // a sampled trunk weight
        let w_grad = grads.get(vars.trunk[1].0).unwrap().clone();
        for &flat in &[0usize, 17, 40] {
            let mut fp = field.clone();
            fp.trunk[1].0.data_mut()[flat] += h;
            let mut fm = field.clone();
            fm.trunk[1].0.data_mut()[flat] -= h;
            let fd = (eval(&fp, &x0, &z0) - eval(&fm, &x0, &z0)) / (2.0 * h);
            assert!(
                rel(w_grad.data()[flat], fd) < 1e-4,
                "weight grad {} vs fd {}",
                w_grad.data()[flat],
                fd
            );
        }

        // latents
        let zs_grad = grads.get(zv.z_s).unwrap().clone();
        let za_grad = grads.get(zv.z_a).unwrap().clone();
        for i in 0..4 {
            let mut zp = z0.clone();
            zp.z_s.data_mut()[i] += h;
            let mut zm = z0.clone();
            zm.z_s.data_mut()[i] -= h;
            let fd = (eval(&field, &x0, &zp) - eval(&field, &x0, &zm)) / (2.0 * h);
            assert!(rel(zs_grad.data()[i], fd) < 1e-4, "z_s[{i}]");

            let mut zp = z0.clone();
            zp.z_a.data_mut()[i] += h;
            let mut zm = z0.clone();
            zm.z_a.data_mut()[i] -= h;
            let fd = (eval(&field, &x0, &zp) - eval(&field, &x0, &zm)) / (2.0 * h);
            assert!(rel(za_grad.data()[i], fd) < 1e-4, "z_a[{i}]");
        }

        // positions
        let x_grad = grads.get(xv).unwrap().clone();
        for &flat in &[0usize, 7, 14] {
            let mut xp = x0.clone();
            xp.data_mut()[flat] += h;
            let mut xm = x0.clone();
            xm.data_mut()[flat] -= h;
            let fd = (eval(&field, &xp, &z0) - eval(&field, &xm, &z0)) / (2.0 * h);
            assert!(rel(x_grad.data()[flat], fd) < 1e-4, "x[{flat}]");
        }
    }
}
