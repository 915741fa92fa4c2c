//! Volumetric rendering of rays and patches from the radiance field.
//!
//! Scene coordinates are panel-normalized: positions are mm divided by
//! `pose.fov_extent`, so the imaged region spans [-1,1]^2 on the panel and
//! every parallel ray stays inside `t` in `[-sqrt(3), sqrt(3)]` through a
//! [-1,1]^3 scene cube. Compositing uses the standard quadrature
//! `w_i = T_i (1 - exp(-sigma_i delta_i))`, `T_i = exp(-sum_{j<i} sigma_j
//! delta_j)`, with the last interval `delta = far - t_last` so the weights
//! plus final transmittance telescope to exactly 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use std::sync::Arc;

use crate::drr::{Pose, panel_ray};
use crate::field::{LatentPair, RadianceField};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const SCENE_BOUND: f64 = 1.7320508075688772; // sqrt(3)

/// A single scene ray. `direction` must be unit length; `near < far`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], near: f64, far: f64) -> Self {
        let norm2: f64 = direction.iter().map(|d| d * d).sum();
        assert!(
            (norm2.sqrt() - 1.0).abs() <= 1e-6,
            "ray direction must be unit length"
        );
        assert!(near < far, "ray must have near < far");
        Ray {
            origin,
            direction,
            near,
            far,
        }
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub stratified: bool,
    /// Composited behind the last sample; 0 = air.
    pub background: f64,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_samples: 64,
            stratified: false,
            background: 0.0,
            seed: 0,
        }
    }
}

/// Parallel rays through patch coordinates in [-1,1]^2. Origins lie on the
/// panel plane through the scene center, expressed in panel-normalized
/// units; directions equal the pose's view direction.
pub fn rays_for_patch(pose: &Pose, coords: &[(f64, f64)]) -> Vec<Ray> {
    coords
        .iter()
        .map(|&(u, v)| {
            let (origin_mm, dir) = panel_ray(pose, u, v);
            let origin = [
                origin_mm[0] / pose.fov_extent,
                origin_mm[1] / pose.fov_extent,
                origin_mm[2] / pose.fov_extent,
            ];
            Ray::new(origin, dir, -SCENE_BOUND, SCENE_BOUND)
        })
        .collect()
}

/// Sample positions and interval lengths for a ray batch: `[R, S]` each.
/// Midpoints of equal bins, or jittered uniformly within each bin when
/// `stratified` (draw order: ray-major, then sample).
pub fn sample_ts(rays: &[Ray], cfg: &RenderConfig) -> (Tensor, Tensor) {
    let r = rays.len();
    let s = cfg.n_samples;
    assert!(s >= 1, "n_samples must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ts = vec![0.0f64; r * s];
    for (ri, ray) in rays.iter().enumerate() {
        let h = (ray.far - ray.near) / s as f64;
        for si in 0..s {
            let jitter = if cfg.stratified {
                rng.random_range(0.0..1.0)
            } else {
                0.5
            };
            ts[ri * s + si] = ray.near + (si as f64 + jitter) * h;
        }
    }
    let mut deltas = vec![0.0f64; r * s];
    for (ri, ray) in rays.iter().enumerate() {
        for si in 0..s {
            deltas[ri * s + si] = if si + 1 < s {
                ts[ri * s + si + 1] - ts[ri * s + si]
            } else {
                ray.far - ts[ri * s + si]
            };
        }
    }
    (Tensor::new(vec![r, s], ts), Tensor::new(vec![r, s], deltas))
}

/// Result handles of a rendered ray batch.
pub struct RenderedRays {
    /// `[R]` composited pixel values.
    pub pixels: Var,
    /// `[R]` transmittance behind the last sample.
    pub transmittance: Var,
    /// `[R, S]` compositing weights (diagnostics and tests).
    pub weights: Var,
}

/// Render a ray batch with an arbitrary query closure mapping position and
/// direction batches (`[R*S, 3]`) to per-sample `(c, sigma)` (`[R*S]`).
/// This is the seam the analytic-scene oracles drive directly.
pub fn render_rays_with<F>(
    g: &mut Graph,
    rays: &[Ray],
    cfg: &RenderConfig,
    query: F,
) -> RenderedRays
where
    F: FnOnce(&mut Graph, Var, Var) -> (Var, Var),
{
    let r = rays.len();
    let s = cfg.n_samples;
    let (ts, deltas) = sample_ts(rays, cfg);

    let mut pos = Vec::with_capacity(r * s * 3);
    let mut dirs = Vec::with_capacity(r * s * 3);
    for (ri, ray) in rays.iter().enumerate() {
        for si in 0..s {
            let p = ray.at(ts.data()[ri * s + si]);
            pos.extend_from_slice(&p);
            dirs.extend_from_slice(&ray.direction);
        }
    }
    let x = g.constant(Tensor::new(vec![r * s, 3], pos));
    let d = g.constant(Tensor::new(vec![r * s, 3], dirs));

    let (c, sigma) = query(g, x, d);
    let c = g.reshape(c, vec![r, s]);
    let sigma = g.reshape(sigma, vec![r, s]);

    let sd = g.mul_const(sigma, Arc::new(deltas));
    let s_incl = g.cumsum_axis1(sd);
    let s_excl = g.sub(s_incl, sd);
    let neg_excl = g.neg(s_excl);
    let t_enter = g.exp(neg_excl); // T_i
    let neg_incl = g.neg(s_incl);
    let t_leave = g.exp(neg_incl); // T_{i+1}
    let weights = g.sub(t_enter, t_leave);

    let wc = g.mul(weights, c);
    let fg = g.sum_axis1(wc);

    // transmittance behind the last sample
    let last_idx: Vec<i64> = (0..r).map(|ri| (ri * s + s - 1) as i64).collect();
    let t_final = g.gather(t_leave, Arc::new(last_idx), vec![r]);
    let bg = g.scale(t_final, cfg.background);
    let pixels = g.add(fg, bg);

    RenderedRays {
        pixels,
        transmittance: t_final,
        weights,
    }
}

/// Render a ray batch from a mounted radiance field.
pub fn render_rays_graph(
    g: &mut Graph,
    field: &RadianceField,
    vars: &crate::field::FieldVars,
    z: &crate::field::LatentVars,
    rays: &[Ray],
    cfg: &RenderConfig,
) -> RenderedRays {
    render_rays_with(g, rays, cfg, |g, x, d| field.query_graph(g, vars, z, x, d))
}

/// Value-level rendering: `(pixels, transmittance)`, both `[R]`.
pub fn render_rays(
    field: &RadianceField,
    z: &LatentPair,
    rays: &[Ray],
    cfg: &RenderConfig,
) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let vars = field.mount(&mut g);
    let zv = field.mount_latents(&mut g, z);
    let out = render_rays_graph(&mut g, field, &vars, &zv, rays, cfg);
    (
        g.value(out.pixels).clone(),
        g.value(out.transmittance).clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::lattice_coord;
    use crate::field::{EncodingConfig, FieldArch, init_field};

    fn unit_x_rays(n: usize, near: f64, far: f64) -> Vec<Ray> {
        (0..n)
            .map(|i| {
                Ray::new(
                    [0.0, -0.3 + 0.1 * i as f64, 0.2],
                    [1.0, 0.0, 0.0],
                    near,
                    far,
                )
            })
            .collect()
    }

    #[test]
    fn zero_density_gives_background() {
        let rays = unit_x_rays(3, 0.0, 2.0);
        let cfg = RenderConfig {
            n_samples: 16,
            background: 0.37,
            ..RenderConfig::default()
        };
        let mut g = Graph::new();
        let out = render_rays_with(&mut g, &rays, &cfg, |g, x, _d| {
            let n = g.value(x).rows();
            let c = g.constant(Tensor::full(vec![n], 0.9));
            let sigma = g.constant(Tensor::zeros(vec![n]));
            (c, sigma)
        });
        for &p in g.value(out.pixels).data() {
            assert!((p - 0.37).abs() < 1e-15);
        }
        for &t in g.value(out.transmittance).data() {
            assert_eq!(t, 1.0);
        }
    }

    #[test]
    fn opaque_first_sample_returns_its_color() {
        let rays = unit_x_rays(2, 0.0, 1.0);
        let cfg = RenderConfig {
            n_samples: 4,
            ..RenderConfig::default()
        };
        let mut g = Graph::new();
        let out = render_rays_with(&mut g, &rays, &cfg, |g, x, _d| {
            let n = g.value(x).rows();
            let c = g.constant(Tensor::full(vec![n], 0.7));
            // sigma*delta = 1000 * 0.25 = 250 >= 40 on the first sample
            let mut s = vec![0.0; n];
            for r in 0..n / 4 {
                s[r * 4] = 1000.0;
            }
            let sigma = g.constant(Tensor::new(vec![n], s));
            (c, sigma)
        });
        for &p in g.value(out.pixels).data() {
            assert!((p - 0.7).abs() < 1e-12);
        }
        for &t in g.value(out.transmittance).data() {
            assert!(t < 1e-100);
        }
    }

    /// sigma = 0.5 on [1, 2] along the ray, c = 1, background 0:
    /// pixel -> 1 - exp(-0.5) as n_samples grows.
    fn slab_pixel(n_samples: usize, stratified: bool, seed: u64) -> f64 {
        let rays = vec![Ray::new([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.0, 3.0)];
        let cfg = RenderConfig {
            n_samples,
            stratified,
            background: 0.0,
            seed,
        };
        let mut g = Graph::new();
        let out = render_rays_with(&mut g, &rays, &cfg, |g, x, _d| {
            let xs = g.value(x).clone();
            let n = xs.rows();
            let sigma: Vec<f64> = (0..n)
                .map(|i| {
                    let px = xs.data()[i * 3];
                    if (1.0..2.0).contains(&px) { 0.5 } else { 0.0 }
                })
                .collect();
            let c = g.constant(Tensor::full(vec![n], 1.0));
            let sv = g.constant(Tensor::new(vec![n], sigma));
            (c, sv)
        });
        g.value(out.pixels).data()[0]
    }

    #[test]
    fn piecewise_constant_slab_converges() {
        let analytic = 1.0 - (-0.5f64).exp();
        let err = (slab_pixel(1024, false, 0) - analytic).abs();
        assert!(err < 2e-3, "error at 1024 samples: {err}");
    }

    #[test]
    fn stratified_error_halves_per_doubling() {
        let analytic = 1.0 - (-0.5f64).exp();
        let seeds = 200;
        let mean_abs = |n: usize| -> f64 {
            (0..seeds)
                .map(|s| (slab_pixel(n, true, s as u64) - analytic).abs())
                .sum::<f64>()
                / seeds as f64
        };
        let e64 = mean_abs(64);
        let e128 = mean_abs(128);
        let e256 = mean_abs(256);
        for (a, b) in [(e64, e128), (e128, e256)] {
            let ratio = b / a;
            assert!(
                (0.4..=0.6).contains(&ratio),
                "ratio {ratio} outside halving band ({a} -> {b})"
            );
        }
    }

    #[test]
    fn partition_of_unity_and_monotone_transmittance() {
        let arch = FieldArch::desk();
        let field = init_field(arch, 3).unwrap();
        let z = LatentPair::zeros(arch.dim_zs, arch.dim_za);
        let rays = unit_x_rays(4, -1.5, 1.5);
        let cfg = RenderConfig {
            n_samples: 32,
            stratified: true,
            background: 0.0,
            seed: 9,
        };
        let mut g = Graph::new();
        let vars = field.mount(&mut g);
        let zv = field.mount_latents(&mut g, &z);
        let out = render_rays_graph(&mut g, &field, &vars, &zv, &rays, &cfg);
        let w = g.value(out.weights);
        let tf = g.value(out.transmittance);
        for r in 0..4 {
            let sum: f64 = (0..32).map(|s| w.data()[r * 32 + s]).sum();
            assert!(
                (sum + tf.data()[r] - 1.0).abs() < 1e-12,
                "partition of unity violated"
            );
        }
        // T_i non-increasing: check reconstructed from weights
        for r in 0..4 {
            let mut t = 1.0;
            for s in 0..32 {
                let next = t - w.data()[r * 32 + s];
                assert!(next <= t + 1e-15);
                t = next;
            }
        }
    }

    #[test]
    fn full_image_patch_rays_match_projector_geometry() {
        let pose = Pose::new(40.0, 55.0);
        let h = 9;
        let mut coords = Vec::new();
        for i in 0..h {
            for j in 0..h {
                coords.push((lattice_coord(j, h), lattice_coord(i, h)));
            }
        }
        let rays = rays_for_patch(&pose, &coords);
        for (k, &(u, v)) in coords.iter().enumerate() {
            let (origin_mm, dir) = panel_ray(&pose, u, v);
            for ax in 0..3 {
                assert_eq!(rays[k].origin[ax], origin_mm[ax] / pose.fov_extent);
                assert_eq!(rays[k].direction[ax], dir[ax]);
            }
        }
    }

    #[test]
    fn center_coord_ray_passes_through_origin() {
        let pose = Pose::new(77.0, 30.0);
        let rays = rays_for_patch(&pose, &[(0.0, 0.0)]);
        assert_eq!(rays.len(), 1);
        for ax in 0..3 {
            assert!(rays[0].origin[ax].abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_poses_negate_directions() {
        let a = rays_for_patch(&Pose::new(0.0, 10.0), &[(0.3, -0.2)]);
        let b = rays_for_patch(&Pose::new(180.0, 10.0), &[(0.3, -0.2)]);
        for ax in 0..3 {
            assert!((a[0].direction[ax] + b[0].direction[ax]).abs() < 1e-12);
        }
    }

    #[test]
    fn render_gradients_match_finite_differences() {
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
        let field = init_field(arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = LatentPair::standard_normal(4, 4, &mut rng);
        let rays = unit_x_rays(3, -1.0, 1.0);
        let cfg = RenderConfig {
            n_samples: 6,
            stratified: false,
            background: 0.2,
            seed: 0,
        };

        let eval = |f: &RadianceField, z: &LatentPair| -> f64 {
            let (px, _) = render_rays(f, z, &rays, &cfg);
            px.sum()
        };

        let mut g = Graph::new();
        let vars = field.mount(&mut g);
        let zv = field.mount_latents(&mut g, &z);
        let out = render_rays_graph(&mut g, &field, &vars, &zv, &rays, &cfg);
        let loss = g.sum_all(out.pixels);
        let grads = g.backward(loss);

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-10);

        let wg = grads.get(vars.trunk[0].0).unwrap().clone();
        for &flat in &[0usize, 11, 33] {
            let mut fp = field.clone();
            fp.trunk[0].0.data_mut()[flat] += h;
            let mut fm = field.clone();
            fm.trunk[0].0.data_mut()[flat] -= h;
            let fd = (eval(&fp, &z) - eval(&fm, &z)) / (2.0 * h);
            assert!(
                rel(wg.data()[flat], fd) < 1e-4,
                "param {}: {} vs {}",
                flat,
                wg.data()[flat],
                fd
            );
        }

        let zg = grads.get(zv.z_s).unwrap().clone();
        for i in 0..4 {
            let mut zp = z.clone();
            zp.z_s.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.z_s.data_mut()[i] -= h;
            let fd = (eval(&field, &zp) - eval(&field, &zm)) / (2.0 * h);
            assert!(rel(zg.data()[i], fd) < 1e-4, "z_s[{i}]");
        }
    }

    #[test]
    #[should_panic(expected = "unit length")]
    fn non_unit_direction_rejected() {
        Ray::new([0.0; 3], [1.0, 1.0, 0.0], 0.0, 1.0);
    }
}
