//! Property tests for invariants that hold over whole input ranges rather
//! than single examples.

use proptest::prelude::*;

use radfield::drr::{Pose, RadiographImage};
use radfield::field::{FieldArch, LatentPair, encode, init_field};
use radfield::graph::Graph;
use radfield::objective::{mse_loss, mse_loss_graph};
use radfield::render::{Ray, RenderConfig, render_rays_with};
use radfield::tensor::Tensor;
use radfield::trainloop::normalize_output;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Encoding entries stay in [-1, 1] and the dimension is exactly
    /// 2 * L * dim(x).
    #[test]
    fn encode_bounded_with_exact_dim(
        xs in prop::collection::vec(-10.0f64..10.0, 1..6),
        l in 0usize..9,
    ) {
        let e = encode(&xs, l);
        prop_assert_eq!(e.len(), 2 * l * xs.len());
        for v in e {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    /// MSE computed on the autodiff graph equals the scalar loop.
    #[test]
    fn mse_graph_equals_loop(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..64),
    ) {
        let pred = Tensor::from_slice(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let target = Tensor::from_slice(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let direct = mse_loss(&pred, &target);
        let mut g = Graph::new();
        let pv = g.leaf(pred);
        let tv = g.constant(target);
        let lv = mse_loss_graph(&mut g, pv, tv);
        prop_assert!((g.value(lv).item() - direct).abs() < 1e-12);
    }

    /// Bilinear patch extraction stays within the image value range.
    #[test]
    fn extract_patch_respects_range(
        seed in 0u64..1000,
        cx in -0.5f64..0.5,
        cy in -0.5f64..0.5,
        scale in 0.05f64..0.5,
    ) {
        let img = RadiographImage {
            res: (9, 9),
            pixels: (0..81).map(|i| (((i as u64 + seed) * 2654435761) % 1000) as f64 / 999.0).collect(),
            pose: Pose::new(0.0, 10.0),
        };
        let spec = radfield::adversary::PatchSpec::new(4, scale, (cx, cy)).unwrap();
        let patch = radfield::adversary::extract_patch(&img, &spec.coords(), 4);
        let lo = img.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in patch.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    /// Compositing weights plus final transmittance telescope to one for
    /// arbitrary nonnegative densities.
    #[test]
    fn partition_of_unity_random_densities(
        sig in prop::collection::vec(0.0f64..20.0, 8),
        seed in 0u64..100,
    ) {
        let rays = vec![Ray::new([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.0, 2.0)];
        let cfg = RenderConfig { n_samples: 8, stratified: true, background: 0.3, seed };
        let mut g = Graph::new();
        let out = render_rays_with(&mut g, &rays, &cfg, |g, x, _d| {
            let n = g.value(x).rows();
            let c = g.constant(Tensor::full(vec![n], 0.5));
            let s = g.constant(Tensor::from_slice(&sig));
            (c, s)
        });
        let w = g.value(out.weights);
        let t = g.value(out.transmittance).data()[0];
        let sum: f64 = w.data().iter().sum();
        prop_assert!((sum + t - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&t));
    }

    /// Min-max normalization is order-preserving and spans [0, 255] for
    /// non-constant input.
    #[test]
    fn normalize_output_order_and_span(
        ys in prop::collection::vec(-1e6f64..1e6, 2..64),
    ) {
        let out = normalize_output(&ys);
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            prop_assert!(out.contains(&0));
            prop_assert!(out.contains(&255));
            for (i, &yi) in ys.iter().enumerate() {
                for (j, &yj) in ys.iter().enumerate() {
                    if yi < yj {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        } else {
            prop_assert!(out.iter().all(|&b| b == 0));
        }
    }

    /// Field queries keep their output ranges for random latents.
    #[test]
    fn query_ranges_hold(seed in 0u64..50, zscale in 0.0f64..3.0) {
        let arch = FieldArch { depth: 2, width: 8, color_width: 8, dim_zs: 4, dim_za: 4,
            encoding: radfield::field::EncodingConfig { l_pos: 2, l_dir: 1, include_input: true } };
        let f = init_field(arch, seed).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| ((i as f64) * 0.7).sin()).collect());
        let d = Tensor::new(vec![4, 3], [0.0, 0.0, 1.0].repeat(4));
        let z = LatentPair {
            z_s: Tensor::from_slice(&[zscale, -zscale, 0.5 * zscale, 0.0]),
            z_a: Tensor::from_slice(&[0.0, zscale, -0.3 * zscale, 1.0]),
        };
        let (c, sigma) = f.query(&x, &d, &z);
        for &s in sigma.data() {
            prop_assert!(s >= 0.0 && s.is_finite());
        }
        for &cv in c.data() {
            prop_assert!(cv > 0.0 && cv < 1.0);
        }
    }
}
