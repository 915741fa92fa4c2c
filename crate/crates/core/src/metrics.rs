//! Image-quality metrics: PSNR, SSIM, FID and KID, plus stack-level
//! evaluation pairing rendered views against reference views by angle.
//!
//! FID/KID operate on embeddings from the pluggable feature extractor, so
//! scores are comparable between runs of this pipeline that share an
//! extractor configuration, but not against scores computed with other
//! embedding networks. Reports state this in their header note.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::drr::load_dataset;
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::objective::FeatureExtractor;
use crate::tensor::Tensor;

/// PSNR cap for identical images, in dB.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(max_val^2 / MSE)`, capped at 100 dB when MSE = 0.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr on mismatched lengths");
    assert!(!a.is_empty());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimOpts {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
}

impl Default for SsimOpts {
    fn default() -> Self {
        SsimOpts {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_val: 255.0,
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

/// Mean local SSIM over all valid Gaussian-window positions. If the window
/// exceeds the image, it shrinks to the largest odd side that fits.
/// Symmetric in (a, b) bit-for-bit.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, opts: &SsimOpts) -> f64 {
    assert_eq!(a.len(), h * w, "image a dims mismatch");
    assert_eq!(b.len(), h * w, "image b dims mismatch");
    let mut win = opts.window.min(h).min(w);
    if win.is_multiple_of(2) {
        win -= 1;
    }
    assert!(win >= 1, "image too small for any window");
    let g1 = gaussian_window(win, opts.sigma);
    let c1 = (opts.k1 * opts.max_val) * (opts.k1 * opts.max_val);
    let c2 = (opts.k2 * opts.max_val) * (opts.k2 * opts.max_val);

    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - win) {
        for left in 0..=(w - win) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..win {
                for j in 0..win {
                    let wgt = g1[i] * g1[j];
                    mu_a += wgt * a[(top + i) * w + (left + j)];
                    mu_b += wgt * b[(top + i) * w + (left + j)];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..win {
                for j in 0..win {
                    let wgt = g1[i] * g1[j];
                    let da = a[(top + i) * w + (left + j)] - mu_a;
                    let db = b[(top + i) * w + (left + j)] - mu_b;
                    var_a += wgt * da * da;
                    var_b += wgt * db * db;
                    // (da * db) first: the product commutes bit-exactly,
                    // keeping ssim(a, b) == ssim(b, a) to the last bit
                    cov += (da * db) * wgt;
                }
            }
            let num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// Unbiased, divides by N - 1.
    #[default]
    Sample,
    /// Divides by N.
    Population,
}

fn moments(feats: &Tensor, mode: CovMode) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (feats.rows(), feats.cols());
    let mut mu = vec![0.0; d];
    for row in feats.data().chunks_exact(d) {
        for (m, &x) in mu.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let denom = match mode {
        CovMode::Sample => (n - 1) as f64,
        CovMode::Population => n as f64,
    };
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        for j in 0..d {
            let dj = feats.data()[i * d + j] - mu[j];
            for k in j..d {
                let dk = feats.data()[i * d + k] - mu[k];
                cov[(j, k)] += dj * dk;
            }
        }
    }
    for j in 0..d {
        for k in j..d {
            cov[(j, k)] /= denom;
            cov[(k, j)] = cov[(j, k)];
        }
    }
    (mu, cov)
}

/// Eigenvalues may dip slightly negative from rounding; values above
/// -1e-6 clamp to zero, anything lower is a hard error.
fn clamped_sqrt_eigs(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < -1e-6 {
            return Err(Error::invalid(format!(
                "matrix has a significantly negative eigenvalue {l}"
            )));
        }
        roots.push(l.max(0.0).sqrt());
    }
    Ok((roots, eig.eigenvectors))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (roots, q) = clamped_sqrt_eigs(m)?;
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(roots));
    Ok(&q * d * q.transpose())
}

/// Frechet distance between Gaussian fits of two feature sets
/// (`[N, D]` and `[M, D]`):
/// `|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2})`.
pub fn fid(feats_real: &Tensor, feats_fake: &Tensor, mode: CovMode) -> Result<f64> {
    if feats_real.shape().len() != 2 || feats_fake.shape().len() != 2 {
        return Err(Error::shape("fid expects [N, D] feature matrices"));
    }
    let (n, d) = (feats_real.rows(), feats_real.cols());
    let (m, d2) = (feats_fake.rows(), feats_fake.cols());
    if d != d2 {
        return Err(Error::shape(format!("feature dims differ: {d} vs {d2}")));
    }
    if n < 2 || m < 2 {
        return Err(Error::invalid("fid needs at least 2 samples per set"));
    }
    let (mu_r, cov_r) = moments(feats_real, mode);
    let (mu_f, cov_f) = moments(feats_fake, mode);

    let mean_term: f64 = mu_r.iter().zip(&mu_f).map(|(a, b)| (a - b) * (a - b)).sum();

    // tr((S_r S_f)^(1/2)) via the symmetrized product
    // S_r^(1/2) S_f S_r^(1/2)
    let sr_half = sym_sqrt(&cov_r)?;
    let inner = &sr_half * &cov_f * &sr_half;
    let (roots, _) = clamped_sqrt_eigs(&inner)?;
    let tr_sqrt: f64 = roots.iter().sum();

    Ok(mean_term + cov_r.trace() + cov_f.trace() - 2.0 * tr_sqrt)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let v = dot / d + 1.0;
    v * v * v
}

fn subset_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    // partial Fisher-Yates
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Unbiased MMD^2 with the cubic polynomial kernel
/// `k(x, y) = (x.y / D + 1)^3`, averaged over `n_subsets` seeded subset
/// draws. Returns `(mean, std)` over subsets (sample std).
pub fn kid(
    feats_real: &Tensor,
    feats_fake: &Tensor,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (n, d) = (feats_real.rows(), feats_real.cols());
    let (m, d2) = (feats_fake.rows(), feats_fake.cols());
    if d != d2 {
        return Err(Error::shape(format!("feature dims differ: {d} vs {d2}")));
    }
    if subset_size < 2 {
        return Err(Error::invalid("kid subset_size must be >= 2"));
    }
    if subset_size > n || subset_size > m {
        return Err(Error::invalid("kid subset_size exceeds a feature set"));
    }
    if n_subsets < 1 {
        return Err(Error::invalid("kid needs at least one subset"));
    }

    let row = |t: &Tensor, i: usize| -> Vec<f64> { t.data()[i * d..(i + 1) * d].to_vec() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let xi = subset_indices(&mut rng, n, subset_size);
        let yi = subset_indices(&mut rng, m, subset_size);
        let xs: Vec<Vec<f64>> = xi.iter().map(|&i| row(feats_real, i)).collect();
        let ys: Vec<Vec<f64>> = yi.iter().map(|&i| row(feats_fake, i)).collect();
        let s = subset_size as f64;
        let mut kxx = 0.0;
        let mut kyy = 0.0;
        let mut kxy = 0.0;
        for i in 0..subset_size {
            for j in 0..subset_size {
                if i != j {
                    kxx += poly_kernel(&xs[i], &xs[j]);
                    kyy += poly_kernel(&ys[i], &ys[j]);
                }
                kxy += poly_kernel(&xs[i], &ys[j]);
            }
        }
        values.push(kxx / (s * (s - 1.0)) + kyy / (s * (s - 1.0)) - 2.0 * kxy / (s * s));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerViewMetrics {
    pub theta: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Comparability caveat; feature-based scores depend on the extractor.
    pub note: String,
    pub extractor: String,
    pub n_views: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub per_view: Vec<PerViewMetrics>,
}

impl MetricReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let rows: Vec<Vec<f64>> = self
            .per_view
            .iter()
            .map(|v| vec![v.theta, v.psnr, v.ssim])
            .collect();
        write_csv(&dir.join("per_view.csv"), &["theta", "psnr", "ssim"], &rows)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KidOpts {
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for KidOpts {
    fn default() -> Self {
        KidOpts {
            subset_size: 50,
            n_subsets: 10,
            seed: 0,
        }
    }
}

/// Pair predicted and reference stacks by angle and compute all metrics.
/// PSNR/SSIM run on the 8-bit pixel values; FID/KID on pooled extractor
/// features of the [0, 1] images.
pub fn evaluate_stack(
    pred_manifest: &Path,
    ref_manifest: &Path,
    fx: &FeatureExtractor,
    kid_opts: &KidOpts,
) -> Result<MetricReport> {
    let pred = load_dataset(pred_manifest)?;
    let reference = load_dataset(ref_manifest)?;

    let mut per_view = Vec::with_capacity(reference.images.len());
    for ref_img in &reference.images {
        let theta = ref_img.pose.theta;
        let pred_img = pred
            .view_by_theta(theta)
            .ok_or(Error::MissingAngle { theta })?;
        if pred_img.res != ref_img.res {
            return Err(Error::shape(format!(
                "resolution mismatch at theta {theta}"
            )));
        }
        let a8: Vec<f64> = pred_img
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round())
            .collect();
        let b8: Vec<f64> = ref_img
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round())
            .collect();
        let (h, w) = ref_img.res;
        per_view.push(PerViewMetrics {
            theta,
            psnr: psnr(&a8, &b8, 255.0),
            ssim: ssim(&a8, &b8, h, w, &SsimOpts::default()),
        });
    }

    let embed = |imgs: &[crate::drr::RadiographImage]| -> Tensor {
        let rows: Vec<Vec<f64>> = imgs
            .iter()
            .map(|img| {
                let t = Tensor::new(vec![img.res.0, img.res.1], img.pixels.clone());
                fx.pooled_features(&t)
            })
            .collect();
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.into_iter().flatten().collect())
    };
    let pred_feats = embed(&pred.images);
    let ref_feats = embed(&reference.images);

    let fid_val = fid(&ref_feats, &pred_feats, CovMode::Sample)?;
    let subset = kid_opts
        .subset_size
        .min(pred_feats.rows())
        .min(ref_feats.rows());
    let (kid_mean, kid_std) = kid(
        &ref_feats,
        &pred_feats,
        subset,
        kid_opts.n_subsets,
        kid_opts.seed,
    )?;

    let n = per_view.len() as f64;
    Ok(MetricReport {
        note: format!(
            "feature-based scores (fid, kid) use the `{}` extractor and are \
             comparable only across runs sharing this extractor configuration",
            fx.descriptor
        ),
        extractor: fx.descriptor.clone(),
        n_views: per_view.len(),
        psnr_mean: per_view.iter().map(|v| v.psnr).sum::<f64>() / n,
        ssim_mean: per_view.iter().map(|v| v.ssim).sum::<f64>() / n,
        fid: fid_val,
        kid_mean,
        kid_std,
        per_view,
    })
}
