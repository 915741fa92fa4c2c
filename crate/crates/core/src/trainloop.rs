//! Adversarial training of the radiance field, single-view fine-tuning,
//! full-orbit rendering and output normalization.
//!
//! Each step alternates a discriminator update (real patch from a random
//! view vs. a patch rendered at a random orbit pose with fresh normal
//! latents, plus the R1 penalty) and a generator update (non-saturating
//! adversarial term plus the task loss in the configured lambda mode; the
//! uncertainty mode also updates the learned log-variances). The generator
//! step renders at the pose of a sampled real view with matching patch
//! coordinates so the reconstruction losses compare corresponding pixels.
//!
//! Randomness is derived statelessly per step from the master seed, so a
//! checkpoint resumed mid-run retraces the identical trajectory and the
//! loss history is bit-reproducible.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    DiscArch, Discriminator, PatchSpec, extract_patch, init_discriminator, sample_patch_spec,
};
use crate::drr::{DatasetManifest, LoadedDataset, Pose, RadiographImage, ViewEntry, lattice_coord};
use crate::error::{Error, Result};
use crate::field::{FieldArch, LatentPair, RadianceField, init_field};
use crate::graph::{Graph, softplus};
use crate::io::{ArrayContainer, write_csv, write_gray_png};
use crate::objective::{
    AuxDecoder, FeatureExtractor, UncertaintyParams, feature_recon_loss_graph, init_decoder,
    mse_loss, mse_loss_graph, uncertainty_loss_graph,
};
use crate::render::{RenderConfig, rays_for_patch};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &str = "RFCKPT1";

/// How the reconstruction and MSE tasks are combined in the generator
/// objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed { lambda1: f64, lambda2: f64 },
    Uncertainty,
}

impl LambdaMode {
    pub fn label(&self) -> String {
        match self {
            LambdaMode::Fixed { lambda1, lambda2 } => format!("fixed({lambda1},{lambda2})"),
            LambdaMode::Uncertainty => "uncertainty".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Patches per optimizer step; losses are averaged over the batch.
    pub batch_patches: usize,
    pub k: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Step size for the two log-variance scalars; they chase moving
    /// targets, so the default is 10x the generator rate.
    pub lr_u: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_mode: LambdaMode,
    /// Add the adversarial term to the generator objective.
    pub include_adversarial: bool,
    pub r1_gamma: f64,
    pub seed: u64,
    pub fx_seed: u64,
    pub field_arch: FieldArch,
    pub n_samples_train: usize,
    pub n_samples_eval: usize,
    pub stratified: bool,
    pub background: f64,
    /// Resolved from the dataset at training time.
    pub image_res: (usize, usize),
    /// Resolved from the dataset at training time.
    pub fov_extent: f64,
    /// Progress lines to stderr every N steps; 0 silences them.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_patches: 1,
            k: 16,
            s_min: 0.25,
            s_max: 1.0,
            lr_g: 1e-3,
            lr_d: 4e-4,
            lr_u: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_mode: LambdaMode::Uncertainty,
            include_adversarial: true,
            r1_gamma: 0.3,
            seed: 0,
            fx_seed: 0,
            field_arch: FieldArch::desk(),
            n_samples_train: 24,
            n_samples_eval: 48,
            stratified: true,
            background: 0.0,
            image_res: (64, 64),
            fov_extent: 1.0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_patches < 1 {
            return Err(Error::invalid("batch_patches must be >= 1"));
        }
        if self.k < 4 || !self.k.is_multiple_of(4) {
            return Err(Error::invalid("patch side K must be a multiple of 4, >= 4"));
        }
        if !(self.s_min > 0.0 && self.s_min <= self.s_max && self.s_max <= 1.0) {
            return Err(Error::invalid("invalid patch scale range"));
        }
        for (name, lr) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lr_u", self.lr_u),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.n_samples_train < 1 || self.n_samples_eval < 1 {
            return Err(Error::invalid("sample counts must be >= 1"));
        }
        if let LambdaMode::Fixed { lambda1, lambda2 } = self.lambda_mode
            && (!lambda1.is_finite() || !lambda2.is_finite())
        {
            return Err(Error::invalid("fixed lambdas must be finite"));
        }
        Ok(())
    }
}

/// Plain Adam in f64. Deterministic; state round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub l_r: f64,
    pub l_mse: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

pub const HISTORY_HEADER: [&str; 7] = [
    "step",
    "loss_D",
    "loss_G_adv",
    "L_r",
    "L_MSE",
    "sigma1_sq",
    "sigma2_sq",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub step: usize,
    pub l_mse_input: f64,
    pub l_r: f64,
    pub l_task: f64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub field: RadianceField,
    pub disc: Discriminator,
    pub dec: AuxDecoder,
    pub uncertainty: UncertaintyParams,
    pub latents: LatentPair,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_u: Adam,
    pub history: Vec<HistoryRow>,
    pub finetune_history: Vec<FinetuneRow>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stateless per-step, per-purpose seed: resuming at step N reproduces
/// the exact stream of an uninterrupted run.
fn derive_seed(master: u64, step: u64, tag: u64) -> u64 {
    splitmix64(
        master ^ step.wrapping_mul(0xA24BAED4963EE407) ^ tag.wrapping_mul(0x9FB21C651E98DF25),
    )
}

mod tag {
    pub const VIEW_D: u64 = 1;
    pub const PATCH_D: u64 = 2;
    pub const POSE_D: u64 = 3;
    pub const LATENT_D: u64 = 4;
    pub const STRAT_D: u64 = 5;
    pub const VIEW_G: u64 = 6;
    pub const PATCH_G: u64 = 7;
    pub const LATENT_G: u64 = 8;
    pub const STRAT_G: u64 = 9;
    pub const FT_PATCH: u64 = 10;
    pub const FT_STRAT: u64 = 11;
    pub const FT_INIT: u64 = 12;
}

fn check_finite(value: f64, step: usize, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NanLoss { step, term, value })
    }
}

/// Initialize a fresh run state from a config.
pub fn init_run(cfg: &TrainConfig) -> Result<RunCheckpoint> {
    cfg.validate()?;
    let field = init_field(cfg.field_arch, cfg.seed)?;
    let disc = init_discriminator(DiscArch::for_patch(cfg.k), cfg.seed.wrapping_add(1))?;
    let dec = init_decoder(disc.arch.channels.1, cfg.seed.wrapping_add(2));
    let uncertainty = UncertaintyParams::zeros();
    let latents = LatentPair::zeros(cfg.field_arch.dim_zs, cfg.field_arch.dim_za);

    let gen_shapes: Vec<Vec<usize>> = field
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .chain(dec.named_params().iter().map(|(_, t)| t.shape().to_vec()))
        .collect();
    let disc_shapes: Vec<Vec<usize>> = disc
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let opt_g = Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps, &gen_shapes);
    let opt_d = Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps, &disc_shapes);
    let opt_u = Adam::new(cfg.lr_u, cfg.beta1, cfg.beta2, cfg.adam_eps, &[vec![2]]);

    Ok(RunCheckpoint {
        config: cfg.clone(),
        step: 0,
        field,
        disc,
        dec,
        uncertainty,
        latents,
        opt_g,
        opt_d,
        opt_u,
        history: Vec::new(),
        finetune_history: Vec::new(),
    })
}

/// Render a K x K patch of the scene at `pose` forward-only (no gradients
/// kept beyond the call).
fn render_patch_value(
    field: &RadianceField,
    z: &LatentPair,
    pose: &Pose,
    spec: &PatchSpec,
    render_cfg: &RenderConfig,
) -> Tensor {
    let rays = rays_for_patch(pose, &spec.coords());
    let (px, _) = crate::render::render_rays(field, z, &rays, render_cfg);
    px.reshaped(vec![spec.k, spec.k])
}

struct StepLosses {
    loss_d: f64,
    loss_g_adv: f64,
    l_r: f64,
    l_mse: f64,
}

/// One alternating D/G update. `st` is the global step index.
fn train_step(
    ckpt: &mut RunCheckpoint,
    data: &LoadedDataset,
    fx: &FeatureExtractor,
    st: usize,
) -> Result<StepLosses> {
    let cfg = ckpt.config.clone();
    let n_views = data.images.len();
    let fov = cfg.fov_extent;
    let master = cfg.seed;

    // ---- discriminator step -------------------------------------------
    let mut d_grads: Option<Vec<Tensor>> = None;
    let mut loss_d_total = 0.0;
    for b in 0..cfg.batch_patches {
        let sub = (b as u64) << 32;
        let spec = sample_patch_spec(
            derive_seed(master, st as u64, tag::PATCH_D + sub),
            cfg.k,
            cfg.s_min,
            cfg.s_max,
        )?;
        let mut view_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(master, st as u64, tag::VIEW_D + sub));
        let view = &data.images[view_rng.random_range(0..n_views)];
        let real_patch = extract_patch(view, &spec.coords(), cfg.k);

        let mut pose_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(master, st as u64, tag::POSE_D + sub));
        let fake_pose = Pose::new(pose_rng.random_range(0.0..360.0), fov);
        let mut lat_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(master, st as u64, tag::LATENT_D + sub));
        let z =
            LatentPair::standard_normal(cfg.field_arch.dim_zs, cfg.field_arch.dim_za, &mut lat_rng);
        let render_cfg = RenderConfig {
            n_samples: cfg.n_samples_train,
            stratified: cfg.stratified,
            background: cfg.background,
            seed: derive_seed(master, st as u64, tag::STRAT_D + sub),
        };
        let fake_patch = render_patch_value(&ckpt.field, &z, &fake_pose, &spec, &render_cfg);

        let mut g = Graph::new();
        let dvars = ckpt.disc.mount(&mut g);
        let real_v = g.constant(real_patch.clone());
        let fake_v = g.constant(fake_patch);
        let real_out = ckpt
            .disc
            .forward_graph(&mut g, &dvars, real_v, spec.scale, None);
        let fake_out = ckpt
            .disc
            .forward_graph(&mut g, &dvars, fake_v, spec.scale, None);
        let nr = g.neg(real_out.logit);
        let sp_r = g.softplus(nr);
        let sp_f = g.softplus(fake_out.logit);
        let sum = g.add(sp_r, sp_f);
        let main = g.sum_all(sum);
        let grads = g.backward(main);

        let (r1_penalty, r1_grads) = ckpt.disc.r1(&real_patch, spec.scale, cfg.r1_gamma);
        let main_val = check_finite(g.value(main).item(), st, "loss_D")?;
        check_finite(r1_penalty, st, "r1_penalty")?;
        loss_d_total += main_val;

        let batch_grads: Vec<Tensor> = dvars
            .all()
            .iter()
            .zip(ckpt.disc.named_params())
            .zip(r1_grads)
            .map(|((&v, (_, p)), r1g)| {
                let mut gt = grads.get_or_zeros(v, p.shape());
                gt.axpy(1.0, &r1g);
                gt
            })
            .collect();
        match &mut d_grads {
            None => d_grads = Some(batch_grads),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(batch_grads) {
                    a.axpy(1.0, &b);
                }
            }
        }
    }
    let scale = 1.0 / cfg.batch_patches as f64;
    let mut d_grads = d_grads.expect("batch_patches >= 1");
    for gt in &mut d_grads {
        *gt = gt.scale(scale);
    }
    ckpt.opt_d.step(&mut ckpt.disc.params_mut(), &d_grads);
    let loss_d = loss_d_total * scale;

    // ---- generator step ------------------------------------------------
    let mut g = Graph::new();
    let fvars = ckpt.field.mount(&mut g);
    let dvars = ckpt.disc.mount(&mut g);
    let decvars = ckpt.dec.mount(&mut g);
    let s_var = g.leaf(ckpt.uncertainty.s.clone());

    let mut adv_acc = None;
    let mut lr_acc = None;
    let mut mse_acc = None;
    for b in 0..cfg.batch_patches {
        let sub = (b as u64) << 32;
        let spec = sample_patch_spec(
            derive_seed(master, st as u64, tag::PATCH_G + sub),
            cfg.k,
            cfg.s_min,
            cfg.s_max,
        )?;
        let mut view_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(master, st as u64, tag::VIEW_G + sub));
        let view = &data.images[view_rng.random_range(0..n_views)];
        let real_patch = extract_patch(view, &spec.coords(), cfg.k);

        let mut lat_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(master, st as u64, tag::LATENT_G + sub));
        let z =
            LatentPair::standard_normal(cfg.field_arch.dim_zs, cfg.field_arch.dim_za, &mut lat_rng);
        let zv = ckpt.field.mount_latents(&mut g, &z);
        let render_cfg = RenderConfig {
            n_samples: cfg.n_samples_train,
            stratified: cfg.stratified,
            background: cfg.background,
            seed: derive_seed(master, st as u64, tag::STRAT_G + sub),
        };
        let rays = rays_for_patch(&view.pose, &spec.coords());
        let out =
            crate::render::render_rays_graph(&mut g, &ckpt.field, &fvars, &zv, &rays, &render_cfg);
        let fake_patch = g.reshape(out.pixels, vec![cfg.k, cfg.k]);

        let disc_out = ckpt
            .disc
            .forward_graph(&mut g, &dvars, fake_patch, spec.scale, None);
        let nf = g.neg(disc_out.logit);
        let adv = g.softplus(nf);
        let adv = g.sum_all(adv);

        let real_v = g.constant(real_patch.clone());
        let fake_flat = g.reshape(fake_patch, vec![cfg.k * cfg.k]);
        let real_flat = g.reshape(real_v, vec![cfg.k * cfg.k]);
        let l_mse = mse_loss_graph(&mut g, fake_flat, real_flat);

        let l_r = feature_recon_loss_graph(
            &mut g,
            fx,
            &ckpt.dec,
            &decvars,
            disc_out.features,
            &real_patch,
        );

        adv_acc = Some(match adv_acc {
            None => adv,
            Some(p) => g.add(p, adv),
        });
        lr_acc = Some(match lr_acc {
            None => l_r,
            Some(p) => g.add(p, l_r),
        });
        mse_acc = Some(match mse_acc {
            None => l_mse,
            Some(p) => g.add(p, l_mse),
        });
    }
    let adv_mean = g.scale(adv_acc.unwrap(), scale);
    let lr_mean = g.scale(lr_acc.unwrap(), scale);
    let mse_mean = g.scale(mse_acc.unwrap(), scale);

    let task = match cfg.lambda_mode {
        LambdaMode::Fixed { lambda1, lambda2 } => {
            let a = g.scale(lr_mean, lambda1);
            let b = g.scale(mse_mean, lambda2);
            g.add(a, b)
        }
        LambdaMode::Uncertainty => uncertainty_loss_graph(&mut g, lr_mean, mse_mean, s_var),
    };
    let total = if cfg.include_adversarial {
        g.add(task, adv_mean)
    } else {
        task
    };

    let loss_g_adv = check_finite(g.value(adv_mean).item(), st, "loss_G_adv")?;
    let l_r_val = check_finite(g.value(lr_mean).item(), st, "L_r")?;
    let l_mse_val = check_finite(g.value(mse_mean).item(), st, "L_MSE")?;
    check_finite(g.value(total).item(), st, "loss_G_total")?;

    let grads = g.backward(total);
    let gen_grads: Vec<Tensor> = fvars
        .all()
        .iter()
        .zip(ckpt.field.named_params())
        .map(|(&v, (_, p))| grads.get_or_zeros(v, p.shape()))
        .chain(
            decvars
                .all()
                .iter()
                .zip(ckpt.dec.named_params())
                .map(|(&v, (_, p))| grads.get_or_zeros(v, p.shape())),
        )
        .collect();
    {
        let mut params: Vec<&mut Tensor> = ckpt.field.params_mut();
        params.extend(ckpt.dec.params_mut());
        ckpt.opt_g.step(&mut params, &gen_grads);
    }
    if matches!(cfg.lambda_mode, LambdaMode::Uncertainty) {
        let s_grad = grads.get_or_zeros(s_var, &[2]);
        let mut params = [&mut ckpt.uncertainty.s];
        ckpt.opt_u.step(&mut params, &[s_grad]);
    }

    Ok(StepLosses {
        loss_d,
        loss_g_adv,
        l_r: l_r_val,
        l_mse: l_mse_val,
    })
}

/// Run (or continue) adversarial training against a DRR dataset.
pub fn train(cfg: &TrainConfig, data: &LoadedDataset) -> Result<RunCheckpoint> {
    let mut resolved = cfg.clone();
    resolved.image_res = data.manifest.res;
    resolved.fov_extent = data.manifest.fov_extent;
    let mut ckpt = init_run(&resolved)?;
    continue_training(&mut ckpt, data, resolved.steps)?;
    Ok(ckpt)
}

/// Advance an existing run by `extra_steps`. Resuming from a saved
/// checkpoint reproduces the uninterrupted trajectory exactly.
pub fn continue_training(
    ckpt: &mut RunCheckpoint,
    data: &LoadedDataset,
    extra_steps: usize,
) -> Result<()> {
    if data.images.is_empty() {
        return Err(Error::invalid("dataset has no views"));
    }
    let fx = feature_extractor_for(&ckpt.config);
    let end = ckpt.step + extra_steps;
    while ckpt.step < end {
        let st = ckpt.step;
        let losses = train_step(ckpt, data, &fx, st)?;
        ckpt.history.push(HistoryRow {
            step: st,
            loss_d: losses.loss_d,
            loss_g_adv: losses.loss_g_adv,
            l_r: losses.l_r,
            l_mse: losses.l_mse,
            sigma1_sq: ckpt.uncertainty.sigma1_sq(),
            sigma2_sq: ckpt.uncertainty.sigma2_sq(),
        });
        ckpt.step += 1;
        if ckpt.config.log_every > 0 && st.is_multiple_of(ckpt.config.log_every) {
            eprintln!(
                "step {st}: loss_D {:.4} loss_G_adv {:.4} L_r {:.4} L_MSE {:.4} s1sq {:.3} s2sq {:.3}",
                losses.loss_d,
                losses.loss_g_adv,
                losses.l_r,
                losses.l_mse,
                ckpt.uncertainty.sigma1_sq(),
                ckpt.uncertainty.sigma2_sq()
            );
        }
    }
    Ok(())
}

pub fn feature_extractor_for(cfg: &TrainConfig) -> FeatureExtractor {
    FeatureExtractor::seeded_random(cfg.fx_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    /// Latent initialization: best of this many standard-normal draws by
    /// input-view MSE.
    pub m_init: usize,
    pub lr: f64,
    pub lr_z: f64,
    pub seed: u64,
    /// Side of the full-view lattice used to score candidate latents and
    /// iterates against the input view.
    pub eval_grid: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            m_init: 32,
            lr: 5e-4,
            lr_z: 5e-3,
            seed: 0,
            eval_grid: 16,
        }
    }
}

/// Input-view reconstruction error of the current (field, latents) on a
/// coarse full-view lattice.
pub fn input_view_mse(
    field: &RadianceField,
    z: &LatentPair,
    xray: &RadiographImage,
    eval_grid: usize,
    render_cfg: &RenderConfig,
) -> f64 {
    let spec = PatchSpec::new(eval_grid, 1.0, (0.0, 0.0)).expect("eval grid spec");
    let rendered = render_patch_value(field, z, &xray.pose, &spec, render_cfg);
    let target = extract_patch(xray, &spec.coords(), eval_grid);
    mse_loss(
        &rendered.clone().reshaped(vec![eval_grid * eval_grid]),
        &target.reshaped(vec![eval_grid * eval_grid]),
    )
}

/// The render settings used to score candidate latents and iterates
/// against the input view during fine-tuning.
pub fn finetune_eval_cfg(cfg: &TrainConfig) -> RenderConfig {
    RenderConfig {
        n_samples: cfg.n_samples_train,
        stratified: false,
        background: cfg.background,
        seed: 0,
    }
}

/// Latent initialization for fine-tuning: the best of `m_init` standard
/// normal draws by input-view MSE. Returns the chosen pair and its error
/// (the pre-finetuning baseline).
pub fn finetune_latent_search(
    ckpt: &RunCheckpoint,
    xray: &RadiographImage,
    fcfg: &FinetuneConfig,
) -> (LatentPair, f64) {
    let arch = ckpt.config.field_arch;
    let eval_cfg = finetune_eval_cfg(&ckpt.config);
    let mut best_z = LatentPair::zeros(arch.dim_zs, arch.dim_za);
    let mut best_mse = f64::INFINITY;
    for m in 0..fcfg.m_init {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fcfg.seed, m as u64, tag::FT_INIT));
        let z = LatentPair::standard_normal(arch.dim_zs, arch.dim_za, &mut rng);
        let e = input_view_mse(&ckpt.field, &z, xray, fcfg.eval_grid, &eval_cfg);
        if e < best_mse {
            best_mse = e;
            best_z = z;
        }
    }
    (best_z, best_mse)
}

/// Fine-tune the generator (and latents) against a single radiograph.
/// The discriminator, decoder and uncertainty parameters stay frozen; the
/// returned checkpoint holds the best iterate by input-view MSE, so the
/// final input-view error never exceeds the pre-finetuning error.
pub fn finetune(
    ckpt: &RunCheckpoint,
    xray: &RadiographImage,
    fcfg: &FinetuneConfig,
) -> Result<RunCheckpoint> {
    if xray.res != ckpt.config.image_res {
        return Err(Error::shape(format!(
            "input view is {}x{} but the checkpoint was trained at {}x{}",
            xray.res.0, xray.res.1, ckpt.config.image_res.0, ckpt.config.image_res.1
        )));
    }
    if fcfg.m_init < 1 {
        return Err(Error::invalid("m_init must be >= 1"));
    }
    let cfg = &ckpt.config;
    let fx = feature_extractor_for(cfg);
    let arch = cfg.field_arch;
    let eval_cfg = finetune_eval_cfg(cfg);
    let (best_z, mut best_mse) = finetune_latent_search(ckpt, xray, fcfg);

    let mut out = ckpt.clone();
    out.latents = best_z.clone();
    out.finetune_history.clear();

    let mut field = ckpt.field.clone();
    let mut z = best_z;
    let mut best_field = field.clone();
    let mut best_zpair = z.clone();

    let field_shapes: Vec<Vec<usize>> = field
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut opt_f = Adam::new(fcfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, &field_shapes);
    let mut opt_z = Adam::new(
        fcfg.lr_z,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        &[vec![arch.dim_zs], vec![arch.dim_za]],
    );

    for st in 0..fcfg.steps {
        let spec = sample_patch_spec(
            derive_seed(fcfg.seed, st as u64, tag::FT_PATCH),
            cfg.k,
            cfg.s_min,
            cfg.s_max,
        )?;
        let target_patch = extract_patch(xray, &spec.coords(), cfg.k);
        let render_cfg = RenderConfig {
            n_samples: cfg.n_samples_train,
            stratified: cfg.stratified,
            background: cfg.background,
            seed: derive_seed(fcfg.seed, st as u64, tag::FT_STRAT),
        };

        let mut g = Graph::new();
        let fvars = field.mount(&mut g);
        let dvars = ckpt.disc.mount(&mut g);
        let decvars = ckpt.dec.mount(&mut g);
        let zvars = field.mount_latents(&mut g, &z);
        let rays = rays_for_patch(&xray.pose, &spec.coords());
        let rendered =
            crate::render::render_rays_graph(&mut g, &field, &fvars, &zvars, &rays, &render_cfg);
        let fake_patch = g.reshape(rendered.pixels, vec![cfg.k, cfg.k]);
        let disc_out = ckpt
            .disc
            .forward_graph(&mut g, &dvars, fake_patch, spec.scale, None);

        let target_v = g.constant(target_patch.clone());
        let fake_flat = g.reshape(fake_patch, vec![cfg.k * cfg.k]);
        let target_flat = g.reshape(target_v, vec![cfg.k * cfg.k]);
        let l_mse = mse_loss_graph(&mut g, fake_flat, target_flat);
        let l_r = feature_recon_loss_graph(
            &mut g,
            &fx,
            &ckpt.dec,
            &decvars,
            disc_out.features,
            &target_patch,
        );

        let task = match cfg.lambda_mode {
            LambdaMode::Fixed { lambda1, lambda2 } => {
                let a = g.scale(l_r, lambda1);
                let b = g.scale(l_mse, lambda2);
                g.add(a, b)
            }
            LambdaMode::Uncertainty => {
                let s_const = g.constant(out.uncertainty.s.clone());
                uncertainty_loss_graph(&mut g, l_r, l_mse, s_const)
            }
        };

        let l_task = check_finite(g.value(task).item(), st, "finetune_task")?;
        let l_r_val = g.value(l_r).item();
        let grads = g.backward(task);

        let f_grads: Vec<Tensor> = fvars
            .all()
            .iter()
            .zip(field.named_params())
            .map(|(&v, (_, p))| grads.get_or_zeros(v, p.shape()))
            .collect();
        opt_f.step(&mut field.params_mut(), &f_grads);
        let z_grads = [
            grads.get_or_zeros(zvars.z_s, &[arch.dim_zs]),
            grads.get_or_zeros(zvars.z_a, &[arch.dim_za]),
        ];
        let mut zparams = [&mut z.z_s, &mut z.z_a];
        opt_z.step(&mut zparams, &z_grads);

        let e = input_view_mse(&field, &z, xray, fcfg.eval_grid, &eval_cfg);
        if e < best_mse {
            best_mse = e;
            best_field = field.clone();
            best_zpair = z.clone();
        }
        out.finetune_history.push(FinetuneRow {
            step: st,
            l_mse_input: e,
            l_r: l_r_val,
            l_task,
        });
    }

    out.field = best_field;
    out.latents = best_zpair;
    Ok(out)
}

/// Per-image min-max normalization to 8 bits:
/// `y' = (y - min) / (max - min) * 255`, rounded half to even. A constant
/// image maps to all zeros.
pub fn normalize_output(pixels: &[f64]) -> Vec<u8> {
    let lo = pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // also catches empty input and non-finite extrema
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0u8; pixels.len()];
    }
    pixels
        .iter()
        .map(|&y| (((y - lo) / (hi - lo)) * 255.0).round_ties_even() as u8)
        .collect()
}

/// Render one full view at the checkpoint's resolution; rows fan out to
/// worker threads, each an independent forward pass (bit-deterministic).
pub fn render_view(ckpt: &RunCheckpoint, theta: f64, res: (usize, usize)) -> RadiographImage {
    let (h, w) = res;
    let pose = Pose::new(theta, ckpt.config.fov_extent);
    let render_cfg = RenderConfig {
        n_samples: ckpt.config.n_samples_eval,
        stratified: false,
        background: ckpt.config.background,
        seed: 0,
    };
    let mut pixels = vec![0.0f64; h * w];
    pixels.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        let v = lattice_coord(i, h);
        let coords: Vec<(f64, f64)> = (0..w).map(|j| (lattice_coord(j, w), v)).collect();
        let rays = rays_for_patch(&pose, &coords);
        let (px, _) = crate::render::render_rays(&ckpt.field, &ckpt.latents, &rays, &render_cfg);
        row.copy_from_slice(px.data());
    });
    RadiographImage { res, pixels, pose }
}

/// Render the full orbit in memory: thetas `0, step, 2*step, ...`.
pub fn render_stack(
    ckpt: &RunCheckpoint,
    n_views: usize,
    step_deg: f64,
    res: (usize, usize),
) -> Result<Vec<RadiographImage>> {
    if n_views < 1 {
        return Err(Error::invalid("n_views must be >= 1"));
    }
    if n_views as f64 * step_deg > 360.0 + 1e-9 {
        return Err(Error::invalid("views exceed a full orbit"));
    }
    Ok((0..n_views)
        .map(|i| render_view(ckpt, (i as f64 * step_deg).rem_euclid(360.0), res))
        .collect())
}

/// Render the orbit, min-max normalize each image, and write PNGs plus a
/// manifest mirroring the DRR dataset layout.
pub fn render_full(
    ckpt: &RunCheckpoint,
    n_views: usize,
    step_deg: f64,
    res: (usize, usize),
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let stack = render_stack(ckpt, n_views, step_deg, res)?;
    fs::create_dir_all(out_dir)?;
    let mut views = Vec::with_capacity(stack.len());
    for (i, img) in stack.iter().enumerate() {
        let file = format!("view_{i:03}.png");
        let bytes = normalize_output(&img.pixels);
        write_gray_png(&out_dir.join(&file), &bytes, res.1, res.0)?;
        views.push(ViewEntry {
            theta: img.pose.theta,
            elevation: img.pose.elevation,
            file,
        });
    }
    let manifest = DatasetManifest {
        volume_hash: params_hash(ckpt),
        res,
        n_steps: ckpt.config.n_samples_eval,
        fov_extent: ckpt.config.fov_extent,
        spacing: 0.0,
        polarity: crate::drr::Polarity::Bright,
        views,
    };
    manifest.save(&out_dir.join("dataset.json"))?;
    Ok(manifest)
}

/// Provenance fingerprint of the generator parameters.
pub fn params_hash(ckpt: &RunCheckpoint) -> String {
    let mut bytes = Vec::new();
    for (name, t) in ckpt.field.named_params() {
        bytes.extend_from_slice(name.as_bytes());
        for &x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    for &x in ckpt.latents.z_s.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    for &x in ckpt.latents.z_a.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    crate::io::fnv1a_hex(&bytes)
}

impl RunCheckpoint {
    /// All named parameter tensors, in optimizer order.
    fn gen_param_names(&self) -> Vec<String> {
        self.field
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .chain(self.dec.named_params().iter().map(|(n, _)| n.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "format": CKPT_MAGIC,
            "config": self.config,
            "step": self.step,
            "opt_t": { "g": self.opt_g.t, "d": self.opt_d.t, "u": self.opt_u.t },
        });
        let mut c = ArrayContainer::new(meta);
        for (n, t) in self.field.named_params() {
            c.insert(n, t.clone());
        }
        for (n, t) in self.disc.named_params() {
            c.insert(n, t.clone());
        }
        for (n, t) in self.dec.named_params() {
            c.insert(n, t.clone());
        }
        c.insert("uncertainty.s", self.uncertainty.s.clone());
        c.insert("latents.z_s", self.latents.z_s.clone());
        c.insert("latents.z_a", self.latents.z_a.clone());

        let gen_names = self.gen_param_names();
        for (i, name) in gen_names.iter().enumerate() {
            c.insert(format!("opt_g.m.{name}"), self.opt_g.m[i].clone());
            c.insert(format!("opt_g.v.{name}"), self.opt_g.v[i].clone());
        }
        for (i, (name, _)) in self.disc.named_params().iter().enumerate() {
            c.insert(format!("opt_d.m.{name}"), self.opt_d.m[i].clone());
            c.insert(format!("opt_d.v.{name}"), self.opt_d.v[i].clone());
        }
        c.insert("opt_u.m.uncertainty.s", self.opt_u.m[0].clone());
        c.insert("opt_u.v.uncertainty.s", self.opt_u.v[0].clone());

        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| {
                [
                    r.step as f64,
                    r.loss_d,
                    r.loss_g_adv,
                    r.l_r,
                    r.l_mse,
                    r.sigma1_sq,
                    r.sigma2_sq,
                ]
            })
            .collect();
        c.insert("history", Tensor::new(vec![self.history.len(), 7], hist));
        let ft: Vec<f64> = self
            .finetune_history
            .iter()
            .flat_map(|r| [r.step as f64, r.l_mse_input, r.l_r, r.l_task])
            .collect();
        c.insert(
            "finetune_history",
            Tensor::new(vec![self.finetune_history.len(), 4], ft),
        );
        c.save(path, CKPT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = ArrayContainer::load(path, CKPT_MAGIC)?;
        let config: TrainConfig = serde_json::from_value(c.meta["config"].clone())?;
        let step = c.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::format("checkpoint missing step"))? as usize;

        let mut ckpt = init_run(&config)?;
        ckpt.step = step;

        for p in ckpt.field.params_mut() {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        let fill =
            |names: Vec<String>, params: Vec<&mut Tensor>, c: &mut ArrayContainer| -> Result<()> {
                for (name, p) in names.into_iter().zip(params) {
                    let t = c.take(&name)?;
                    if t.shape() != p.shape() {
                        return Err(Error::shape(format!(
                            "checkpoint array `{name}` has shape {:?}, expected {:?}",
                            t.shape(),
                            p.shape()
                        )));
                    }
                    *p = t;
                }
                Ok(())
            };
        let field_names: Vec<String> = ckpt
            .field
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        fill(field_names, ckpt.field.params_mut(), &mut c)?;
        let disc_names: Vec<String> = ckpt
            .disc
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        fill(disc_names, ckpt.disc.params_mut(), &mut c)?;
        let dec_names: Vec<String> = ckpt
            .dec
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        fill(dec_names, ckpt.dec.params_mut(), &mut c)?;

        ckpt.uncertainty.s = c.take("uncertainty.s")?;
        ckpt.latents.z_s = c.take("latents.z_s")?;
        ckpt.latents.z_a = c.take("latents.z_a")?;

        let gen_names = ckpt.gen_param_names();
        for (i, name) in gen_names.iter().enumerate() {
            ckpt.opt_g.m[i] = c.take(&format!("opt_g.m.{name}"))?;
            ckpt.opt_g.v[i] = c.take(&format!("opt_g.v.{name}"))?;
        }
        let disc_names: Vec<String> = ckpt
            .disc
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for (i, name) in disc_names.iter().enumerate() {
            ckpt.opt_d.m[i] = c.take(&format!("opt_d.m.{name}"))?;
            ckpt.opt_d.v[i] = c.take(&format!("opt_d.v.{name}"))?;
        }
        ckpt.opt_u.m[0] = c.take("opt_u.m.uncertainty.s")?;
        ckpt.opt_u.v[0] = c.take("opt_u.v.uncertainty.s")?;
        ckpt.opt_g.t = c.meta["opt_t"]["g"].as_u64().unwrap_or(0);
        ckpt.opt_d.t = c.meta["opt_t"]["d"].as_u64().unwrap_or(0);
        ckpt.opt_u.t = c.meta["opt_t"]["u"].as_u64().unwrap_or(0);

        let hist = c.take("history")?;
        ckpt.history = hist
            .data()
            .chunks_exact(7)
            .map(|r| HistoryRow {
                step: r[0] as usize,
                loss_d: r[1],
                loss_g_adv: r[2],
                l_r: r[3],
                l_mse: r[4],
                sigma1_sq: r[5],
                sigma2_sq: r[6],
            })
            .collect();
        let ft = c.take("finetune_history")?;
        ckpt.finetune_history = ft
            .data()
            .chunks_exact(4)
            .map(|r| FinetuneRow {
                step: r[0] as usize,
                l_mse_input: r[1],
                l_r: r[2],
                l_task: r[3],
            })
            .collect();
        Ok(ckpt)
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self
            .history
            .iter()
            .map(|r| {
                vec![
                    r.step as f64,
                    r.loss_d,
                    r.loss_g_adv,
                    r.l_r,
                    r.l_mse,
                    r.sigma1_sq,
                    r.sigma2_sq,
                ]
            })
            .collect();
        write_csv(path, &HISTORY_HEADER, &rows)
    }
}

/// The loss-weight ablation grid: the three fixed-weight rows plus the
/// learned-weights mode.
pub fn ablation_modes() -> Vec<LambdaMode> {
    vec![
        LambdaMode::Fixed {
            lambda1: 0.6,
            lambda2: 0.4,
        },
        LambdaMode::Fixed {
            lambda1: 0.5,
            lambda2: 0.5,
        },
        LambdaMode::Fixed {
            lambda1: 0.4,
            lambda2: 0.6,
        },
        LambdaMode::Uncertainty,
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Per-mode means over seeds, in grid order.
    pub summary: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("mode              seed    psnr      ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>5} {:>9.4} {:>9.4}\n",
                r.mode, r.seed, r.psnr_mean, r.ssim_mean
            ));
        }
        out.push_str("---- per-mode means over seeds ----\n");
        for r in &self.summary {
            out.push_str(&format!(
                "{:<16}       {:>9.4} {:>9.4}\n",
                r.mode, r.psnr_mean, r.ssim_mean
            ));
        }
        out
    }
}

/// Train each lambda mode with each seed, render a reduced orbit, and
/// score it against the ground-truth dataset views at matching angles.
pub fn ablate(
    base: &TrainConfig,
    data: &LoadedDataset,
    seeds: &[u64],
    render_views: usize,
    render_step_deg: f64,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let modes = ablation_modes();
    for mode in &modes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.lambda_mode = *mode;
            cfg.seed = seed;
            let ckpt = train(&cfg, data)?;
            let (psnr_mean, ssim_mean) = stack_scores(&ckpt, data, render_views, render_step_deg)?;
            rows.push(AblationRow {
                mode: mode.label(),
                seed,
                psnr_mean,
                ssim_mean,
            });
        }
    }
    let summary = modes
        .iter()
        .map(|mode| {
            let label = mode.label();
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.mode == label).collect();
            let n = sel.len() as f64;
            AblationRow {
                mode: label,
                seed: 0,
                psnr_mean: sel.iter().map(|r| r.psnr_mean).sum::<f64>() / n,
                ssim_mean: sel.iter().map(|r| r.ssim_mean).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(AblationReport { rows, summary })
}

/// Mean PSNR/SSIM of a rendered (normalized) orbit against ground-truth
/// dataset views at the same angles.
pub fn stack_scores(
    ckpt: &RunCheckpoint,
    data: &LoadedDataset,
    n_views: usize,
    step_deg: f64,
) -> Result<(f64, f64)> {
    let stack = render_stack(ckpt, n_views, step_deg, data.manifest.res)?;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for img in &stack {
        let gt = data
            .view_by_theta(img.pose.theta)
            .ok_or(Error::MissingAngle {
                theta: img.pose.theta,
            })?;
        let a: Vec<f64> = normalize_output(&img.pixels)
            .iter()
            .map(|&b| b as f64)
            .collect();
        let b: Vec<f64> = gt.pixels.iter().map(|&p| (p * 255.0).round()).collect();
        psnr_sum += crate::metrics::psnr(&a, &b, 255.0);
        ssim_sum += crate::metrics::ssim(
            &a,
            &b,
            img.res.0,
            img.res.1,
            &crate::metrics::SsimOpts::default(),
        );
    }
    let n = stack.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// Verifies the gan loss identities used by the D step; kept here so the
/// train loop and the objective stay in sync.
pub fn adv_d_loss_value(real_logit: f64, fake_logit: f64) -> f64 {
    softplus(-real_logit) + softplus(fake_logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::{DrrConfig, make_dataset};
    use crate::phantom::{PhantomKind, PhantomParams, make_phantom};

    /// Tiny dataset + config that keep each training step around a
    /// millisecond.
    fn tiny_setup(dir_tag: &str) -> (LoadedDataset, TrainConfig) {
        let v = make_phantom(PhantomKind::KneeToy, 16, 1, &PhantomParams::new()).unwrap();
        let dir = std::env::temp_dir().join(format!("radfield_train_{dir_tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = DrrConfig {
            n_views: 6,
            step_deg: 60.0,
            res: (16, 16),
            n_steps: 16,
            ..DrrConfig::default()
        };
        make_dataset(&v, &cfg, &dir).unwrap();
        let data = crate::drr::load_dataset(&dir.join("dataset.json")).unwrap();
        let tc = TrainConfig {
            steps: 4,
            k: 8,
            field_arch: FieldArch {
                depth: 2,
                width: 16,
                color_width: 8,
                dim_zs: 4,
                dim_za: 4,
                encoding: crate::field::EncodingConfig {
                    l_pos: 2,
                    l_dir: 1,
                    include_input: true,
                },
            },
            n_samples_train: 6,
            n_samples_eval: 8,
            log_every: 0,
            ..TrainConfig::default()
        };
        (data, tc)
    }

    #[test]
    fn zero_steps_equals_initialization() {
        let (data, mut tc) = tiny_setup("zero");
        tc.steps = 0;
        let ckpt = train(&tc, &data).unwrap();
        let mut resolved = tc.clone();
        resolved.image_res = data.manifest.res;
        resolved.fov_extent = data.manifest.fov_extent;
        let fresh = init_run(&resolved).unwrap();
        assert_eq!(ckpt, fresh);
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let (data, mut tc) = tiny_setup("det");
        tc.steps = 50;
        let a = train(&tc, &data).unwrap();
        let b = train(&tc, &data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.field, b.field);
        assert_eq!(a.disc, b.disc);
    }

    #[test]
    fn uncertainty_params_actually_move() {
        let (data, mut tc) = tiny_setup("umove");
        tc.steps = 120;
        tc.lambda_mode = LambdaMode::Uncertainty;
        let ckpt = train(&tc, &data).unwrap();
        let last = ckpt.history.last().unwrap();
        assert!(
            (last.sigma1_sq - 1.0).abs() > 0.01 || (last.sigma2_sq - 1.0).abs() > 0.01,
            "uncertainty weights did not move: {last:?}"
        );
        // and they stayed finite and positive throughout
        for row in &ckpt.history {
            assert!(row.sigma1_sq.is_finite() && row.sigma1_sq > 0.0);
            assert!(row.sigma2_sq.is_finite() && row.sigma2_sq > 0.0);
        }
    }

    #[test]
    fn fixed_mode_keeps_unit_sigmas() {
        let (data, mut tc) = tiny_setup("fixed");
        tc.steps = 3;
        tc.lambda_mode = LambdaMode::Fixed {
            lambda1: 0.6,
            lambda2: 0.4,
        };
        let ckpt = train(&tc, &data).unwrap();
        for row in &ckpt.history {
            assert_eq!(row.sigma1_sq, 1.0);
            assert_eq!(row.sigma2_sq, 1.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let (data, mut tc) = tiny_setup("ckpt");
        tc.steps = 4;
        let ckpt = train(&tc, &data).unwrap();
        let dir = std::env::temp_dir().join("radfield_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.rfck");
        ckpt.save(&path).unwrap();
        let back = RunCheckpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, mut tc) = tiny_setup("resume");
        tc.steps = 8;
        let full = train(&tc, &data).unwrap();

        let mut tc_half = tc.clone();
        tc_half.steps = 4;
        let half = train(&tc_half, &data).unwrap();
        let dir = std::env::temp_dir().join("radfield_resume_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("half.rfck");
        half.save(&path).unwrap();
        let mut resumed = RunCheckpoint::load(&path).unwrap();
        continue_training(&mut resumed, &data, 4).unwrap();

        assert_eq!(full.history, resumed.history);
        assert_eq!(full.field, resumed.field);
        assert_eq!(full.disc, resumed.disc);
        assert_eq!(full.uncertainty, resumed.uncertainty);
    }

    #[test]
    fn nan_abort_names_step_and_term() {
        let (data, mut tc) = tiny_setup("nan");
        tc.steps = 3;
        let mut ckpt = train(&tc, &data).unwrap();
        // a poisoned parameter must surface as a diagnostic, not silence
        ckpt.field.trunk[0].0.data_mut()[0] = f64::NAN;
        match continue_training(&mut ckpt, &data, 2) {
            Err(Error::NanLoss { step, term, value }) => {
                assert_eq!(step, 3);
                assert!(!term.is_empty());
                assert!(value.is_nan());
            }
            Ok(_) => panic!("expected a NaN abort"),
            Err(e) => panic!("unexpected error: {e}"),
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (data, tc) = tiny_setup("empty");
        let empty = LoadedDataset {
            manifest: data.manifest.clone(),
            images: Vec::new(),
        };
        assert!(train(&tc, &empty).is_err());
    }

    #[test]
    fn finetune_zero_steps_stores_latents_only() {
        let (data, mut tc) = tiny_setup("ft0");
        tc.steps = 2;
        let ckpt = train(&tc, &data).unwrap();
        let xray = data.images[0].clone();
        let fcfg = FinetuneConfig {
            steps: 0,
            m_init: 1,
            eval_grid: 8,
            ..FinetuneConfig::default()
        };
        let out = finetune(&ckpt, &xray, &fcfg).unwrap();
        assert_eq!(out.field, ckpt.field);
        assert_eq!(out.disc, ckpt.disc);
        assert_ne!(out.latents, ckpt.latents, "latents must be stored");
        assert!(out.finetune_history.is_empty());
    }

    #[test]
    fn finetune_never_worsens_input_view_mse() {
        let (data, mut tc) = tiny_setup("ftimp");
        tc.steps = 6;
        let ckpt = train(&tc, &data).unwrap();
        let xray = data.images[0].clone();
        let fcfg = FinetuneConfig {
            steps: 10,
            m_init: 4,
            eval_grid: 8,
            ..FinetuneConfig::default()
        };
        let out = finetune(&ckpt, &xray, &fcfg).unwrap();

        let (_, pre) = finetune_latent_search(&ckpt, &xray, &fcfg);
        let post = input_view_mse(
            &out.field,
            &out.latents,
            &xray,
            8,
            &finetune_eval_cfg(&ckpt.config),
        );
        assert!(
            post <= pre + 1e-12,
            "finetune worsened input-view mse: {pre} -> {post}"
        );
        // reproducibility of tuned latents
        let out2 = finetune(&ckpt, &xray, &fcfg).unwrap();
        assert_eq!(out.latents, out2.latents);
    }

    #[test]
    fn finetune_rejects_resolution_mismatch() {
        let (data, mut tc) = tiny_setup("ftres");
        tc.steps = 1;
        let ckpt = train(&tc, &data).unwrap();
        let mut xray = data.images[0].clone();
        xray.res = (8, 8);
        xray.pixels = vec![0.5; 64];
        assert!(finetune(&ckpt, &xray, &FinetuneConfig::default()).is_err());
    }

    #[test]
    fn normalize_output_examples() {
        assert_eq!(normalize_output(&[2.0, 4.0, 6.0]), vec![0, 128, 255]);
        assert_eq!(normalize_output(&[3.3, 3.3, 3.3]), vec![0, 0, 0]);
        let identity: Vec<f64> = vec![0.0, 17.0, 128.0, 255.0];
        assert_eq!(normalize_output(&identity), vec![0u8, 17, 128, 255]);
    }

    #[test]
    fn render_full_layout_mirrors_dataset() {
        let (data, mut tc) = tiny_setup("rfull");
        tc.steps = 1;
        let ckpt = train(&tc, &data).unwrap();
        let dir = std::env::temp_dir().join("radfield_render_full_test");
        let _ = std::fs::remove_dir_all(&dir);
        let manifest = render_full(&ckpt, 6, 60.0, (16, 16), &dir).unwrap();
        let expect: Vec<f64> = data.manifest.views.iter().map(|v| v.theta).collect();
        let got: Vec<f64> = manifest.views.iter().map(|v| v.theta).collect();
        assert_eq!(got, expect);
        for v in &manifest.views {
            assert!(dir.join(&v.file).exists());
        }
        // single view
        let dir2 = std::env::temp_dir().join("radfield_render_one_test");
        let _ = std::fs::remove_dir_all(&dir2);
        let m1 = render_full(&ckpt, 1, 5.0, (16, 16), &dir2).unwrap();
        assert_eq!(m1.views.len(), 1);
        assert_eq!(m1.views[0].theta, 0.0);
    }

    #[test]
    fn adv_loss_identity_at_zero() {
        assert!((adv_d_loss_value(0.0, 0.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ablation_grid_matches_weight_table() {
        let labels: Vec<String> = ablation_modes().iter().map(|m| m.label()).collect();
        assert_eq!(
            labels,
            vec![
                "fixed(0.6,0.4)",
                "fixed(0.5,0.5)",
                "fixed(0.4,0.6)",
                "uncertainty"
            ]
        );
    }
}
