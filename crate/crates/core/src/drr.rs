//! Simulated radiographs: parallel-beam projection of an attenuation
//! volume for a source/panel pair orbiting the vertical (+z) axis.
//!
//! Geometry conventions, pinned so every module agrees bit-for-bit:
//!
//! * View direction at orbit angle `theta` (degrees), elevation `e`:
//!   `dir = (cos e cos theta, cos e sin theta, -sin e)`; panel right
//!   `r = (-sin theta, cos theta, 0)`; panel up `u = dir x r` (+z at e=0).
//! * An `H x W` image uses a corner-aligned sample lattice: column `j`
//!   maps to `u_img = -1 + 2j/(W-1)` (single-column images sample 0),
//!   rows likewise. Row 0 is the top of the image (+up on the panel),
//!   so the panel offset is `u_img*fov*r - v_img*fov*u`.
//! * Rays integrate attenuation over the volume's bounding box inflated
//!   by half a voxel, matching the zero-padded trilinear field so a
//!   uniform cube reproduces the analytic Beer-Lambert value.
//!
//! Pixel polarity defaults to film convention: `1 - exp(-integral)`,
//! attenuating structures bright.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::phantom::Volume;

/// A view on the vertical-axis orbit plus projection geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Orbit angle in degrees, normalized to [0, 360).
    pub theta: f64,
    /// Elevation in degrees; 0 = horizontal rays.
    pub elevation: f64,
    /// Source-to-center distance in mm. Unused by the parallel-beam
    /// model; retained as the cone-beam extension point.
    pub distance: f64,
    /// Half-width of the imaged region in mm.
    pub fov_extent: f64,
}

impl Pose {
    pub fn new(theta: f64, fov_extent: f64) -> Self {
        assert!(fov_extent > 0.0, "fov_extent must be positive");
        Pose {
            theta: theta.rem_euclid(360.0),
            elevation: 0.0,
            distance: 0.0,
            fov_extent,
        }
    }

    pub fn with_elevation(mut self, elevation: f64) -> Self {
        self.elevation = elevation;
        self
    }

    /// Orthonormal (dir, right, up) basis of the view.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let th = self.theta.to_radians();
        let el = self.elevation.to_radians();
        let dir = [el.cos() * th.cos(), el.cos() * th.sin(), -el.sin()];
        let right = [-th.sin(), th.cos(), 0.0];
        let up = cross(dir, right);
        (dir, right, up)
    }

    /// Unit viewing direction (ray propagation direction).
    pub fn view_dir(&self) -> [f64; 3] {
        self.basis().0
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Corner-aligned lattice coordinate: N samples spanning [-1, 1]
/// inclusive; a single sample sits at 0.
pub fn lattice_coord(k: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * k as f64 / (n - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Film convention: attenuating structures bright, `1 - exp(-I)`.
    #[default]
    Bright,
    /// Detector convention: `exp(-I)`.
    Dark,
}

/// A simulated radiograph with its pose. Pixels are row-major in [0, 1].
#[derive(Debug, Clone)]
pub struct RadiographImage {
    pub res: (usize, usize),
    pub pixels: Vec<f64>,
    pub pose: Pose,
}

impl RadiographImage {
    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.res.1 + col]
    }
}

/// Panel-centered parallel ray through image coords (u, v) in [-1,1]^2.
/// Returns (origin_mm, dir). The origin lies on the panel plane through
/// the volume center.
pub fn panel_ray(pose: &Pose, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let (dir, right, up) = pose.basis();
    let ru = u * pose.fov_extent;
    let rv = -v * pose.fov_extent;
    let origin = [
        ru * right[0] + rv * up[0],
        ru * right[1] + rv * up[1],
        ru * right[2] + rv * up[2],
    ];
    (origin, dir)
}

/// Intersection of the ray `o + t*dir` with an axis-aligned box of the
/// given half-extents (centered at the origin). Returns None if the ray
/// misses the box.
fn slab_intersect(o: [f64; 3], dir: [f64; 3], half: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for ax in 0..3 {
        if dir[ax].abs() < 1e-12 {
            if o[ax].abs() > half[ax] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[ax];
        let mut a = (-half[ax] - o[ax]) * inv;
        let mut b = (half[ax] - o[ax]) * inv;
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    if t0 < t1 { Some((t0, t1)) } else { None }
}

/// Line integral of attenuation along a panel ray, midpoint quadrature
/// with `n_steps` samples of the trilinearly interpolated volume.
pub fn line_integral(v: &Volume, o: [f64; 3], dir: [f64; 3], n_steps: usize) -> f64 {
    let mut half = v.half_extents();
    for h in &mut half {
        *h += v.spacing / 2.0;
    }
    let Some((t0, t1)) = slab_intersect(o, dir, half) else {
        return 0.0;
    };
    let h = (t1 - t0) / n_steps as f64;
    let mut acc = 0.0;
    for k in 0..n_steps {
        let t = t0 + (k as f64 + 0.5) * h;
        let p = [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
        acc += v.sample_trilinear(p);
    }
    acc * h
}

/// Project a volume to a radiograph. Deterministic; all pixels in [0, 1].
pub fn project(
    v: &Volume,
    pose: &Pose,
    res: (usize, usize),
    n_steps: usize,
    polarity: Polarity,
) -> Result<RadiographImage> {
    let (height, width) = res;
    if height < 1 || width < 1 {
        return Err(Error::invalid("image resolution must be >= 1"));
    }
    if n_steps < 2 {
        return Err(Error::invalid("n_steps must be >= 2"));
    }
    let (nx, ny, nz) = v.dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::invalid("degenerate volume"));
    }

    let mut pixels = vec![0.0f64; height * width];
    pixels
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| {
            let vimg = lattice_coord(i, height);
            for (j, px) in row.iter_mut().enumerate() {
                let uimg = lattice_coord(j, width);
                let (o, dir) = panel_ray(pose, uimg, vimg);
                let integral = line_integral(v, o, dir, n_steps);
                let value = match polarity {
                    Polarity::Bright => 1.0 - (-integral).exp(),
                    Polarity::Dark => (-integral).exp(),
                };
                *px = value.clamp(0.0, 1.0);
            }
        });

    Ok(RadiographImage {
        res,
        pixels,
        pose: *pose,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrrConfig {
    pub n_views: usize,
    pub step_deg: f64,
    pub res: (usize, usize),
    pub n_steps: usize,
    /// None picks the smallest panel that covers the volume from every
    /// orbit angle.
    pub fov_extent: Option<f64>,
    pub polarity: Polarity,
}

impl Default for DrrConfig {
    fn default() -> Self {
        DrrConfig {
            n_views: 72,
            step_deg: 5.0,
            res: (128, 128),
            n_steps: 512,
            fov_extent: None,
            polarity: Polarity::Bright,
        }
    }
}

/// Smallest half-width that keeps the whole volume on the panel at any
/// orbit angle: the horizontal circumradius vs the vertical half-extent.
pub fn auto_fov(v: &Volume) -> f64 {
    let h = v.half_extents();
    (h[0] * h[0] + h[1] * h[1]).sqrt().max(h[2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub theta: f64,
    pub elevation: f64,
    pub file: String,
}

/// Manifest written next to every generated or rendered image stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volume_hash: String,
    pub res: (usize, usize),
    pub n_steps: usize,
    pub fov_extent: f64,
    pub spacing: f64,
    pub polarity: Polarity,
    pub views: Vec<ViewEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Provenance fingerprint of a volume: dims, spacing and voxel bytes.
pub fn volume_hash(v: &Volume) -> String {
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4 + 32);
    for d in [v.dims.0, v.dims.1, v.dims.2] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    bytes.extend_from_slice(&v.spacing.to_le_bytes());
    for x in &v.voxels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    io::fnv1a_hex(&bytes)
}

/// Render `n_views` radiographs at `theta = 0, step, 2*step, ...` and write
/// them as 8-bit grayscale PNGs plus a manifest (`dataset.json`).
pub fn make_dataset(v: &Volume, cfg: &DrrConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.n_views < 1 {
        return Err(Error::invalid("n_views must be >= 1"));
    }
    if cfg.n_views as f64 * cfg.step_deg > 360.0 + 1e-9 {
        return Err(Error::invalid(format!(
            "{} views at {} deg exceed a full orbit",
            cfg.n_views, cfg.step_deg
        )));
    }
    fs::create_dir_all(out_dir)?;
    let fov = cfg.fov_extent.unwrap_or_else(|| auto_fov(v));

    let images: Vec<(usize, RadiographImage)> = (0..cfg.n_views)
        .into_par_iter()
        .map(|i| {
            let theta = (i as f64 * cfg.step_deg).rem_euclid(360.0);
            let pose = Pose::new(theta, fov);
            let img = project(v, &pose, cfg.res, cfg.n_steps, cfg.polarity)?;
            Ok((i, img))
        })
        .collect::<Result<_>>()?;

    let mut views = Vec::with_capacity(cfg.n_views);
    for (i, img) in &images {
        let file = format!("view_{i:03}.png");
        let bytes: Vec<u8> = img
            .pixels
            .iter()
            .map(|&p| (255.0 * p).round() as u8)
            .collect();
        io::write_gray_png(&out_dir.join(&file), &bytes, cfg.res.1, cfg.res.0)?;
        views.push(ViewEntry {
            theta: img.pose.theta,
            elevation: img.pose.elevation,
            file,
        });
    }

    let manifest = DatasetManifest {
        volume_hash: volume_hash(v),
        res: cfg.res,
        n_steps: cfg.n_steps,
        fov_extent: fov,
        spacing: v.spacing,
        polarity: cfg.polarity,
        views,
    };
    manifest.save(&out_dir.join("dataset.json"))?;
    Ok(manifest)
}

/// A dataset manifest together with its decoded images.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RadiographImage>,
}

impl LoadedDataset {
    pub fn view_by_theta(&self, theta: f64) -> Option<&RadiographImage> {
        let want = theta.rem_euclid(360.0);
        self.images
            .iter()
            .find(|img| (img.pose.theta - want).abs() < 1e-9)
    }
}

/// Load a manifest and all referenced PNGs (pixels back to [0, 1]).
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(PathBuf::from)
        .unwrap_or_default();
    let mut images = Vec::with_capacity(manifest.views.len());
    for view in &manifest.views {
        let (bytes, w, h) = io::read_gray_png(&dir.join(&view.file))?;
        if (h, w) != manifest.res {
            return Err(Error::shape(format!(
                "view `{}` is {}x{} but manifest says {}x{}",
                view.file, h, w, manifest.res.0, manifest.res.1
            )));
        }
        let pose = Pose {
            theta: view.theta,
            elevation: view.elevation,
            distance: 0.0,
            fov_extent: manifest.fov_extent,
        };
        images.push(RadiographImage {
            res: manifest.res,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            pose,
        });
    }
    Ok(LoadedDataset { manifest, images })
}
