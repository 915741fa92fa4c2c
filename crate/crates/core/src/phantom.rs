//! Procedural CT-like attenuation volumes.
//!
//! Deterministic stand-ins for real CT scans: a constant cube, a
//! Shepp-Logan-style ellipsoid composition, and a toy knee (two bone
//! cylinders in a tissue cylinder separated by a joint-space gap). Shape
//! placement uses only +,-,*,/ and comparisons so identical seeds give
//! identical voxels on every platform.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};

/// Dense voxel grid of attenuation coefficients, mm^-1, isotropic spacing.
/// Layout: x fastest, then y, then z (`voxels[x + nx*(y + ny*z)]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing: f64,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: f64, voxels: Vec<f32>) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx < 1 || ny < 1 || nz < 1 {
            return Err(Error::invalid(format!(
                "volume dims must be >= 1, got {dims:?}"
            )));
        }
        if !spacing.is_finite() || spacing <= 0.0 {
            return Err(Error::invalid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        if voxels.len() != nx * ny * nz {
            return Err(Error::shape(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                dims
            )));
        }
        if voxels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("voxels must be finite and non-negative"));
        }
        Ok(Volume {
            dims,
            spacing,
            voxels,
        })
    }

    /// Half extents of the bounding box in mm per axis.
    pub fn half_extents(&self) -> [f64; 3] {
        [
            self.dims.0 as f64 * self.spacing / 2.0,
            self.dims.1 as f64 * self.spacing / 2.0,
            self.dims.2 as f64 * self.spacing / 2.0,
        ]
    }

    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[x + self.dims.0 * (y + self.dims.1 * z)]
    }

    /// Trilinear interpolation at a point in volume-centered mm
    /// coordinates. Positions outside the grid read as 0 (air), so the
    /// reconstructed field ramps to zero over half a voxel at each face.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let (nx, ny, nz) = self.dims;
        let q = [
            p[0] / self.spacing + nx as f64 / 2.0 - 0.5,
            p[1] / self.spacing + ny as f64 / 2.0 - 0.5,
            p[2] / self.spacing + nz as f64 / 2.0 - 0.5,
        ];
        let base = [q[0].floor(), q[1].floor(), q[2].floor()];
        let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
        let dims = [nx as i64, ny as i64, nz as i64];
        let idx = [base[0] as i64, base[1] as i64, base[2] as i64];

        let fetch = |dx: i64, dy: i64, dz: i64| -> f64 {
            let (x, y, z) = (idx[0] + dx, idx[1] + dy, idx[2] + dz);
            if x < 0 || y < 0 || z < 0 || x >= dims[0] || y >= dims[1] || z >= dims[2] {
                0.0
            } else {
                self.voxel(x as usize, y as usize, z as usize) as f64
            }
        };

        let mut acc = 0.0;
        for dz in 0..2i64 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2i64 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2i64 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    acc += wx * wy * wz * fetch(dx, dy, dz);
                }
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    Cube,
    Ellipsoids,
    KneeToy,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cube" => Ok(PhantomKind::Cube),
            "ellipsoids" => Ok(PhantomKind::Ellipsoids),
            "knee_toy" => Ok(PhantomKind::KneeToy),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

pub type PhantomParams = BTreeMap<String, f64>;

fn param(params: &PhantomParams, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn check_keys(params: &PhantomParams, allowed: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::invalid(format!(
                "unknown phantom parameter `{k}` (allowed: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

/// Generate a deterministic phantom volume of `size^3` voxels.
///
/// Recognized parameter keys:
/// * all kinds: `spacing` (mm per voxel, default 1.0)
/// * `cube`: `mu` (default 0.02), `margin` (empty voxels per face, default size/8)
/// * `ellipsoids`: none beyond `spacing`
/// * `knee_toy`: `bone_mu` (default 0.03), `tissue_mu` (default 0.004),
///   `gap` (joint half-height in normalized units, default 0.06)
pub fn make_phantom(
    kind: PhantomKind,
    size: usize,
    seed: u64,
    params: &PhantomParams,
) -> Result<Volume> {
    if size < 1 {
        return Err(Error::invalid("phantom size must be >= 1"));
    }
    let spacing = param(params, "spacing", 1.0);
    let n = size;
    let mut voxels = vec![0.0f32; n * n * n];

    // normalized voxel-center coordinate in [-1, 1]
    let coord = |i: usize| -> f64 { (2.0 * (i as f64 + 0.5) - n as f64) / n as f64 };

    match kind {
        PhantomKind::Cube => {
            check_keys(params, &["spacing", "mu", "margin"])?;
            let mu = param(params, "mu", 0.02) as f32;
            let margin = param(params, "margin", (size / 8) as f64) as usize;
            if 2 * margin >= n && margin > 0 {
                return Err(Error::invalid("cube margin leaves no interior"));
            }
            for z in margin..n - margin {
                for y in margin..n - margin {
                    for x in margin..n - margin {
                        voxels[x + n * (y + n * z)] = mu;
                    }
                }
            }
        }
        PhantomKind::Ellipsoids => {
            check_keys(params, &["spacing"])?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // enclosing body first, then 4..=11 internal features
            struct Ell {
                c: [f64; 3],
                inv_a2: [f64; 3],
                amp: f64,
            }
            let mut ells = Vec::new();
            let body_ax = [
                0.74 + rng.random_range(0.0..0.1),
                0.74 + rng.random_range(0.0..0.1),
                0.74 + rng.random_range(0.0..0.1),
            ];
            ells.push(Ell {
                c: [0.0, 0.0, 0.0],
                inv_a2: [
                    1.0 / (body_ax[0] * body_ax[0]),
                    1.0 / (body_ax[1] * body_ax[1]),
                    1.0 / (body_ax[2] * body_ax[2]),
                ],
                amp: 0.008,
            });
            let extra = rng.random_range(4..=11u32);
            for _ in 0..extra {
                let c = [
                    rng.random_range(-0.55..0.55),
                    rng.random_range(-0.55..0.55),
                    rng.random_range(-0.55..0.55),
                ];
                let ax = [
                    rng.random_range(0.08..0.45),
                    rng.random_range(0.08..0.45),
                    rng.random_range(0.08..0.45),
                ];
                let subtractive = rng.random_range(0.0..1.0) < 0.3;
                let amp = if subtractive {
                    -rng.random_range(0.002..0.008)
                } else {
                    rng.random_range(0.004..0.02)
                };
                ells.push(Ell {
                    c,
                    inv_a2: [
                        1.0 / (ax[0] * ax[0]),
                        1.0 / (ax[1] * ax[1]),
                        1.0 / (ax[2] * ax[2]),
                    ],
                    amp,
                });
            }
            for z in 0..n {
                let pz = coord(z);
                for y in 0..n {
                    let py = coord(y);
                    for x in 0..n {
                        let px = coord(x);
                        let mut mu = 0.0;
                        for e in &ells {
                            let dx = px - e.c[0];
                            let dy = py - e.c[1];
                            let dz = pz - e.c[2];
                            if dx * dx * e.inv_a2[0] + dy * dy * e.inv_a2[1] + dz * dz * e.inv_a2[2]
                                <= 1.0
                            {
                                mu += e.amp;
                            }
                        }
                        voxels[x + n * (y + n * z)] = mu.max(0.0) as f32;
                    }
                }
            }
        }
        PhantomKind::KneeToy => {
            check_keys(params, &["spacing", "bone_mu", "tissue_mu", "gap"])?;
            let bone_mu = param(params, "bone_mu", 0.03);
            let tissue_mu = param(params, "tissue_mu", 0.004);
            let gap = param(params, "gap", 0.06);
            if bone_mu <= tissue_mu {
                return Err(Error::invalid("knee_toy requires bone_mu > tissue_mu"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jitter = |rng: &mut ChaCha8Rng, r: f64| rng.random_range(-r..r);

            let tissue_r = 0.72;
            let tissue_r2 = tissue_r * tissue_r;
            let tissue_hz = 0.85;

            let b1c = [-0.13 + jitter(&mut rng, 0.03), jitter(&mut rng, 0.03)];
            let b1r = 0.21 + jitter(&mut rng, 0.02);
            let b2c = [0.13 + jitter(&mut rng, 0.03), jitter(&mut rng, 0.03)];
            let b2r = 0.21 + jitter(&mut rng, 0.02);
            let (b1r2, b2r2) = (b1r * b1r, b2r * b2r);
            let bone_top = 0.8;

            for z in 0..n {
                let pz = coord(z);
                for y in 0..n {
                    let py = coord(y);
                    for x in 0..n {
                        let px = coord(x);
                        let mut mu = 0.0;
                        let in_tissue = px * px + py * py <= tissue_r2 && pz.abs() <= tissue_hz;
                        if in_tissue {
                            mu = tissue_mu;
                            let d1x = px - b1c[0];
                            let d1y = py - b1c[1];
                            let in_b1 =
                                d1x * d1x + d1y * d1y <= b1r2 && pz >= gap && pz <= bone_top;
                            let d2x = px - b2c[0];
                            let d2y = py - b2c[1];
                            let in_b2 =
                                d2x * d2x + d2y * d2y <= b2r2 && pz <= -gap && pz >= -bone_top;
                            if in_b1 || in_b2 {
                                mu = bone_mu;
                            }
                        }
                        voxels[x + n * (y + n * z)] = mu as f32;
                    }
                }
            }
        }
    }

    Volume::new((n, n, n), spacing, voxels)
}

/// Save in the documented volume format: a UTF-8 header followed by the raw
/// little-endian f32 voxel blob.
///
/// ```text
/// RADVOL 1
/// dims <nx> <ny> <nz>
/// spacing <mm>
/// dtype f32le
/// layout x-fastest
/// data
/// <nx*ny*nz little-endian f32>
/// ```
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "RADVOL 1")?;
    writeln!(w, "dims {} {} {}", v.dims.0, v.dims.1, v.dims.2)?;
    writeln!(w, "spacing {}", v.spacing)?;
    writeln!(w, "dtype f32le")?;
    writeln!(w, "layout x-fastest")?;
    writeln!(w, "data")?;
    for &x in &v.voxels {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String> {
        let nl = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("volume header truncated"))?;
        let line = std::str::from_utf8(&bytes[*pos..*pos + nl])
            .map_err(|_| Error::format("volume header is not utf-8"))?
            .to_string();
        *pos += nl + 1;
        Ok(line)
    };

    if next_line(&mut pos)? != "RADVOL 1" {
        return Err(Error::format("not a RADVOL 1 file"));
    }
    let dims_line = next_line(&mut pos)?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("dims ")
        .ok_or_else(|| Error::format("missing dims line"))?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::format("bad dims")))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::format("dims must have three components"));
    }
    let spacing: f64 = next_line(&mut pos)?
        .strip_prefix("spacing ")
        .ok_or_else(|| Error::format("missing spacing line"))?
        .parse()
        .map_err(|_| Error::format("bad spacing"))?;
    if next_line(&mut pos)? != "dtype f32le" {
        return Err(Error::format("unsupported dtype (expected f32le)"));
    }
    if next_line(&mut pos)? != "layout x-fastest" {
        return Err(Error::format("unsupported layout (expected x-fastest)"));
    }
    if next_line(&mut pos)? != "data" {
        return Err(Error::format("missing data marker"));
    }

    let blob = &bytes[pos..];
    let expected = dims[0] * dims[1] * dims[2];
    if blob.len() != expected * 4 {
        return Err(Error::format(format!(
            "voxel blob holds {} bytes but dims {:?} require {}",
            blob.len(),
            dims,
            expected * 4
        )));
    }
    let mut voxels = Vec::with_capacity(expected);
    for chunk in blob.chunks_exact(4) {
        voxels.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Volume::new((dims[0], dims[1], dims[2]), spacing, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> PhantomParams {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn cube_constant_fill() {
        let v = make_phantom(
            PhantomKind::Cube,
            8,
            0,
            &params(&[("mu", 0.02), ("margin", 0.0)]),
        )
        .unwrap();
        assert_eq!(v.voxels.len(), 512);
        assert!(v.voxels.iter().all(|&x| x == 0.02f32));
    }

    #[test]
    fn cube_margin_is_empty() {
        let v = make_phantom(PhantomKind::Cube, 8, 0, &params(&[("margin", 2.0)])).unwrap();
        assert_eq!(v.voxel(0, 0, 0), 0.0);
        assert_eq!(v.voxel(1, 4, 4), 0.0);
        assert!(v.voxel(4, 4, 4) > 0.0);
    }

    #[test]
    fn ellipsoids_deterministic() {
        let a = make_phantom(PhantomKind::Ellipsoids, 64, 7, &PhantomParams::new()).unwrap();
        let b = make_phantom(PhantomKind::Ellipsoids, 64, 7, &PhantomParams::new()).unwrap();
        let bytes_a: Vec<u8> = a.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes_b: Vec<u8> = b.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(
            crate::io::fnv1a_hex(&bytes_a),
            crate::io::fnv1a_hex(&bytes_b)
        );
        // a different seed gives a different volume
        let c = make_phantom(PhantomKind::Ellipsoids, 64, 8, &PhantomParams::new()).unwrap();
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn ellipsoids_nonnegative_after_subtraction() {
        for seed in 0..12 {
            let v = make_phantom(PhantomKind::Ellipsoids, 32, seed, &PhantomParams::new()).unwrap();
            assert!(v.voxels.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn knee_toy_max_is_bone_mu() {
        let v = make_phantom(PhantomKind::KneeToy, 64, 1, &PhantomParams::new()).unwrap();
        let max = v.voxels.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 0.03f32);
        assert!(v.voxels.iter().all(|&x| x >= 0.0));
        // the joint gap leaves a bone-free band around z = 0
        let n = 64;
        let mid = n / 2;
        for x in 0..n {
            for y in 0..n {
                assert!(v.voxel(x, y, mid) < 0.03f32);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_phantom(PhantomKind::Cube, 0, 0, &PhantomParams::new()).is_err());
        assert!("wedge".parse::<PhantomKind>().is_err());
        assert!(make_phantom(PhantomKind::Cube, 8, 0, &params(&[("muu", 1.0)])).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join("radfield_phantom_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vol.radvol");
        let v = make_phantom(PhantomKind::Ellipsoids, 16, 3, &params(&[("spacing", 0.7)])).unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.dims, v.dims);
        assert_eq!(back.spacing, v.spacing);
        assert_eq!(back.voxels, v.voxels);
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let dir = std::env::temp_dir().join("radfield_phantom_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vol.radvol");
        let v = make_phantom(PhantomKind::Cube, 4, 0, &PhantomParams::new()).unwrap();
        save_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_volume(&path).is_err());
    }

    #[test]
    fn blob_length_must_match_dims() {
        let dir = std::env::temp_dir().join("radfield_phantom_test3");
        std::fs::create_dir_all(&dir).unwrap();

        let write_with_floats = |path: &Path, count: usize| {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(
                b"RADVOL 1\ndims 2 2 2\nspacing 1\ndtype f32le\nlayout x-fastest\ndata\n",
            );
            for i in 0..count {
                bytes.extend_from_slice(&(i as f32).to_le_bytes());
            }
            std::fs::write(path, bytes).unwrap();
        };

        let ok = dir.join("ok.radvol");
        write_with_floats(&ok, 8);
        assert!(load_volume(&ok).is_ok());

        let bad = dir.join("bad.radvol");
        write_with_floats(&bad, 7);
        assert!(load_volume(&bad).is_err());
    }

    #[test]
    fn trilinear_at_voxel_centers() {
        let v = make_phantom(
            PhantomKind::Cube,
            4,
            0,
            &params(&[("mu", 0.5), ("margin", 1.0)]),
        )
        .unwrap();
        // center of the volume is inside the filled cube
        assert!((v.sample_trilinear([0.0, 0.0, 0.0]) - 0.5).abs() < 1e-12);
        // far outside reads as zero
        assert_eq!(v.sample_trilinear([100.0, 0.0, 0.0]), 0.0);
    }
}
