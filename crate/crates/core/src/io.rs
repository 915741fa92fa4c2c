//! File formats shared across the pipeline.
//!
//! * 8-bit grayscale PNG read/write for radiographs and rendered views.
//! * A named-array container used by checkpoints and external
//!   feature-extractor weights: `MAGIC\n`, a decimal header-length line, a
//!   JSON header describing the arrays, then the concatenated f64
//!   little-endian blobs. Round-trips are bit-exact.
//! * FNV-1a hashing for provenance fields in manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write an 8-bit grayscale PNG. `pixels` is row-major, `h` rows of `w`.
pub fn write_gray_png(path: &Path, pixels: &[u8], w: usize, h: usize) -> Result<()> {
    assert_eq!(
        pixels.len(),
        w * h,
        "pixel buffer does not match dimensions"
    );
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(pixels)?;
    Ok(())
}

/// Read an 8-bit grayscale PNG back as (pixels, w, h).
pub fn read_gray_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit grayscale, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize))
}

/// FNV-1a over a byte slice, hex-encoded. Provenance fingerprint only.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h: u64 = 0xcbf29ce484222325;
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    Ok(format!("{h:016x}"))
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    shape: Vec<usize>,
    /// Offset into the blob, counted in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    magic: String,
    /// Arbitrary JSON metadata supplied by the caller.
    meta: serde_json::Value,
    arrays: BTreeMap<String, ArrayEntry>,
}

/// Named-array container. The blob layout follows sorted array names, so
/// identical contents always produce identical bytes.
pub struct ArrayContainer {
    pub meta: serde_json::Value,
    arrays: BTreeMap<String, Tensor>,
}

impl ArrayContainer {
    pub fn new(meta: serde_json::Value) -> Self {
        ArrayContainer {
            meta,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::format(format!("container is missing array `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn save(&self, path: &Path, magic: &str) -> Result<()> {
        let mut entries = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.arrays {
            entries.insert(
                name.clone(),
                ArrayEntry {
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                },
            );
            offset += t.len();
        }
        let header = ContainerHeader {
            magic: magic.to_string(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let header_json = serde_json::to_string(&header)?;

        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{magic}")?;
        writeln!(w, "{}", header_json.len())?;
        w.write_all(header_json.as_bytes())?;
        for t in self.arrays.values() {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, magic: &str) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut all = Vec::new();
        r.read_to_end(&mut all)?;

        let nl1 = find_newline(&all, 0)?;
        let got_magic = std::str::from_utf8(&all[..nl1])
            .map_err(|_| Error::format("container magic is not utf-8"))?;
        if got_magic != magic {
            return Err(Error::format(format!(
                "bad container magic: expected `{magic}`, got `{got_magic}`"
            )));
        }
        let nl2 = find_newline(&all, nl1 + 1)?;
        let header_len: usize = std::str::from_utf8(&all[nl1 + 1..nl2])
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format("bad container header length"))?;
        let header_start = nl2 + 1;
        let blob_start = header_start + header_len;
        if blob_start > all.len() {
            return Err(Error::format("container truncated before blob"));
        }
        let header: ContainerHeader = serde_json::from_slice(&all[header_start..blob_start])?;

        let blob = &all[blob_start..];
        let total: usize = header.arrays.values().map(|e| e.len).sum();
        if blob.len() != total * 8 {
            return Err(Error::format(format!(
                "container blob length {} does not match header total {}",
                blob.len(),
                total * 8
            )));
        }
        let mut arrays = BTreeMap::new();
        for (name, e) in header.arrays {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::format(format!("array `{name}` shape/len mismatch")));
            }
            let mut data = Vec::with_capacity(e.len);
            for i in 0..e.len {
                let at = (e.offset + i) * 8;
                let bytes: [u8; 8] = blob[at..at + 8].try_into().unwrap();
                data.push(f64::from_le_bytes(bytes));
            }
            arrays.insert(name, Tensor::new(e.shape, data));
        }
        Ok(ArrayContainer {
            meta: header.meta,
            arrays,
        })
    }
}

fn find_newline(bytes: &[u8], from: usize) -> Result<usize> {
    bytes[from..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| from + p)
        .ok_or_else(|| Error::format("container header truncated"))
}

/// Minimal CSV writer for loss histories and metric tables; values are
/// written with `{}` formatting (shortest round-trip f64).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join("radfield_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("arrays.bin");

        let mut c = ArrayContainer::new(serde_json::json!({"note": "test"}));
        c.insert(
            "b.second",
            Tensor::new(vec![2, 2], vec![1.5, -2.25, 1e-300, 3.0]),
        );
        c.insert(
            "a.first",
            Tensor::from_slice(&[0.1, 0.2, f64::MIN_POSITIVE]),
        );
        c.save(&path, "RFTEST1").unwrap();

        let back = ArrayContainer::load(&path, "RFTEST1").unwrap();
        assert_eq!(
            back.get("a.first").unwrap().data(),
            &[0.1, 0.2, f64::MIN_POSITIVE]
        );
        assert_eq!(back.get("b.second").unwrap().shape(), &[2, 2]);
        assert_eq!(back.meta["note"], "test");

        // identical content inserted in a different order -> identical bytes
        let path2 = dir.join("arrays2.bin");
        let mut c2 = ArrayContainer::new(serde_json::json!({"note": "test"}));
        c2.insert(
            "a.first",
            Tensor::from_slice(&[0.1, 0.2, f64::MIN_POSITIVE]),
        );
        c2.insert(
            "b.second",
            Tensor::new(vec![2, 2], vec![1.5, -2.25, 1e-300, 3.0]),
        );
        c2.save(&path2, "RFTEST1").unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn container_rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("radfield_io_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("arrays.bin");
        let c = ArrayContainer::new(serde_json::Value::Null);
        c.save(&path, "RFAAA1").unwrap();
        assert!(ArrayContainer::load(&path, "RFBBB1").is_err());
    }

    #[test]
    fn png_roundtrip() {
        let dir = std::env::temp_dir().join("radfield_io_test3");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.png");
        let pixels: Vec<u8> = (0..12 * 5).map(|i| (i * 7 % 256) as u8).collect();
        write_gray_png(&path, &pixels, 12, 5).unwrap();
        let (back, w, h) = read_gray_png(&path).unwrap();
        assert_eq!((w, h), (12, 5));
        assert_eq!(back, pixels);
    }

    #[test]
    fn fnv_is_stable() {
        // reference values from the FNV-1a definition
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex(b"a"), "af63dc4c8601ec8c");
    }
}
