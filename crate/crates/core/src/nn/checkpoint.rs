//! Versioned parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"PHYT0001"
//! u32 LE  manifest length in bytes
//! manifest: UTF-8 lines "name<TAB>f32<TAB>d0,d1,..."
//! blobs:    little-endian f32 values, tensors in manifest order
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PHYT0001";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

fn manifest_of<T: Scalar>(store: &ParamStore<T>) -> Vec<ManifestEntry> {
    store
        .iter()
        .map(|(_, n, t)| ManifestEntry { name: n.to_string(), dtype: "f32".into(), shape: t.shape().to_vec() })
        .collect()
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut manifest = String::new();
    for e in manifest_of(store) {
        let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        writeln!(manifest, "{}\t{}\t{}", e.name, e.dtype, dims.join(",")).unwrap();
    }
    let mut buf = Vec::with_capacity(16 + manifest.len() + 4 * store.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint into a store with matching names and shapes.
///
/// Any difference between the file's manifest and the model's parameters is
/// reported as a line-per-entry diff.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (entries, blob_start) = parse_header(&bytes)?;

    let want = manifest_of(store);
    let diff = manifest_diff(&want, &entries);
    if !diff.is_empty() {
        return Err(Error::CheckpointMismatch(diff));
    }
    let mut off = blob_start;
    for (e, id) in entries.iter().zip(store.ids().collect::<Vec<_>>()) {
        let n: usize = e.shape.iter().product();
        let end = off + 4 * n;
        if end > bytes.len() {
            return Err(Error::Data(format!("checkpoint truncated inside tensor {}", e.name)));
        }
        let data: Vec<T> = bytes[off..end]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        *store.get_mut(id) = Tensor::from_vec(&e.shape, data);
        off = end;
    }
    if off != bytes.len() {
        return Err(Error::Data(format!("checkpoint has {} trailing bytes", bytes.len() - off)));
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = fs::read(path)?;
    Ok(parse_header(&bytes)?.0)
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not a checkpoint: missing PHYT0001 header".into()));
    }
    let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if 12 + mlen > bytes.len() {
        return Err(Error::Data("checkpoint manifest truncated".into()));
    }
    let text = std::str::from_utf8(&bytes[12..12 + mlen]).map_err(|_| Error::Data("checkpoint manifest is not UTF-8".into()))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse { path: "<manifest>".into(), line: i + 1, reason: "expected name, dtype, shape".into() });
        }
        if parts[1] != "f32" {
            return Err(Error::Data(format!("unsupported dtype {} for {}", parts[1], parts[0])));
        }
        let shape = parts[2]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Parse { path: "<manifest>".into(), line: i + 1, reason: "bad shape".into() })?;
        entries.push(ManifestEntry { name: parts[0].into(), dtype: parts[1].into(), shape });
    }
    Ok((entries, 12 + mlen))
}

fn manifest_diff(model: &[ManifestEntry], file: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for m in model {
        match file.iter().find(|f| f.name == m.name) {
            None => writeln!(out, "- {} {:?} (missing from checkpoint)", m.name, m.shape).unwrap(),
            Some(f) if f.shape != m.shape => {
                writeln!(out, "~ {}: model {:?}, checkpoint {:?}", m.name, m.shape, f.shape).unwrap()
            }
            _ => {}
        }
    }
    for f in file {
        if !model.iter().any(|m| m.name == f.name) {
            writeln!(out, "+ {} {:?} (not in model)", f.name, f.shape).unwrap();
        }
    }
    if out.is_empty() && model.iter().map(|m| &m.name).ne(file.iter().map(|f| &f.name)) {
        out.push_str("parameter order differs\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mismatch_diff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut s = ParamStore::<f64>::new();
        s.add("a.w", Tensor::from_vec(&[2, 2], vec![1.5, -2.0, 0.25, 3.0]));
        s.add("a.b", Tensor::from_vec(&[2], vec![0.5, 0.125]));
        save(&s, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"PHYT0001");

        let mut t = ParamStore::<f32>::new();
        t.add("a.w", Tensor::zeros(&[2, 2]));
        t.add("a.b", Tensor::zeros(&[2]));
        load_into(&mut t, &path).unwrap();
        assert_eq!(t.get(t.id_of("a.w").unwrap()).data(), &[1.5, -2.0, 0.25, 3.0]);

        let mut bad = ParamStore::<f32>::new();
        bad.add("a.w", Tensor::zeros(&[4]));
        bad.add("c", Tensor::zeros(&[1]));
        let err = load_into(&mut bad, &path).unwrap_err().to_string();
        assert!(err.contains("~ a.w"), "{err}");
        assert!(err.contains("- c"), "{err}");
        assert!(err.contains("+ a.b"), "{err}");
    }
}
