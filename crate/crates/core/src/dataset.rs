//! Sequence directories: `img1/NNNNNN.png`, `gt/gt.txt`, `seqinfo.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::mot::{read_mot, write_mot, MotRow};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqInfo {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub framerate: u32,
}

impl SeqInfo {
    pub fn to_text(&self) -> String {
        format!("width={}\nheight={}\nlength={}\nframerate={}\n", self.width, self.height, self.length, self.framerate)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let (mut width, mut height, mut length, mut framerate) = (None, None, None, None);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
                continue;
            }
            let err = |reason: String| Error::Parse { path: origin.display().to_string(), line: n + 1, reason };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let num = |v: &str| v.trim().parse::<usize>().map_err(|_| err(format!("{} must be a non-negative integer", k.trim())));
            match k.trim().to_ascii_lowercase().as_str() {
                "width" | "imwidth" => width = Some(num(v)?),
                "height" | "imheight" => height = Some(num(v)?),
                "length" | "seqlength" => length = Some(num(v)?),
                "framerate" | "framerate_" => framerate = Some(num(v)? as u32),
                _ => {}
            }
        }
        let need = |v: Option<usize>, k: &str| v.ok_or_else(|| Error::Data(format!("{}: missing {k}", origin.display())));
        Ok(Self { width: need(width, "width")?, height: need(height, "height")?, length: need(length, "length")?, framerate: framerate.unwrap_or(25) })
    }
}

/// A sequence loaded from disk.
#[derive(Clone, Debug)]
pub struct SequenceDir {
    pub path: PathBuf,
    pub info: SeqInfo,
    pub frames: Vec<RgbImage>,
    pub gt: Option<Vec<MotRow>>,
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("img1").join(format!("{index:06}.png"))
}

pub fn write_sequence(dir: &Path, frames: &[RgbImage], gt: &[MotRow], framerate: u32) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::Data("refusing to write a sequence without frames".into()))?;
    fs::create_dir_all(dir.join("img1"))?;
    for (i, f) in frames.iter().enumerate() {
        f.save(frame_path(dir, i + 1))?;
    }
    write_mot(gt, &dir.join("gt").join("gt.txt"))?;
    let info = SeqInfo { width: first.width() as usize, height: first.height() as usize, length: frames.len(), framerate };
    fs::write(dir.join("seqinfo.txt"), info.to_text())?;
    Ok(())
}

/// Frame file names in `img1`, in order.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let img = dir.join("img1");
    if !img.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> =
        fs::read_dir(&img)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))).collect();
    files.sort();
    Ok(files)
}

pub fn read_sequence(dir: &Path) -> Result<SequenceDir> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let files = list_frames(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no frames found", dir.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        frames.push(image::open(f)?.to_rgb8());
    }
    let (w, h) = frames[0].dimensions();
    if let Some(bad) = files.iter().zip(&frames).find(|(_, f)| f.dimensions() != (w, h)) {
        return Err(Error::Data(format!("{}: frame size {:?} differs from {:?}", bad.0.display(), bad.1.dimensions(), (w, h))));
    }
    let info_path = dir.join("seqinfo.txt");
    let info = if info_path.is_file() {
        SeqInfo::parse(&fs::read_to_string(&info_path)?, &info_path)?
    } else {
        SeqInfo { width: w as usize, height: h as usize, length: frames.len(), framerate: 25 }
    };
    if (info.width, info.height) != (w as usize, h as usize) {
        return Err(Error::Data(format!("{}: seqinfo size {}x{} but frames are {w}x{h}", dir.display(), info.width, info.height)));
    }
    let gt_path = dir.join("gt").join("gt.txt");
    let gt = if gt_path.is_file() { Some(read_mot(&gt_path)?) } else { None };
    Ok(SequenceDir { path: dir.to_path_buf(), info, frames, gt })
}

/// Sequence directories directly under `root` (or `root` itself).
pub fn find_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    if root.join("img1").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("img1").is_dir()).collect();
    out.sort();
    Ok(out)
}

/// `[3, H, W]` tensor in `[0, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::of(raw[p * 3 + c] as f64 / 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{synth_sequence, SequenceConfig};

    #[test]
    fn layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synth_sequence(&SequenceConfig { num_frames: 10, seed: 2, ..SequenceConfig::default() }).unwrap();
        write_sequence(dir.path(), &seq.frames, &seq.gt, 25).unwrap();
        for i in 1..=10 {
            assert!(frame_path(dir.path(), i).is_file());
        }
        assert!(dir.path().join("gt/gt.txt").is_file());
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back.info, SeqInfo { width: 160, height: 96, length: 10, framerate: 25 });
        assert_eq!(back.frames, seq.frames);
        assert_eq!(back.gt.unwrap().len(), seq.gt.len());
    }

    #[test]
    fn empty_directory_has_no_frames() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_sequence(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no frames found"));
        assert!(matches!(read_sequence(&dir.path().join("missing")), Err(Error::NotFound(_))));
    }

    #[test]
    fn tensor_layout() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([x as u8 * 10, y as u8 * 20, 255]));
        let t = image_to_tensor::<f64>(&img);
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.at3(0, 1, 2), 20.0 / 255.0);
        assert_eq!(t.at3(1, 1, 0), 20.0 / 255.0);
        assert_eq!(t.at3(2, 0, 0), 1.0);
    }
}
