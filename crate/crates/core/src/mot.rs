//! MOTChallenge text rows: `frame,id,left,top,width,height,conf,class,visibility`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotRow {
    /// 1-based.
    pub frame: u32,
    pub id: u32,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
    pub class: i32,
    pub visibility: f64,
}

impl MotRow {
    pub fn center(&self) -> (f64, f64) {
        (self.left + 0.5 * self.width, self.top + 0.5 * self.height)
    }

    pub fn iou(&self, o: &MotRow) -> f64 {
        iou([self.left, self.top, self.width, self.height], [o.left, o.top, o.width, o.height])
    }
}

/// Intersection over union of `(left, top, width, height)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let ih = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

pub fn format_row(r: &MotRow) -> String {
    format!(
        "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{},{:.2}",
        r.frame, r.id, r.left, r.top, r.width, r.height, r.conf, r.class, r.visibility
    )
}

pub fn format_rows(rows: &[MotRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{}", format_row(r));
    }
    s
}

pub fn write_mot(rows: &[MotRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, format_rows(rows))?;
    Ok(())
}

/// Non-fatal oddities found while parsing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotWarning {
    pub line: usize,
    pub message: String,
}

/// Parses MOT text; `origin` only labels errors.
pub fn parse_mot(text: &str, origin: &Path) -> Result<(Vec<MotRow>, Vec<MotWarning>)> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut last_frame = 0;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse { path: origin.display().to_string(), line: lineno, reason };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", f.len())));
        }
        let int = |i: usize, name: &str| f[i].parse::<i64>().map_err(|_| err(format!("{name} {:?} is not an integer", f[i])));
        let real = |i: usize, name: &str| {
            f[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("{name} {:?} is not a finite number", f[i])))
        };
        let frame = int(0, "frame")?;
        let id = int(1, "id")?;
        if frame < 1 || frame > u32::MAX as i64 {
            return Err(err(format!("frame {frame} must be a positive integer")));
        }
        if id < 1 || id > u32::MAX as i64 {
            return Err(err(format!("id {id} must be a positive integer")));
        }
        let class = int(7, "class")?;
        let row = MotRow {
            frame: frame as u32,
            id: id as u32,
            left: real(2, "left")?,
            top: real(3, "top")?,
            width: real(4, "width")?,
            height: real(5, "height")?,
            conf: real(6, "conf")?,
            class: i32::try_from(class).map_err(|_| err(format!("class {class} out of range")))?,
            visibility: real(8, "visibility")?,
        };
        if row.width <= 0.0 || row.height <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        if row.frame < last_frame {
            warnings.push(MotWarning { line: lineno, message: format!("frame {} follows frame {last_frame}", row.frame) });
        }
        last_frame = row.frame;
        rows.push(row);
    }
    Ok((rows, warnings))
}

/// Reads a MOT file, logging any warnings.
pub fn read_mot(path: &Path) -> Result<Vec<MotRow>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    let (rows, warnings) = parse_mot(&text, path)?;
    for w in &warnings {
        log::warn!("{}:{}: {}", path.display(), w.line, w.message);
    }
    Ok(rows)
}

/// Rows of one frame.
pub fn rows_in_frame(rows: &[MotRow], frame: u32) -> impl Iterator<Item = &MotRow> {
    rows.iter().filter(move |r| r.frame == frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("t.txt")
    }

    #[test]
    fn serializes_fixed_point() {
        let r = MotRow { frame: 1, id: 5, left: 10.0, top: 20.0, width: 8.0, height: 6.0, conf: 1.0, class: 2, visibility: 1.0 };
        assert_eq!(format_row(&r), "1,5,10.00,20.00,8.00,6.00,1.00,2,1.00");
        assert_eq!(parse_mot(&format_rows(&[r]), p()).unwrap().0, vec![r]);
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.txt");
        write_mot(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(read_mot(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_cite_line_numbers() {
        let text = "1,1,0,0,5,5,1,0,1\n1,2,0,0,x,5,1,0,1\n";
        match parse_mot(text, p()) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("width"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_mot("1,1,0,0\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_mot("0,1,0,0,5,5,1,0,1\n", p()), Err(Error::Parse { .. })));
        assert!(matches!(read_mot(Path::new("/nonexistent/gt.txt")), Err(Error::NotFound(_))));
    }

    #[test]
    fn out_of_order_frames_warn() {
        let (rows, w) = parse_mot("2,1,0,0,5,5,1,0,1\n1,1,0,0,5,5,1,0,1\n", p()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(w, vec![MotWarning { line: 2, message: "frame 1 follows frame 2".into() }]);
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [2.0, 0.0, 2.0, 2.0]), 0.0);
        assert!((iou([0.0, 0.0, 2.0, 2.0], [1.0, 0.0, 2.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
    }

    fn row() -> impl Strategy<Value = MotRow> {
        (1u32..500, 1u32..100, -5000i32..50000, -5000i32..50000, 1i32..10000, 1i32..10000, 0i32..=100, -1i32..30, 0i32..=100).prop_map(
            |(frame, id, l, t, w, h, c, class, v)| MotRow {
                frame,
                id,
                left: l as f64 / 100.0,
                top: t as f64 / 100.0,
                width: w as f64 / 100.0,
                height: h as f64 / 100.0,
                conf: c as f64 / 100.0,
                class,
                visibility: v as f64 / 100.0,
            },
        )
    }

    proptest! {
        #[test]
        fn random_rows_round_trip(rows in proptest::collection::vec(row(), 100)) {
            let (back, _) = parse_mot(&format_rows(&rows), p()).unwrap();
            prop_assert_eq!(back, rows);
        }
    }
}
