//! Landmark geometry and mirrored-half image dissimilarity.
//!
//! Coordinates are in pixels with `y` growing downward. Angles are folded
//! into `[0, 90]` degrees so they measure deviation magnitude only.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Smallest accepted side of the aligned crop, in pixels.
pub const MIN_CROP_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Four facial landmarks; the left eye is the one with smaller image `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub left_eye: Point,
    pub right_eye: Point,
    pub nasion: Point,
    pub subnasale: Point,
    /// `(width, height)` of the annotated image.
    pub image_size: Option<(usize, usize)>,
}

impl LandmarkSet {
    pub fn new(left_eye: Point, right_eye: Point, nasion: Point, subnasale: Point, image_size: Option<(usize, usize)>) -> Result<Self> {
        let set = Self {
            left_eye,
            right_eye,
            nasion,
            subnasale,
            image_size,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let points = [self.left_eye, self.right_eye, self.nasion, self.subnasale];
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(AuditError::Validation("landmark coordinates must be finite".into()));
        }
        if self.left_eye.x >= self.right_eye.x {
            return Err(AuditError::Validation(format!(
                "left eye x ({}) must be smaller than right eye x ({})",
                self.left_eye.x, self.right_eye.x
            )));
        }
        if let Some((w, h)) = self.image_size {
            if points
                .iter()
                .any(|p| p.x < 0.0 || p.y < 0.0 || p.x > w as f64 || p.y > h as f64)
            {
                return Err(AuditError::Validation(format!("landmark outside the {w}×{h} image")));
            }
        }
        Ok(())
    }
}

fn folded_angle(along: f64, across: f64, what: &str) -> Result<f64> {
    if along == 0.0 && across == 0.0 {
        return Err(AuditError::Degenerate(format!("{what} points coincide")));
    }
    Ok(across.abs().atan2(along.abs()).to_degrees())
}

/// Angle between the eye line and the horizontal axis.
pub fn eye_level_deviation(landmarks: &LandmarkSet) -> Result<f64> {
    let dx = landmarks.right_eye.x - landmarks.left_eye.x;
    let dy = landmarks.right_eye.y - landmarks.left_eye.y;
    folded_angle(dx, dy, "eye center")
}

/// Angle between the nasion–subnasale line and the vertical axis.
pub fn midline_deviation(landmarks: &LandmarkSet) -> Result<f64> {
    let dx = landmarks.subnasale.x - landmarks.nasion.x;
    let dy = landmarks.subnasale.y - landmarks.nasion.y;
    folded_angle(dy, dx, "nose bridge")
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(AuditError::Domain(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(col, row));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Bilinear value at continuous position `(x, y)`; pixel `(i, j)` covers
    /// `[i, i+1) × [j, j+1)` and its value sits at the center.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
        let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Decodes an 8-bit grayscale PGM file.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let reader = image::ImageReader::open(path.as_ref())?.with_guessed_format()?;
    let decoded = reader.decode().map_err(|e| AuditError::Image(e.to_string()))?;
    let luma = decoded.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::new(
        w as usize,
        h as usize,
        luma.into_raw().into_iter().map(f64::from).collect(),
    )
}

/// Mean absolute difference between the mirrored halves of an eye-aligned
/// square crop, divided by the crop's intensity range.
///
/// The crop is centered between the eyes with side twice the inter-ocular
/// distance, shrunk until the rotated square fits inside the image.
pub fn mirror_dissimilarity(image: &GrayImage, landmarks: &LandmarkSet) -> Result<f64> {
    let (l, r) = (landmarks.left_eye, landmarks.right_eye);
    let (dx, dy) = (r.x - l.x, r.y - l.y);
    let iod = dx.hypot(dy);
    if iod == 0.0 {
        return Err(AuditError::Degenerate("eye center points coincide".into()));
    }
    let (cos, sin) = (dx / iod, dy / iod);
    let (cx, cy) = ((l.x + r.x) / 2.0, (l.y + r.y) / 2.0);
    let room = cx.min(image.width as f64 - cx).min(cy).min(image.height as f64 - cy);
    let half = iod.min(room / (cos.abs() + sin.abs())).floor().max(0.0) as usize;
    if 2 * half < MIN_CROP_SIDE {
        return Err(AuditError::InsufficientData(format!(
            "aligned crop of side {} is below {MIN_CROP_SIDE} pixels",
            2 * half
        )));
    }
    let to_image = |u: f64, v: f64| (cx + u * cos - v * sin, cy + u * sin + v * cos);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut total = 0.0;
    for row in 0..2 * half {
        let v = row as f64 + 0.5 - half as f64;
        for t in 0..half {
            let u = t as f64 + 0.5;
            let (ax, ay) = to_image(-u, v);
            let (bx, by) = to_image(u, v);
            let (a, b) = (image.sample(ax, ay), image.sample(bx, by));
            lo = lo.min(a).min(b);
            hi = hi.max(a).max(b);
            total += (a - b).abs();
        }
    }
    let range = hi - lo;
    if range == 0.0 {
        return Ok(0.0);
    }
    Ok((total / (2 * half * half) as f64 / range).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryRecord {
    pub sample_id: String,
    pub eye_level_deg: f64,
    pub midline_deg: f64,
    pub mirror_dissimilarity: Option<f64>,
    pub lpips: Option<f64>,
    pub volume_diff: Option<f64>,
}

/// One row of the landmark table; `lpips` and `volume_diff` are optional
/// precomputed columns passed through unchanged.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LandmarkRow {
    pub sample_id: String,
    pub lx: f64,
    pub ly: f64,
    pub rx: f64,
    pub ry: f64,
    pub nx: f64,
    pub ny: f64,
    pub sx: f64,
    pub sy: f64,
    #[serde(default)]
    pub lpips: Option<f64>,
    #[serde(default)]
    pub volume_diff: Option<f64>,
}

impl LandmarkRow {
    pub fn landmarks(&self, image_size: Option<(usize, usize)>) -> Result<LandmarkSet> {
        LandmarkSet::new(
            Point::new(self.lx, self.ly),
            Point::new(self.rx, self.ry),
            Point::new(self.nx, self.ny),
            Point::new(self.sx, self.sy),
            image_size,
        )
        .map_err(|e| AuditError::Validation(format!("sample `{}`: {e}", self.sample_id)))
    }
}

pub fn read_landmarks<R: Read>(reader: R) -> Result<Vec<LandmarkRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for column in ["sample_id", "lx", "ly", "rx", "ry", "nx", "ny", "sx", "sy"] {
        if !headers.iter().any(|h| h == column) {
            return Err(AuditError::MissingColumn(column.into()));
        }
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| AuditError::Parse {
                row: i + 1,
                column: String::new(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Angles for one sample, plus the image metric when an image is supplied.
pub fn symmetry_record(row: &LandmarkRow, image: Option<&GrayImage>) -> Result<SymmetryRecord> {
    let landmarks = row.landmarks(image.map(|i| (i.width, i.height)))?;
    Ok(SymmetryRecord {
        sample_id: row.sample_id.clone(),
        eye_level_deg: eye_level_deviation(&landmarks)?,
        midline_deg: midline_deviation(&landmarks)?,
        mirror_dissimilarity: image.map(|img| mirror_dissimilarity(img, &landmarks)).transpose()?,
        lpips: row.lpips,
        volume_diff: row.volume_diff,
    })
}

pub fn write_symmetry_csv<W: Write>(records: &[SymmetryRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "sample_id",
        "eye_level_deg",
        "midline_deg",
        "mirror_dissimilarity",
        "lpips",
        "volume_diff",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.sample_id.clone(),
            r.eye_level_deg.to_string(),
            r.midline_deg.to_string(),
            opt(r.mirror_dissimilarity),
            opt(r.lpips),
            opt(r.volume_diff),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eyes(l: (f64, f64), r: (f64, f64)) -> LandmarkSet {
        LandmarkSet {
            left_eye: Point::new(l.0, l.1),
            right_eye: Point::new(r.0, r.1),
            nasion: Point::new(0.0, 0.0),
            subnasale: Point::new(0.0, 1.0),
            image_size: None,
        }
    }

    fn nose(n: (f64, f64), s: (f64, f64)) -> LandmarkSet {
        LandmarkSet {
            nasion: Point::new(n.0, n.1),
            subnasale: Point::new(s.0, s.1),
            ..eyes((0.0, 0.0), (1.0, 0.0))
        }
    }

    #[test]
    fn eye_level_examples() {
        assert_eq!(eye_level_deviation(&eyes((0.0, 0.0), (10.0, 0.0))).unwrap(), 0.0);
        assert!((eye_level_deviation(&eyes((0.0, 0.0), (10.0, 10.0))).unwrap() - 45.0).abs() < 1e-12);
        assert!((eye_level_deviation(&eyes((0.0, 0.0), (3f64.sqrt(), 1.0))).unwrap() - 30.0).abs() < 1e-12);
        assert_eq!(eye_level_deviation(&eyes((2.0, 0.0), (2.0, 5.0))).unwrap(), 90.0);
        assert!(matches!(
            eye_level_deviation(&eyes((1.0, 1.0), (1.0, 1.0))),
            Err(AuditError::Degenerate(_))
        ));
    }

    #[test]
    fn midline_examples() {
        assert_eq!(midline_deviation(&nose((5.0, 2.0), (5.0, 8.0))).unwrap(), 0.0);
        assert!((midline_deviation(&nose((0.0, 0.0), (6.0, 6.0))).unwrap() - 45.0).abs() < 1e-12);
        assert!(midline_deviation(&nose((3.0, 3.0), (3.0, 3.0))).is_err());
    }

    #[test]
    fn midline_rotation_equivariance() {
        let (n, s) = ((4.0, 1.0), (4.0, 9.0));
        let (mx, my) = (4.0, 5.0);
        for deg in [0.0, 5.0, 17.5, 33.0, 60.0, 89.0] {
            let t: f64 = f64::to_radians(deg);
            let rot = |p: (f64, f64)| {
                let (x, y) = (p.0 - mx, p.1 - my);
                (mx + x * t.cos() - y * t.sin(), my + x * t.sin() + y * t.cos())
            };
            let got = midline_deviation(&nose(rot(n), rot(s))).unwrap();
            assert!((got - deg).abs() < 1e-9, "{deg}: {got}");
        }
    }

    #[test]
    fn landmark_validation() {
        let p = Point::new;
        assert!(LandmarkSet::new(p(5.0, 0.0), p(1.0, 0.0), p(0.0, 0.0), p(0.0, 1.0), None).is_err());
        assert!(LandmarkSet::new(p(1.0, 0.0), p(5.0, 0.0), p(0.0, 0.0), p(0.0, 1.0), Some((4, 4))).is_err());
        assert!(LandmarkSet::new(p(1.0, f64::NAN), p(5.0, 0.0), p(0.0, 0.0), p(0.0, 1.0), None).is_err());
        assert!(LandmarkSet::new(p(1.0, 0.0), p(5.0, 0.0), p(0.0, 0.0), p(0.0, 1.0), Some((10, 10))).is_ok());
    }

    fn face(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> GrayImage {
        GrayImage::from_fn(w, h, f).unwrap()
    }

    #[test]
    fn symmetric_image_scores_zero() {
        // Symmetric about x = 20.
        let img = face(40, 40, |c, r| ((c as f64 + 0.5 - 20.0).abs() * 3.0 + r as f64).sin());
        let lm = eyes((12.0, 20.0), (28.0, 20.0));
        assert!(mirror_dissimilarity(&img, &lm).unwrap() < 1e-12);
    }

    #[test]
    fn split_image_scores_one() {
        let img = face(40, 40, |c, _| if c < 20 { 0.0 } else { 1.0 });
        let lm = eyes((12.0, 20.0), (28.0, 20.0));
        assert!((mirror_dissimilarity(&img, &lm).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_matches_enumeration() {
        let block = 3;
        let img = face(50, 50, |c, r| ((c / block + r / block) % 2) as f64 * 200.0 + 10.0);
        // Eye midpoint at (25, 25), inter-ocular distance 10 → crop half-width 10.
        let lm = eyes((20.0, 25.0), (30.0, 25.0));
        let half = 10usize;
        let mut total = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in 25 - half..25 + half {
            for t in 0..half {
                let (a, b) = (img.get(24 - t, row), img.get(25 + t, row));
                lo = lo.min(a).min(b);
                hi = hi.max(a).max(b);
                total += (a - b).abs();
            }
        }
        let expect = total / (2 * half * half) as f64 / (hi - lo);
        let got = mirror_dissimilarity(&img, &lm).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!(expect > 0.0 && expect < 1.0);
    }

    #[test]
    fn inversion_invariance_and_small_crop() {
        let img = face(60, 60, |c, r| ((c * 7 + r * 13) % 17) as f64);
        let inv = GrayImage::new(60, 60, img.pixels.iter().map(|v| 255.0 - v).collect()).unwrap();
        let lm = eyes((22.0, 28.0), (37.0, 31.0));
        let a = mirror_dissimilarity(&img, &lm).unwrap();
        assert!((a - mirror_dissimilarity(&inv, &lm).unwrap()).abs() < 1e-12);
        let tiny = eyes((1.0, 2.0), (3.0, 2.0));
        assert!(matches!(
            mirror_dissimilarity(&img, &tiny),
            Err(AuditError::InsufficientData(_))
        ));
    }

    #[test]
    fn landmark_csv_round_trip() {
        let csv = "sample_id,lx,ly,rx,ry,nx,ny,sx,sy,lpips\na,0,0,10,10,5,2,5,8,0.25\nb,0,0,10,0,0,0,6,6,\n";
        let rows = read_landmarks(csv.as_bytes()).unwrap();
        let recs: Vec<SymmetryRecord> = rows.iter().map(|r| symmetry_record(r, None).unwrap()).collect();
        assert!((recs[0].eye_level_deg - 45.0).abs() < 1e-12);
        assert_eq!(recs[0].lpips, Some(0.25));
        assert_eq!(recs[1].lpips, None);
        assert!((recs[1].midline_deg - 45.0).abs() < 1e-12);
        let mut out = Vec::new();
        write_symmetry_csv(&recs, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("sample_id,eye_level_deg"));
        assert!(matches!(
            read_landmarks("sample_id,lx\n".as_bytes()),
            Err(AuditError::MissingColumn(_))
        ));
    }

    #[test]
    fn pgm_decoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend([0u8, 10, 20, 30, 40, 255]);
        std::fs::write(&path, bytes).unwrap();
        let img = load_pgm(&path).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.get(2, 1), 255.0);
        assert_eq!(img.get(1, 0), 10.0);
    }
}
