//! Image containers, the pinhole camera model, and the on-disk frame formats
//! (binary PGM/PPM).
//!
//! Pixel convention: pixel `(x, y)` sits at projection coordinate
//! `(x as f64, y as f64)`, i.e. pixel centers lie on the integer lattice and
//! a point projecting to exactly `(cx, cy)` lands on the principal pixel.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::RigidTransform;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("size mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    SizeMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("data length {len} does not match {w}x{h}")]
    BadDataLength { len: usize, w: usize, h: usize },
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("malformed {format} file: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 2-D storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BadDataLength {
                len: data.len(),
                w: width,
                h: height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Row-major iteration over `(x, y, value)`.
    pub fn iter_pixels(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i % self.width, i / self.width, v))
    }
}

impl Grid<f64> {
    /// Exact gradient of the bilinear interpolant at `(u, v)`; `None`
    /// outside the interpolation domain. Using this for optimization keeps
    /// the Jacobians consistent with [`Grid::sample_bilinear`].
    pub fn sample_bilinear_gradient(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let x0 = u.floor();
        let y0 = v.floor();
        let x0i = x0 as usize;
        let y0i = y0 as usize;
        if x0i + 1 >= self.width || y0i + 1 >= self.height {
            return None;
        }
        let fx = u - x0;
        let fy = v - y0;
        let p00 = *self.get(x0i, y0i);
        let p10 = *self.get(x0i + 1, y0i);
        let p01 = *self.get(x0i, y0i + 1);
        let p11 = *self.get(x0i + 1, y0i + 1);
        Some((
            (p10 - p00) * (1.0 - fy) + (p11 - p01) * fy,
            (p01 - p00) * (1.0 - fx) + (p11 - p10) * fx,
        ))
    }

    /// Bilinear sample; `None` outside the interpolation domain.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let x0 = u.floor();
        let y0 = v.floor();
        let x0i = x0 as usize;
        let y0i = y0 as usize;
        if x0i + 1 >= self.width || y0i + 1 >= self.height {
            return None;
        }
        let fx = u - x0;
        let fy = v - y0;
        let p00 = *self.get(x0i, y0i);
        let p10 = *self.get(x0i + 1, y0i);
        let p01 = *self.get(x0i, y0i + 1);
        let p11 = *self.get(x0i + 1, y0i + 1);
        Some(p00 * (1.0 - fx) * (1.0 - fy) + p10 * fx * (1.0 - fy) + p01 * (1.0 - fx) * fy + p11 * fx * fy)
    }
}

impl Grid<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, ImageError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(ImageError::BadIntrinsics("focal lengths must be positive".into()));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(ImageError::BadIntrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Project a camera-frame point; `None` when at or behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Back-project pixel `(x, y)` at the given depth (camera-frame z).
    pub fn backproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (x - self.cx) / self.fx * depth,
            (y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

pub const DEPTH_MIN_M: f64 = 0.1;
pub const DEPTH_MAX_M: f64 = 10.0;

/// One RGB-D input frame. Depth of 0 or NaN marks invalid pixels.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub depth: Grid<f64>,
    pub intensity: Grid<f64>,
    pub color: Grid<[f64; 3]>,
    pub intr: CameraIntrinsics,
    pub index: u64,
}

/// Rec. 601 luma.
pub fn luma(rgb: &[f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

impl RgbdFrame {
    pub fn depth_valid(d: f64) -> bool {
        d.is_finite() && d > DEPTH_MIN_M && d < DEPTH_MAX_M
    }

    pub fn valid_depth_at(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.depth.get(x, y);
        Self::depth_valid(d).then_some(d)
    }

    /// Per-pixel camera-frame normals from depth differences, oriented toward
    /// the camera. Central differences where both neighbours are valid, else
    /// one-sided; `None` where no valid pair exists or the surface is wildly
    /// slanted (neighbour depth jump above `max_jump`).
    pub fn compute_normals(&self, max_jump: f64) -> Grid<Option<Vector3<f64>>> {
        let w = self.depth.width();
        let h = self.depth.height();
        let mut normals = Grid::new(w, h, None);
        let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
            self.valid_depth_at(x, y)
                .map(|d| self.intr.backproject(x as f64, y as f64, d))
        };
        for y in 0..h {
            for x in 0..w {
                let Some(center) = point(x, y) else { continue };
                let du = diff_along(
                    x.checked_sub(1).and_then(|xm| point(xm, y)),
                    center,
                    (x + 1 < w).then(|| point(x + 1, y)).flatten(),
                    max_jump,
                );
                let dv = diff_along(
                    y.checked_sub(1).and_then(|ym| point(x, ym)),
                    center,
                    (y + 1 < h).then(|| point(x, y + 1)).flatten(),
                    max_jump,
                );
                let (Some(du), Some(dv)) = (du, dv) else { continue };
                let n = du.cross(&dv);
                let norm = n.norm();
                if norm < 1e-12 {
                    continue;
                }
                let mut n = n / norm;
                if n.dot(&center) > 0.0 {
                    n = -n;
                }
                normals.set(x, y, Some(n));
            }
        }
        normals
    }
}

fn diff_along(
    prev: Option<Vector3<f64>>,
    center: Vector3<f64>,
    next: Option<Vector3<f64>>,
    max_jump: f64,
) -> Option<Vector3<f64>> {
    let ok = |a: &Vector3<f64>, b: &Vector3<f64>| (a.z - b.z).abs() <= max_jump;
    match (prev, next) {
        (Some(p), Some(n)) if ok(&p, &center) && ok(&n, &center) => Some((n - p) / 2.0),
        (_, Some(n)) if ok(&n, &center) => Some(n - center),
        (Some(p), _) if ok(&p, &center) => Some(center - p),
        _ => None,
    }
}

// --- Binary PGM / PPM ------------------------------------------------------
//
// Depth is stored as 16-bit PGM in 0.1 mm units (big-endian, PGM standard);
// values beyond the representable 6.5535 m are written as 0 (invalid).
// Intensity and masks are 8-bit PGM, color is 8-bit PPM. Soft detector masks
// are 16-bit PGM with gray/65535 as the probability.

pub const DEPTH_UNIT_M: f64 = 1e-4;

fn write_pnm_header<W: Write>(mut w: W, magic: &str, width: usize, height: usize, maxval: u32) -> std::io::Result<()> {
    write!(w, "{magic}\n{width} {height}\n{maxval}\n")
}

struct PnmHeader {
    magic: String,
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], format: &'static str) -> Result<PnmHeader, ImageError> {
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 {
        if pos >= bytes.len() {
            return Err(ImageError::Malformed {
                format,
                reason: "truncated header".into(),
            });
        }
        let b = bytes[pos];
        if b == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
    }
    // Exactly one whitespace byte separates the maxval from the raster.
    pos += 1;
    let parse = |s: &str| -> Result<usize, ImageError> {
        s.parse().map_err(|_| ImageError::Malformed {
            format,
            reason: format!("bad header field {s:?}"),
        })
    };
    Ok(PnmHeader {
        magic: fields[0].clone(),
        width: parse(&fields[1])?,
        height: parse(&fields[2])?,
        maxval: parse(&fields[3])? as u32,
        data_offset: pos,
    })
}

pub fn write_pgm16(path: &Path, grid: &Grid<u16>) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(grid.data().len() * 2 + 32);
    write_pnm_header(&mut buf, "P5", grid.width(), grid.height(), 65535)?;
    for v in grid.data() {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<Grid<u16>, ImageError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let hdr = parse_pnm_header(&bytes, "PGM")?;
    if hdr.magic != "P5" || hdr.maxval != 65535 {
        return Err(ImageError::Malformed {
            format: "PGM",
            reason: format!("expected P5 maxval 65535, got {} {}", hdr.magic, hdr.maxval),
        });
    }
    let n = hdr.width * hdr.height;
    let raster = &bytes[hdr.data_offset..];
    if raster.len() < 2 * n {
        return Err(ImageError::Malformed {
            format: "PGM",
            reason: "truncated raster".into(),
        });
    }
    let data = (0..n)
        .map(|i| u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]))
        .collect();
    Grid::from_vec(hdr.width, hdr.height, data)
}

pub fn write_pgm8(path: &Path, grid: &Grid<u8>) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(grid.data().len() + 32);
    write_pnm_header(&mut buf, "P5", grid.width(), grid.height(), 255)?;
    buf.extend_from_slice(grid.data());
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm8(path: &Path) -> Result<Grid<u8>, ImageError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let hdr = parse_pnm_header(&bytes, "PGM")?;
    if hdr.magic != "P5" || hdr.maxval != 255 {
        return Err(ImageError::Malformed {
            format: "PGM",
            reason: format!("expected P5 maxval 255, got {} {}", hdr.magic, hdr.maxval),
        });
    }
    let n = hdr.width * hdr.height;
    let raster = &bytes[hdr.data_offset..];
    if raster.len() < n {
        return Err(ImageError::Malformed {
            format: "PGM",
            reason: "truncated raster".into(),
        });
    }
    Grid::from_vec(hdr.width, hdr.height, raster[..n].to_vec())
}

pub fn write_ppm8(path: &Path, grid: &Grid<[u8; 3]>) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(grid.data().len() * 3 + 32);
    write_pnm_header(&mut buf, "P6", grid.width(), grid.height(), 255)?;
    for px in grid.data() {
        buf.extend_from_slice(px);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm8(path: &Path) -> Result<Grid<[u8; 3]>, ImageError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let hdr = parse_pnm_header(&bytes, "PPM")?;
    if hdr.magic != "P6" || hdr.maxval != 255 {
        return Err(ImageError::Malformed {
            format: "PPM",
            reason: format!("expected P6 maxval 255, got {} {}", hdr.magic, hdr.maxval),
        });
    }
    let n = hdr.width * hdr.height;
    let raster = &bytes[hdr.data_offset..];
    if raster.len() < 3 * n {
        return Err(ImageError::Malformed {
            format: "PPM",
            reason: "truncated raster".into(),
        });
    }
    let data = (0..n)
        .map(|i| [raster[3 * i], raster[3 * i + 1], raster[3 * i + 2]])
        .collect();
    Grid::from_vec(hdr.width, hdr.height, data)
}

pub fn depth_to_u16(depth: &Grid<f64>) -> Grid<u16> {
    let data = depth
        .data()
        .iter()
        .map(|&d| {
            if !d.is_finite() || d <= 0.0 {
                return 0;
            }
            let units = (d / DEPTH_UNIT_M).round();
            if units > u16::MAX as f64 {
                0
            } else {
                units as u16
            }
        })
        .collect();
    Grid::from_vec(depth.width(), depth.height(), data).expect("same size")
}

pub fn depth_from_u16(raw: &Grid<u16>) -> Grid<f64> {
    let data = raw.data().iter().map(|&v| v as f64 * DEPTH_UNIT_M).collect();
    Grid::from_vec(raw.width(), raw.height(), data).expect("same size")
}

/// World-frame point cloud of all valid depth pixels.
pub fn backproject_frame(frame: &RgbdFrame, camera_pose: &RigidTransform) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for (x, y, &d) in frame.depth.iter_pixels() {
        if RgbdFrame::depth_valid(d) {
            pts.push(camera_pose.apply(&frame.intr.backproject(x as f64, y as f64, d)));
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trips_pgm16() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let grid = Grid::from_vec(3, 2, vec![0u16, 1, 700, 65535, 12345, 9]).unwrap();
        write_pgm16(&path, &grid).unwrap();
        assert_eq!(read_pgm16(&path).unwrap(), grid);
    }

    #[test]
    fn depth_quantization_is_tenth_millimeter() {
        let depth = Grid::from_vec(2, 1, vec![1.23456, 0.0]).unwrap();
        let raw = depth_to_u16(&depth);
        assert_eq!(*raw.get(0, 0), 12346); // 1.23456 m = 12345.6 units
        assert_eq!(*raw.get(1, 0), 0);
        let back = depth_from_u16(&raw);
        assert!((back.get(0, 0) - 1.23456).abs() <= DEPTH_UNIT_M / 2.0 + 1e-12);
    }

    #[test]
    fn depth_beyond_range_is_invalid() {
        let depth = Grid::from_vec(1, 1, vec![7.0]).unwrap();
        assert_eq!(*depth_to_u16(&depth).get(0, 0), 0);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let grid = Grid::from_vec(2, 2, vec![[0u8, 1, 2], [3, 4, 5], [250, 251, 252], [9, 9, 9]]).unwrap();
        write_ppm8(&path, &grid).unwrap();
        assert_eq!(read_ppm8(&path).unwrap(), grid);
    }

    #[test]
    fn project_backproject_inverse() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let p = Vector3::new(0.2, -0.1, 1.5);
        let (u, v) = intr.project(&p).unwrap();
        let back = intr.backproject(u, v, p.z);
        assert!((back - p).norm() < 1e-12);
        assert!(intr.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 1.0, 2, 2).is_err());
    }

    #[test]
    fn bilinear_matches_corners_and_midpoint() {
        let g = Grid::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.sample_bilinear(0.0, 0.0), Some(0.0));
        assert_eq!(g.sample_bilinear(0.5, 0.5), Some(1.5));
        assert_eq!(g.sample_bilinear(1.5, 0.0), None);
    }

    #[test]
    fn normals_on_fronto_parallel_plane_point_back() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 8.0, 8.0, 16, 16).unwrap();
        let frame = RgbdFrame {
            depth: Grid::new(16, 16, 1.0),
            intensity: Grid::new(16, 16, 0.5),
            color: Grid::new(16, 16, [0.5; 3]),
            intr,
            index: 0,
        };
        let normals = frame.compute_normals(0.05);
        let n = normals.get(8, 8).unwrap();
        assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        // One-sided fallback keeps the border populated on a full frame.
        assert!(normals.get(0, 0).is_some());
    }
}
