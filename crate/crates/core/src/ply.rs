//! Point clouds and ASCII PLY I/O (vertex element with double x, y, z and
//! an optional intensity property).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::Point3;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("ply parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("intensity length {got} does not match point count {points}")]
    IntensityMismatch { got: usize, points: usize },
    #[error("point {index} has a non-finite component")]
    NonFinite { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 3D point set, optionally carrying one intensity value per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub intensity: Option<Vec<f64>>,
    /// Reference frame identifier, e.g. "map" or a submap id.
    pub frame: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: impl Into<String>) -> Result<Self, PlyError> {
        Self::with_intensity(points, None, frame)
    }

    pub fn with_intensity(
        points: Vec<Point3>,
        intensity: Option<Vec<f64>>,
        frame: impl Into<String>,
    ) -> Result<Self, PlyError> {
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(PlyError::NonFinite { index });
            }
        }
        if let Some(i) = &intensity {
            if i.len() != points.len() {
                return Err(PlyError::IntensityMismatch { got: i.len(), points: points.len() });
            }
        }
        Ok(Self { points, intensity, frame: frame.into() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_ply(&self, path: &Path) -> Result<(), PlyError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        writeln!(w, "property double x")?;
        writeln!(w, "property double y")?;
        writeln!(w, "property double z")?;
        if self.intensity.is_some() {
            writeln!(w, "property double intensity")?;
        }
        writeln!(w, "end_header")?;
        for (i, p) in self.points.iter().enumerate() {
            match &self.intensity {
                Some(vals) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, vals[i])?,
                None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
            }
        }
        Ok(())
    }

    pub fn read_ply(path: &Path) -> Result<Self, PlyError> {
        let frame = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "map".into());
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();

        let mut count: Option<usize> = None;
        let mut props: Vec<String> = Vec::new();
        let mut header_done = false;
        let mut data_start = 0;

        let err = |line: usize, msg: &str| PlyError::Parse { line: line + 1, msg: msg.into() };

        // Header
        let mut first = true;
        for (ln, line) in &mut lines {
            let line = line?;
            let line = line.trim();
            if first {
                if line != "ply" {
                    return Err(err(ln, "missing 'ply' magic"));
                }
                first = false;
                continue;
            }
            if line.starts_with("comment") || line.is_empty() {
                continue;
            }
            if line == "end_header" {
                header_done = true;
                data_start = ln + 1;
                break;
            }
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("format") => {
                    if tok.next() != Some("ascii") {
                        return Err(err(ln, "only ascii format supported"));
                    }
                }
                Some("element") => {
                    if tok.next() != Some("vertex") {
                        return Err(err(ln, "only vertex elements supported"));
                    }
                    count = tok.next().and_then(|s| s.parse().ok());
                    if count.is_none() {
                        return Err(err(ln, "bad vertex count"));
                    }
                }
                Some("property") => {
                    let ty = tok.next().unwrap_or("");
                    if !matches!(ty, "double" | "float" | "float64" | "float32") {
                        return Err(err(ln, "unsupported property type"));
                    }
                    props.push(tok.next().unwrap_or("").to_string());
                }
                _ => return Err(err(ln, "unrecognized header line")),
            }
        }
        if !header_done {
            return Err(err(0, "missing end_header"));
        }
        let count = count.ok_or_else(|| err(0, "missing element vertex"))?;
        let ix = |name: &str| props.iter().position(|p| p == name);
        let (xi, yi, zi) = match (ix("x"), ix("y"), ix("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(err(0, "header lacks x/y/z properties")),
        };
        let ii = ix("intensity");

        let mut points = Vec::with_capacity(count);
        let mut intensity = ii.map(|_| Vec::with_capacity(count));
        for (ln, line) in &mut lines {
            if points.len() == count {
                break;
            }
            let line = line?;
            let vals: Result<Vec<f64>, _> = line.split_whitespace().map(|t| t.parse::<f64>()).collect();
            let vals = vals.map_err(|_| err(ln, "bad vertex value"))?;
            if vals.len() != props.len() {
                return Err(err(ln, "wrong number of vertex values"));
            }
            points.push(Point3::new(vals[xi], vals[yi], vals[zi]));
            if let (Some(store), Some(i)) = (&mut intensity, ii) {
                store.push(vals[i]);
            }
        }
        if points.len() != count {
            return Err(err(data_start, "fewer vertices than declared"));
        }
        PointCloud::with_intensity(points, intensity, frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cloud(intensity: bool) -> PointCloud {
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.5, -2.25, 3.125),
            Point3::new(-0.1, 0.2, 1e-9),
        ];
        let vals = intensity.then(|| vec![0.1, 0.55, 1.0]);
        PointCloud::with_intensity(points, vals, "map").unwrap()
    }

    #[test]
    fn round_trip_plain() {
        let cloud = sample_cloud(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");
        cloud.write_ply(&path).unwrap();
        let back = PointCloud::read_ply(&path).unwrap();
        assert_eq!(cloud.points, back.points);
        assert!(back.intensity.is_none());
    }

    #[test]
    fn round_trip_with_intensity_exact() {
        // Shortest-round-trip float formatting makes ASCII I/O lossless.
        let cloud = sample_cloud(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");
        cloud.write_ply(&path).unwrap();
        let back = PointCloud::read_ply(&path).unwrap();
        assert_eq!(cloud.points, back.points);
        assert_eq!(cloud.intensity, back.intensity);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n",
        )
        .unwrap();
        assert!(PointCloud::read_ply(&path).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let e = PointCloud::new(vec![Point3::new(f64::NAN, 0.0, 0.0)], "map");
        assert!(e.is_err());
    }
}
