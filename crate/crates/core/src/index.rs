//! Descriptor database over map keypoints and exact top-K retrieval,
//! yielding 2D->3D correspondence hypotheses for the pose solver.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::detect2d::Keypoint2D;
use crate::detect3d::Keypoint3D;
use crate::geometry::Point3;
use crate::kdtree::KdTree;
use crate::net::Descriptor;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("descriptor database needs at least one entry")]
    EmptyInput,
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("database file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable database of (map keypoint, descriptor) entries with an exact
/// nearest-neighbor index (KD-tree, or a flat scan at high dimension where
/// tree pruning stops paying off; both answer identically).
#[derive(Debug, Clone)]
pub struct DescriptorDB {
    entries: Vec<(Keypoint3D, Descriptor)>,
    index: KdTree,
    d: usize,
}

/// One query keypoint with its top-K map candidates, ascending distance.
#[derive(Debug, Clone)]
pub struct MatchHypothesis {
    pub query: Keypoint2D,
    pub candidates: Vec<(Keypoint3D, f64)>,
}

/// Euclidean distance between descriptors; in [0, 2] for unit vectors.
pub fn similarity(p: &Descriptor, q: &Descriptor) -> Result<f64, IndexError> {
    if p.dim() != q.dim() {
        return Err(IndexError::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    Ok(p.values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn build_index(entries: Vec<(Keypoint3D, Descriptor)>) -> Result<DescriptorDB, IndexError> {
    let Some(first) = entries.first() else {
        return Err(IndexError::EmptyInput);
    };
    let d = first.1.dim();
    let mut flat = Vec::with_capacity(entries.len() * d);
    for (_, desc) in &entries {
        if desc.dim() != d {
            return Err(IndexError::DimensionMismatch { expected: d, got: desc.dim() });
        }
        debug_assert!((desc.norm() - 1.0).abs() <= 1e-6, "descriptors are unit-norm by construction");
        flat.extend_from_slice(&desc.values);
    }
    let index = KdTree::build(d, flat).map_err(|e| IndexError::Format(e.to_string()))?;
    Ok(DescriptorDB { entries, index, d })
}

/// The K nearest entries by descriptor distance, ascending, ties broken by
/// insertion index. Returns min(K, size) candidates.
pub fn knn(db: &DescriptorDB, query: &Descriptor, k: usize) -> Result<Vec<(Keypoint3D, f64)>, IndexError> {
    if query.dim() != db.d {
        return Err(IndexError::DimensionMismatch { expected: db.d, got: query.dim() });
    }
    let hits = db
        .index
        .knn(&query.values, k)
        .map_err(|e| IndexError::Format(e.to_string()))?;
    Ok(hits
        .into_iter()
        .map(|h| (db.entries[h.index].0.clone(), h.distance))
        .collect())
}

const DB_MAGIC: &[u8; 4] = b"X2DB";
const DB_VERSION: u32 = 1;

impl DescriptorDB {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.d
    }

    pub fn entries(&self) -> &[(Keypoint3D, Descriptor)] {
        &self.entries
    }

    /// Little-endian binary: magic "X2DB", version u32, D u32, count u64,
    /// then per entry the keypoint position (3 f64), its saliency (f64)
    /// and the descriptor (D f64). Deterministic byte-for-byte.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut buf = Vec::with_capacity(20 + self.entries.len() * (4 + self.d) * 8);
        buf.extend_from_slice(DB_MAGIC);
        buf.extend_from_slice(&DB_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (kp, desc) in &self.entries {
            for v in [kp.position.x, kp.position.y, kp.position.z, kp.saliency] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &desc.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Inverse of save. Neighbor counts are not part of the file format
    /// and load as zero.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let bytes = fs::read(path)?;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], IndexError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            match end {
                Some(end) => {
                    let s = &bytes[*pos..end];
                    *pos = end;
                    Ok(s)
                }
                None => Err(IndexError::Format("file truncated".into())),
            }
        };
        let mut pos = 0usize;
        if take(&mut pos, 4)? != DB_MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != DB_VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(IndexError::Format("descriptor dimension is zero".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let fixed = take(&mut pos, 32)?;
            let f = |i: usize| f64::from_le_bytes(fixed[i * 8..(i + 1) * 8].try_into().unwrap());
            let kp = Keypoint3D {
                position: Point3::new(f(0), f(1), f(2)),
                saliency: f(3),
                neighbor_count: 0,
            };
            let payload = take(&mut pos, d * 8)?;
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::Format("non-finite descriptor".into()));
            }
            entries.push((kp, Descriptor { values }));
        }
        if pos != bytes.len() {
            return Err(IndexError::Format("trailing bytes".into()));
        }
        build_index(entries)
    }
}
