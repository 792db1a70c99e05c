//! Binary checkpoint holding both branches' tensors.
//!
//! Layout (little-endian): magic "X2D3D", format version u32, descriptor
//! dimension u32, tensor count u32, then one record per tensor: name
//! length u32, name bytes, rank u32, dims u32 x rank, payload f64s.
//! Image tensors are prefixed "image.", point tensors "point.". Writing is
//! deterministic, so save -> load -> save reproduces the bytes exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::image_branch::ImageEmbedderParams;
use super::point_branch::PointEmbedderParams;
use super::tensor::Tensor;
use super::NetError;

const MAGIC: &[u8; 5] = b"X2D3D";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    image: &ImageEmbedderParams,
    point: &PointEmbedderParams,
) -> Result<(), NetError> {
    if image.arch().d != point.arch().d {
        return Err(NetError::Checkpoint(format!(
            "branch descriptor dimensions differ: {} vs {}",
            image.arch().d,
            point.arch().d
        )));
    }
    let records: Vec<(String, &Tensor)> = image
        .tensors()
        .into_iter()
        .map(|(n, t)| (format!("image.{n}"), t))
        .chain(point.tensors().into_iter().map(|(n, t)| (format!("point.{n}"), t)))
        .collect();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(image.arch().d as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(NetError::Checkpoint("file truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ImageEmbedderParams, PointEmbedderParams), NetError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetError::Checkpoint(format!("unsupported format version {version}")));
    }
    let d = r.u32()? as usize;
    let count = r.u32()? as usize;

    let mut image_tensors = BTreeMap::new();
    let mut point_tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| NetError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(NetError::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= usize::MAX / 8)
            .ok_or_else(|| NetError::Checkpoint(format!("tensor {name} shape overflows")))?;
        let payload = r.take(len * 8)?;
        let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::from_vec(&shape, data)?;
        if !tensor.all_finite() {
            return Err(NetError::Checkpoint(format!("tensor {name} has non-finite values")));
        }
        let dest = if let Some(rest) = name.strip_prefix("image.") {
            image_tensors.insert(rest.to_string(), tensor)
        } else if let Some(rest) = name.strip_prefix("point.") {
            point_tensors.insert(rest.to_string(), tensor)
        } else {
            return Err(NetError::Checkpoint(format!("tensor {name} has no branch prefix")));
        };
        if dest.is_some() {
            return Err(NetError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(NetError::Checkpoint("trailing bytes after last tensor".into()));
    }

    let image = ImageEmbedderParams::from_named(image_tensors)?;
    let point = PointEmbedderParams::from_named(point_tensors)?;
    if image.arch().d != d || point.arch().d != d {
        return Err(NetError::Checkpoint(format!(
            "header descriptor dimension {d} does not match tensors ({} / {})",
            image.arch().d,
            point.arch().d
        )));
    }
    Ok((image, point))
}
