use std::path::Path;

use crate::error::{Error, Result};

/// Voxel grid of extent `H×W×S` stored with `S` fastest, then `W`, then `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<V> {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<V>,
}

pub type IntensityVolume = Grid<f32>;
pub type MaskVolume = Grid<u8>;
pub type LabelVolume = Grid<u8>;

impl<V: Copy + Default> Grid<V> {
    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: V) -> Self {
        Self { dims, spacing, data: vec![value; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 3], spacing: [f32; 3], data: Vec<V>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Contract(format!("grid {dims:?} needs {} voxels, got {}", dims.iter().product::<usize>(), data.len())));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, s: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + s
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, s: usize) -> V {
        self.data[self.index(h, w, s)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, s: usize, v: V) {
        let i = self.index(h, w, s);
        self.data[i] = v;
    }

    /// Voxel coordinates of a flat index.
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let s = i % self.dims[2];
        let w = (i / self.dims[2]) % self.dims[1];
        [i / (self.dims[1] * self.dims[2]), w, s]
    }

    pub fn map<U: Copy + Default>(&self, mut f: impl FnMut(V) -> U) -> Grid<U> {
        Grid { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Sub-box `[origin, origin + size)`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Grid<V> {
        let mut out = Grid::filled(size, self.spacing, V::default());
        for h in 0..size[0] {
            for w in 0..size[1] {
                let src = self.index(origin[0] + h, origin[1] + w, origin[2]);
                let dst = out.index(h, w, 0);
                out.data[dst..dst + size[2]].copy_from_slice(&self.data[src..src + size[2]]);
            }
        }
        out
    }

    /// Mirror across the left-right midline (the `W` axis).
    pub fn mirrored(&self) -> Grid<V> {
        let mut out = self.clone();
        let [h, w, s] = self.dims;
        for i in 0..h {
            for j in 0..w {
                for k in 0..s {
                    out.set(i, w - 1 - j, k, self.get(i, j, k));
                }
            }
        }
        out
    }
}

impl Grid<u8> {
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// HU window: clip to [−1000, 1000], then map linearly onto [0, 1].
pub fn normalize_hu(raw: &Grid<f32>) -> Grid<f32> {
    raw.map(|v| (v.clamp(-1000.0, 1000.0) + 1000.0) / 2000.0)
}

pub const MAGIC: &[u8; 4] = b"CTV1";
const HEADER_LEN: usize = 4 + 12 + 12 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Intensity = 0,
    Mask = 1,
    Labels = 2,
}

/// A volume file's payload.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Intensity(Grid<f32>),
    Mask(Grid<u8>),
    Labels(Grid<u8>),
}

impl VolumeData {
    pub fn kind(&self) -> VolumeKind {
        match self {
            VolumeData::Intensity(_) => VolumeKind::Intensity,
            VolumeData::Mask(_) => VolumeKind::Mask,
            VolumeData::Labels(_) => VolumeKind::Labels,
        }
    }

    pub fn into_intensity(self) -> Result<Grid<f32>> {
        match self {
            VolumeData::Intensity(g) => Ok(g),
            other => Err(Error::Data(format!("expected intensity volume, found {:?}", other.kind()))),
        }
    }

    pub fn into_mask(self) -> Result<Grid<u8>> {
        match self {
            VolumeData::Mask(g) => Ok(g),
            other => Err(Error::Data(format!("expected mask volume, found {:?}", other.kind()))),
        }
    }

    pub fn into_labels(self) -> Result<Grid<u8>> {
        match self {
            VolumeData::Labels(g) => Ok(g),
            other => Err(Error::Data(format!("expected label volume, found {:?}", other.kind()))),
        }
    }

    /// Little-endian encoding; payload ordered `W` fastest, then `H`, then `S`.
    pub fn encode(&self) -> Vec<u8> {
        let (dims, spacing) = match self {
            VolumeData::Intensity(g) => (g.dims, g.spacing),
            VolumeData::Mask(g) | VolumeData::Labels(g) => (g.dims, g.spacing),
        };
        let n: usize = dims.iter().product();
        let width = if self.kind() == VolumeKind::Intensity { 4 } else { 1 };
        let mut out = Vec::with_capacity(HEADER_LEN + n * width);
        out.extend_from_slice(MAGIC);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.kind() as u8);
        let [h, w, s] = dims;
        for k in 0..s {
            for i in 0..h {
                for j in 0..w {
                    let idx = (i * w + j) * s + k;
                    match self {
                        VolumeData::Intensity(g) => out.extend_from_slice(&g.data[idx].to_le_bytes()),
                        VolumeData::Mask(g) | VolumeData::Labels(g) => out.push(g.data[idx]),
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if bytes.len() < 4 {
            return Err(fmt_err(bytes.len(), "file ends inside the magic".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fmt_err(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [u32_at(4), u32_at(8), u32_at(12)];
        let spacing = [f32_at(16), f32_at(20), f32_at(24)];
        let kind = match bytes[28] {
            0 => VolumeKind::Intensity,
            1 => VolumeKind::Mask,
            2 => VolumeKind::Labels,
            t => return Err(fmt_err(28, format!("unknown kind tag {t}"))),
        };
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| fmt_err(4, "extent overflow".into()))?;
        let width = if kind == VolumeKind::Intensity { 4 } else { 1 };
        let need = HEADER_LEN + n * width;
        if bytes.len() < need {
            return Err(fmt_err(bytes.len(), format!("truncated payload: header needs {need} bytes, file has {}", bytes.len())));
        }
        if bytes.len() > need {
            return Err(fmt_err(need, format!("{} trailing bytes", bytes.len() - need)));
        }
        let [h, w, s] = dims;
        let file_to_grid = |f: usize| {
            let j = f % w;
            let i = (f / w) % h;
            let k = f / (w * h);
            (i * w + j) * s + k
        };
        let payload = &bytes[HEADER_LEN..];
        Ok(match kind {
            VolumeKind::Intensity => {
                let mut data = vec![0f32; n];
                for f in 0..n {
                    data[file_to_grid(f)] = f32::from_le_bytes(payload[4 * f..4 * f + 4].try_into().unwrap());
                }
                VolumeData::Intensity(Grid { dims, spacing, data })
            }
            VolumeKind::Mask | VolumeKind::Labels => {
                let mut data = vec![0u8; n];
                for f in 0..n {
                    if kind == VolumeKind::Mask && payload[f] > 1 {
                        return Err(fmt_err(HEADER_LEN + f, format!("mask value {} is not binary", payload[f])));
                    }
                    data[file_to_grid(f)] = payload[f];
                }
                let g = Grid { dims, spacing, data };
                if kind == VolumeKind::Mask {
                    VolumeData::Mask(g)
                } else {
                    VolumeData::Labels(g)
                }
            }
        })
    }
}

pub fn write_volume(path: &Path, volume: &VolumeData) -> Result<()> {
    std::fs::write(path, volume.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    VolumeData::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_mask_round_trips_bitwise() {
        let g = Grid::from_vec([2, 2, 1], [1.0, 1.0, 3.0], vec![0, 1, 1, 0]).unwrap();
        let v = VolumeData::Mask(g);
        assert_eq!(VolumeData::decode(&v.encode()).unwrap(), v);
    }

    #[test]
    fn payload_is_w_fastest_then_h_then_s() {
        // grid value encodes its own (h, w, s)
        let mut g = Grid::filled([2, 3, 2], [1.0, 1.0, 3.0], 0u8);
        for h in 0..2 {
            for w in 0..3 {
                for s in 0..2 {
                    g.set(h, w, s, (100 * s + 10 * h + w) as u8);
                }
            }
        }
        let bytes = VolumeData::Labels(g).encode();
        assert_eq!(&bytes[29..35], &[0, 1, 2, 10, 11, 12]);
        assert_eq!(&bytes[35..41], &[100, 101, 102, 110, 111, 112]);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = VolumeData::Mask(Grid::filled([2, 2, 2], [1.0; 3], 0)).encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(VolumeData::decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn short_payload_reports_truncation_offset() {
        let bytes = VolumeData::Mask(Grid::filled([4, 4, 4], [1.0; 3], 1)).encode();
        let cut = &bytes[..bytes.len() - 10];
        match VolumeData::decode(cut) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset as usize, cut.len());
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn hu_window() {
        let raw = Grid::from_vec([1, 1, 4], [1.0; 3], vec![-1000.0, 0.0, 3000.0, -4000.0]).unwrap();
        assert_eq!(normalize_hu(&raw).data(), &[0.0, 0.5, 1.0, 0.0]);
    }
}
