//! Single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only the fields needed to locate and scale the voxel payload are
//! interpreted; orientation matrices are written as zero (unknown).

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::mask::LabelMask;
use crate::tensor::{Tensor, TensorError};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const SINGLE_FILE_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;

const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
/// Millimetres and seconds.
const UNITS_MM_SEC: u8 = 2 | 8;

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("file is {0} bytes, shorter than a header")]
    TooShort(usize),
    #[error("sizeof_hdr is neither 348 nor its byte swap")]
    BadHeaderSize,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("bitpix {bitpix} does not match datatype {datatype}")]
    BitpixMismatch { datatype: i16, bitpix: i16 },
    #[error("invalid dimensions {0:?}")]
    BadDims([i16; 8]),
    #[error("invalid vox_offset {0}")]
    BadVoxOffset(f32),
    #[error("payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Voxel storage types this crate reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub const ALL: [Datatype; 4] = [Datatype::U8, Datatype::I16, Datatype::F32, Datatype::F64];

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::U8 => 8,
            Datatype::I16 => 16,
            Datatype::F32 => 32,
            Datatype::F64 => 64,
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub endian: Endian,
}

impl NiftiHeader {
    /// Header for a freshly written volume of `shape`.
    pub fn for_shape(shape: &[usize], datatype: Datatype) -> Result<Self, NiftiError> {
        if shape.is_empty() || shape.len() > 7 || shape.iter().any(|&e| e == 0 || e > i16::MAX as usize) {
            let mut dim = [0i16; 8];
            dim[0] = shape.len().min(7) as i16;
            return Err(NiftiError::BadDims(dim));
        }
        let mut dim = [1i16; 8];
        dim[0] = shape.len() as i16;
        for (d, &e) in dim[1..].iter_mut().zip(shape) {
            *d = e as i16;
        }
        let mut pixdim = [1f32; 8];
        pixdim[0] = 1.0;
        Ok(Self {
            dim,
            datatype,
            pixdim,
            vox_offset: SINGLE_FILE_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            magic: *MAGIC_SINGLE,
            endian: Endian::Little,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dim[1..=self.dim[0] as usize].iter().map(|&d| d as usize).collect()
    }

    /// Scaling is applied only for a non-zero finite slope.
    pub fn scaling(&self) -> Option<(f64, f64)> {
        (self.scl_slope != 0.0 && self.scl_slope.is_finite())
            .then(|| (self.scl_slope as f64, if self.scl_inter.is_finite() { self.scl_inter as f64 } else { 0.0 }))
    }
}

/// Raw stored voxels.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VoxelData {
    pub fn datatype(&self) -> Datatype {
        match self {
            VoxelData::U8(_) => Datatype::U8,
            VoxelData::I16(_) => Datatype::I16,
            VoxelData::F32(_) => Datatype::F32,
            VoxelData::F64(_) => Datatype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
            VoxelData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_f64(&self, i: usize) -> f64 {
        match self {
            VoxelData::U8(v) => v[i] as f64,
            VoxelData::I16(v) => v[i] as f64,
            VoxelData::F32(v) => v[i] as f64,
            VoxelData::F64(v) => v[i],
        }
    }
}

/// A parsed volume. Voxels are kept in file order (first axis fastest) and
/// in their stored type so writing them back is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub header: NiftiHeader,
    pub data: VoxelData,
}

impl NiftiVolume {
    /// Builds a volume from raw file-order voxels.
    pub fn new(shape: &[usize], data: VoxelData) -> Result<Self, NiftiError> {
        let header = NiftiHeader::for_shape(shape, data.datatype())?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: n,
                got: data.len(),
            }
            .into());
        }
        Ok(Self { header, data })
    }

    /// Float32 volume from a row-major tensor (last axis fastest).
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, NiftiError> {
        Self::new(t.shape(), VoxelData::F32(reorder(t.data(), t.shape(), false)))
    }

    /// Uint8 label volume from a row-major mask.
    pub fn from_mask(m: &LabelMask) -> Result<Self, NiftiError> {
        Self::new(m.shape(), VoxelData::U8(reorder(m.labels(), m.shape(), false)))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.header.shape()
    }

    /// Scaled voxel value at file-order index `i`.
    fn scaled(&self, i: usize) -> f64 {
        let v = self.data.get_f64(i);
        match self.header.scaling() {
            Some((slope, inter)) => slope * v + inter,
            None => v,
        }
    }

    /// Scaled voxels as a row-major binary32 tensor.
    pub fn to_tensor(&self) -> Result<Tensor<f32>, NiftiError> {
        let shape = self.shape();
        let file_order: Vec<f32> = (0..self.data.len()).map(|i| self.scaled(i) as f32).collect();
        Ok(Tensor::new(shape.clone(), reorder(&file_order, &shape, true))?)
    }

    /// Scaled voxels rounded to labels; values outside `0..=255` are errors.
    pub fn to_mask(&self) -> Result<LabelMask, NiftiError> {
        let shape = self.shape();
        let mut file_order = Vec::with_capacity(self.data.len());
        for i in 0..self.data.len() {
            let v = self.scaled(i).round();
            if !(0.0..=255.0).contains(&v) {
                return Err(TensorError::InvalidArgument(format!("label value {v} at voxel {i}")).into());
            }
            file_order.push(v as u8);
        }
        Ok(LabelMask::new(shape.clone(), reorder(&file_order, &shape, true))?)
    }
}

/// Converts between NIfTI order (first axis fastest) and row-major order
/// (last axis fastest). `to_row_major` selects the direction.
fn reorder<E: Copy>(src: &[E], shape: &[usize], to_row_major: bool) -> Vec<E> {
    let rank = shape.len();
    if rank <= 1 {
        return src.to_vec();
    }
    let mut row_stride = vec![1usize; rank];
    let mut col_stride = vec![1usize; rank];
    for a in (0..rank - 1).rev() {
        row_stride[a] = row_stride[a + 1] * shape[a + 1];
    }
    for a in 1..rank {
        col_stride[a] = col_stride[a - 1] * shape[a - 1];
    }
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    // walk destination order, gather from source order
    for _ in 0..src.len() {
        let s: usize = if to_row_major {
            idx.iter().zip(&col_stride).map(|(i, s)| i * s).sum()
        } else {
            idx.iter().zip(&row_stride).map(|(i, s)| i * s).sum()
        };
        out.push(src[s]);
        if to_row_major {
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        } else {
            for a in 0..rank {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
    out
}

fn parse<B: ByteOrder>(bytes: &[u8], endian: Endian) -> Result<NiftiVolume, NiftiError> {
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[OFF_MAGIC..OFF_MAGIC + 4]);
    if &magic != MAGIC_SINGLE && &magic != MAGIC_PAIR {
        return Err(NiftiError::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    B::read_i16_into(&bytes[OFF_DIM..OFF_DIM + 16], &mut dim);
    let rank = dim[0];
    if !(1..=7).contains(&rank) || dim[1..=rank as usize].iter().any(|&d| d < 1) {
        return Err(NiftiError::BadDims(dim));
    }
    let code = B::read_i16(&bytes[OFF_DATATYPE..]);
    let datatype = Datatype::from_code(code)?;
    let bitpix = B::read_i16(&bytes[OFF_BITPIX..]);
    if bitpix != datatype.bitpix() {
        return Err(NiftiError::BitpixMismatch { datatype: code, bitpix });
    }
    let mut pixdim = [0f32; 8];
    B::read_f32_into(&bytes[OFF_PIXDIM..OFF_PIXDIM + 32], &mut pixdim);
    let vox_offset = B::read_f32(&bytes[OFF_VOX_OFFSET..]);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 || vox_offset > 1e15 {
        return Err(NiftiError::BadVoxOffset(vox_offset));
    }
    let header = NiftiHeader {
        dim,
        datatype,
        pixdim,
        vox_offset,
        scl_slope: B::read_f32(&bytes[OFF_SCL_SLOPE..]),
        scl_inter: B::read_f32(&bytes[OFF_SCL_INTER..]),
        magic,
        endian,
    };

    let count = dim[1..=rank as usize]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
    let start = vox_offset as usize;
    let need = count
        .and_then(|n| n.checked_mul(datatype.bytes()))
        .and_then(|b| b.checked_add(start))
        .unwrap_or(usize::MAX);
    if need > bytes.len() {
        return Err(NiftiError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let n = count.unwrap_or(0);
    let payload = &bytes[start..need];
    let data = match datatype {
        Datatype::U8 => VoxelData::U8(payload.to_vec()),
        Datatype::I16 => {
            let mut v = vec![0i16; n];
            B::read_i16_into(payload, &mut v);
            VoxelData::I16(v)
        }
        Datatype::F32 => {
            let mut v = vec![0f32; n];
            B::read_f32_into(payload, &mut v);
            VoxelData::F32(v)
        }
        Datatype::F64 => {
            let mut v = vec![0f64; n];
            B::read_f64_into(payload, &mut v);
            VoxelData::F64(v)
        }
    };
    Ok(NiftiVolume { header, data })
}

/// Parses a single-file NIfTI-1 byte stream of either byte order.
pub fn read_nifti(bytes: &[u8]) -> Result<NiftiVolume, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TooShort(bytes.len()));
    }
    if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(bytes, Endian::Little)
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        parse::<BigEndian>(bytes, Endian::Big)
    } else {
        Err(NiftiError::BadHeaderSize)
    }
}

fn emit<B: ByteOrder>(vol: &NiftiVolume) -> Vec<u8> {
    let h = &vol.header;
    let dt = vol.data.datatype();
    let mut out = vec![0u8; SINGLE_FILE_OFFSET + vol.data.len() * dt.bytes()];
    B::write_i32(&mut out[0..4], HEADER_SIZE as i32);
    B::write_i16_into(&h.dim, &mut out[OFF_DIM..OFF_DIM + 16]);
    B::write_i16(&mut out[OFF_DATATYPE..], dt.code());
    B::write_i16(&mut out[OFF_BITPIX..], dt.bitpix());
    B::write_f32_into(&h.pixdim, &mut out[OFF_PIXDIM..OFF_PIXDIM + 32]);
    B::write_f32(&mut out[OFF_VOX_OFFSET..], SINGLE_FILE_OFFSET as f32);
    B::write_f32(&mut out[OFF_SCL_SLOPE..], h.scl_slope);
    B::write_f32(&mut out[OFF_SCL_INTER..], h.scl_inter);
    out[OFF_XYZT_UNITS] = UNITS_MM_SEC;
    out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC_SINGLE);
    let payload = &mut out[SINGLE_FILE_OFFSET..];
    match &vol.data {
        VoxelData::U8(v) => payload.copy_from_slice(v),
        VoxelData::I16(v) => B::write_i16_into(v, payload),
        VoxelData::F32(v) => B::write_f32_into(v, payload),
        VoxelData::F64(v) => B::write_f64_into(v, payload),
    }
    out
}

/// Serializes little-endian with `vox_offset` 352 and magic `n+1`.
pub fn write_nifti(vol: &NiftiVolume) -> Vec<u8> {
    emit::<LittleEndian>(vol)
}

/// Serializes in the requested byte order.
pub fn write_nifti_endian(vol: &NiftiVolume, endian: Endian) -> Vec<u8> {
    match endian {
        Endian::Little => emit::<LittleEndian>(vol),
        Endian::Big => emit::<BigEndian>(vol),
    }
}

pub fn read_nifti_file(path: &Path) -> Result<NiftiVolume, NiftiError> {
    let bytes = fs::read(path).map_err(|source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_nifti(&bytes)
}

pub fn write_nifti_file(path: &Path, vol: &NiftiVolume) -> Result<(), NiftiError> {
    fs::write(path, write_nifti(vol)).map_err(|source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    })
}
