use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"VOLB";
pub const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 4 + 1;

/// Imaging modality of an intensity volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    T2,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Modality::T1),
            "t2" => Ok(Modality::T2),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Intensity volume, row-major `(D, H, W, C)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub voxels: Vec<f32>,
}

/// Integer class field co-registered with a [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

impl Volume {
    pub fn new(dims: [usize; 3], channels: usize, voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() * channels != voxels.len() {
            return Err(Error::invalid(
                "volume",
                format!("{dims:?}×{channels} does not match {} voxels", voxels.len()),
            ));
        }
        Ok(Self {
            dims,
            channels,
            voxels,
        })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabelMap {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != labels.len() {
            return Err(Error::invalid(
                "labels",
                format!("{dims:?} does not match {} labels", labels.len()),
            ));
        }
        Ok(Self { dims, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Payload of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Intensity(Volume),
    Labels(LabelMap),
}

impl VolumeFile {
    fn header(dims: [usize; 3], channels: usize, tag: u8) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(channels as u32).to_le_bytes());
        out.push(tag);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            VolumeFile::Intensity(v) => {
                let mut out = Self::header(v.dims, v.channels, 0);
                out.reserve(v.voxels.len() * 4);
                for x in &v.voxels {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out
            }
            VolumeFile::Labels(l) => {
                let mut out = Self::header(l.dims, 1, 1);
                out.extend_from_slice(&l.labels);
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "VOLB".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VOLUME_VERSION {
            return Err(Error::BadVersion {
                path: path.to_path_buf(),
                found: version as u64,
                expected: VOLUME_VERSION as u64,
            });
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let channels = u32_at(20) as usize;
        let tag = bytes[24];
        let count = dims.iter().product::<usize>() * channels;
        let width = match tag {
            0 => 4,
            1 => 1,
            other => {
                return Err(Error::ManifestMismatch {
                    path: path.to_path_buf(),
                    msg: format!("unknown dtype tag {other}"),
                })
            }
        };
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < count * width {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN + count * width,
                found: bytes.len(),
            });
        }
        if payload.len() > count * width {
            return Err(Error::ManifestMismatch {
                path: path.to_path_buf(),
                msg: format!(
                    "{} trailing bytes after {dims:?}×{channels} payload",
                    payload.len() - count * width
                ),
            });
        }
        Ok(match tag {
            0 => VolumeFile::Intensity(Volume {
                dims,
                channels,
                voxels: payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            }),
            _ => {
                if channels != 1 {
                    return Err(Error::ManifestMismatch {
                        path: path.to_path_buf(),
                        msg: format!("label file with {channels} channels"),
                    });
                }
                VolumeFile::Labels(LabelMap {
                    dims,
                    labels: payload.to_vec(),
                })
            }
        })
    }
}

pub fn save_volume(path: impl AsRef<Path>, file: &VolumeFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, file.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    VolumeFile::from_bytes(&bytes, path)
}

pub fn load_intensity(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match load_volume(path)? {
        VolumeFile::Intensity(v) => Ok(v),
        VolumeFile::Labels(_) => Err(Error::ManifestMismatch {
            path: path.to_path_buf(),
            msg: "expected an f32 intensity volume, found labels".into(),
        }),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match load_volume(path)? {
        VolumeFile::Labels(l) => Ok(l),
        VolumeFile::Intensity(_) => Err(Error::ManifestMismatch {
            path: path.to_path_buf(),
            msg: "expected a u8 label volume, found intensities".into(),
        }),
    }
}
