//! Volume file formats: a minimal uncompressed NIfTI-1 subset and raw payload + JSON sidecar.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Grid, Volume, VolumeError, VolumeKind};
use crate::scalar::Real;
use crate::transform::DenseField;

pub const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
const MASK_MARKER: &str = "kind=mask";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeFormat {
    Nifti1,
    RawJson,
}

impl VolumeFormat {
    /// `.nii` / `.hdr` select NIfTI-1; anything else is treated as raw+json.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") | Some("hdr") => Self::Nifti1,
            _ => Self::RawJson,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_volume<T: Real>(path: &Path, format: VolumeFormat) -> Result<Volume<T>, VolumeError> {
    match format {
        VolumeFormat::Nifti1 => load_nifti(path),
        VolumeFormat::RawJson => {
            let (sidecar, values) = load_raw(path)?;
            if sidecar.channels != 1 {
                return Err(VolumeError::MalformedHeader(format!(
                    "expected a scalar volume, sidecar declares {} channels",
                    sidecar.channels
                )));
            }
            let grid = Grid::new(sidecar.dims, sidecar.spacing, sidecar.origin)?;
            Volume::new(grid, values.into_iter().map(T::lit).collect(), sidecar.kind)
        }
    }
}

pub fn save_volume<T: Real>(v: &Volume<T>, path: &Path, format: VolumeFormat) -> Result<(), VolumeError> {
    match format {
        VolumeFormat::Nifti1 => save_nifti(v, path),
        VolumeFormat::RawJson => {
            let sidecar = Sidecar {
                dims: v.dims(),
                spacing: v.spacing(),
                origin: v.origin(),
                dtype: RawDtype::F32,
                kind: v.kind(),
                channels: 1,
            };
            save_raw(path, &sidecar, v.data().iter().map(|x| x.as_f64()))
        }
    }
}

/// Writes a displacement field as a 3-channel (interleaved) raw+json volume.
pub fn save_dense_field<S: Real>(field: &DenseField<S>, path: &Path) -> Result<(), VolumeError> {
    let grid = field.grid();
    let sidecar = Sidecar {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        dtype: RawDtype::F32,
        kind: VolumeKind::Intensity,
        channels: 3,
    };
    save_raw(
        path,
        &sidecar,
        field.vectors().iter().flat_map(|v| v.iter().map(|c| c.as_f64())),
    )
}

pub fn load_dense_field<S: Real>(path: &Path) -> Result<DenseField<S>, VolumeError> {
    let (sidecar, values) = load_raw(path)?;
    if sidecar.channels != 3 {
        return Err(VolumeError::MalformedHeader(format!(
            "displacement fields need 3 channels, found {}",
            sidecar.channels
        )));
    }
    let grid = Grid::new(sidecar.dims, sidecar.spacing, sidecar.origin)?;
    let vectors = values
        .chunks_exact(3)
        .map(|c| [S::lit(c[0]), S::lit(c[1]), S::lit(c[2])])
        .collect();
    DenseField::new(grid, vectors).map_err(|e| VolumeError::MalformedHeader(e.to_string()))
}

// ---------------------------------------------------------------------------
// raw + json

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawDtype {
    U8,
    I16,
    F32,
    F64,
}

impl RawDtype {
    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: RawDtype,
    kind: VolumeKind,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    channels: usize,
}

fn is_one(c: &usize) -> bool {
    *c == 1
}

fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

fn load_raw(path: &Path) -> Result<(Sidecar, Vec<f64>), VolumeError> {
    let (json_path, raw_path) = raw_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| VolumeError::MalformedHeader(format!("{}: {e}", json_path.display())))?;
    if sidecar.channels == 0 {
        return Err(VolumeError::MalformedHeader("channels must be ≥ 1".into()));
    }
    let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    let voxels = sidecar.dims.iter().product::<usize>();
    let count = voxels * sidecar.channels;
    if bytes.len() != count * sidecar.dtype.size() {
        return Err(VolumeError::LengthMismatch {
            dims: sidecar.dims,
            expected: count,
            got: bytes.len() / sidecar.dtype.size(),
        });
    }
    let values = decode_values::<LittleEndian>(&bytes, sidecar.dtype);
    Ok((sidecar, values))
}

fn save_raw(path: &Path, sidecar: &Sidecar, values: impl Iterator<Item = f64>) -> Result<(), VolumeError> {
    let (json_path, raw_path) = raw_paths(path);
    let mut buf = Vec::new();
    for v in values {
        buf.write_f32::<LittleEndian>(v as f32).expect("vec write");
    }
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
    fs::write(&raw_path, buf).map_err(|e| io_err(&raw_path, e))?;
    Ok(())
}

fn decode_values<E: ByteOrder>(bytes: &[u8], dtype: RawDtype) -> Vec<f64> {
    match dtype {
        RawDtype::U8 => bytes.iter().map(|b| *b as f64).collect(),
        RawDtype::I16 => bytes.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        RawDtype::F32 => bytes.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        RawDtype::F64 => bytes.chunks_exact(8).map(E::read_f64).collect(),
    }
}

// ---------------------------------------------------------------------------
// NIfTI-1

struct NiftiHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    datatype: i16,
    vox_offset: usize,
    is_mask: bool,
    pair: bool,
}

fn parse_header<E: ByteOrder>(h: &[u8]) -> Result<NiftiHeader, VolumeError> {
    let bad = |m: &str| VolumeError::MalformedHeader(m.to_string());
    let magic = &h[344..348];
    let pair = if magic == MAGIC_SINGLE {
        false
    } else if magic == MAGIC_PAIR {
        true
    } else {
        return Err(bad("magic is neither \"n+1\\0\" nor \"ni1\\0\""));
    };
    let mut dim = [0i16; 8];
    for (a, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&h[40 + 2 * a..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(bad("dim[0] out of range"));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < ndim {
            if dim[a + 1] <= 0 {
                return Err(bad("non-positive dimension"));
            }
            dims[a] = dim[a + 1] as usize;
        }
    }
    if (4..=ndim as usize).any(|a| dim[a] > 1) {
        return Err(VolumeError::UnsupportedDatatype(
            "volumes with more than 3 dimensions".into(),
        ));
    }
    let datatype = E::read_i16(&h[70..]);
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = E::read_f32(&h[76 + 4 * (a + 1)..]) as f64;
        *s = if (a as i16) < ndim { p.abs() } else { 1.0 };
    }
    let vox_offset = E::read_f32(&h[108..]);
    if !pair && vox_offset < NIFTI_VOX_OFFSET as f32 {
        return Err(bad("vox_offset below 352"));
    }
    if !(vox_offset >= 0.0 && vox_offset.is_finite()) {
        return Err(bad("invalid vox_offset"));
    }
    let origin = [
        E::read_f32(&h[268..]) as f64,
        E::read_f32(&h[272..]) as f64,
        E::read_f32(&h[276..]) as f64,
    ];
    let descrip = String::from_utf8_lossy(&h[148..228]);
    Ok(NiftiHeader {
        dims,
        spacing,
        origin,
        datatype,
        vox_offset: vox_offset as usize,
        is_mask: descrip.contains(MASK_MARKER),
        pair,
    })
}

fn load_nifti<T: Real>(path: &Path) -> Result<Volume<T>, VolumeError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(VolumeError::MalformedHeader(
            "file shorter than a NIfTI-1 header".into(),
        ));
    }
    let head = &bytes[..NIFTI_HEADER_SIZE];
    let little = LittleEndian::read_i32(head) == NIFTI_HEADER_SIZE as i32;
    let big = BigEndian::read_i32(head) == NIFTI_HEADER_SIZE as i32;
    let header = if little {
        parse_header::<LittleEndian>(head)?
    } else if big {
        parse_header::<BigEndian>(head)?
    } else {
        return Err(VolumeError::MalformedHeader("sizeof_hdr is not 348".into()));
    };
    let dtype = match header.datatype {
        DT_UINT8 => RawDtype::U8,
        DT_INT16 => RawDtype::I16,
        DT_FLOAT32 => RawDtype::F32,
        other => return Err(VolumeError::UnsupportedDatatype(format!("NIfTI datatype code {other}"))),
    };
    let payload_owner;
    let payload: &[u8] = if header.pair {
        let img = path.with_extension("img");
        payload_owner = fs::read(&img).map_err(|e| io_err(&img, e))?;
        &payload_owner[header.vox_offset.min(payload_owner.len())..]
    } else {
        &bytes[header.vox_offset.min(bytes.len())..]
    };
    let count = header.dims.iter().product::<usize>();
    let needed = count * dtype.size();
    if payload.len() < needed {
        return Err(VolumeError::LengthMismatch {
            dims: header.dims,
            expected: count,
            got: payload.len() / dtype.size(),
        });
    }
    let payload = &payload[..needed];
    let values = if little {
        decode_values::<LittleEndian>(payload, dtype)
    } else {
        decode_values::<BigEndian>(payload, dtype)
    };
    let grid = Grid::new(header.dims, header.spacing, header.origin)?;
    let kind = if header.is_mask {
        VolumeKind::Mask
    } else {
        VolumeKind::Intensity
    };
    Volume::new(grid, values.into_iter().map(T::lit).collect(), kind)
}

fn save_nifti<T: Real>(v: &Volume<T>, path: &Path) -> Result<(), VolumeError> {
    let too_big = |a: usize| v.dims()[a] > i16::MAX as usize;
    if (0..3).any(too_big) {
        return Err(VolumeError::InvalidDims(v.dims()));
    }
    let (datatype, bitpix) = if v.is_mask() {
        (DT_UINT8, 8i16)
    } else {
        (DT_FLOAT32, 32i16)
    };
    let mut h = Cursor::new(vec![0u8; NIFTI_VOX_OFFSET]);
    let w = |h: &mut Cursor<Vec<u8>>, at: u64| h.set_position(at);
    h.write_i32::<LittleEndian>(NIFTI_HEADER_SIZE as i32).unwrap();
    w(&mut h, 38);
    h.write_u8(b'r').unwrap();
    w(&mut h, 40);
    let dims = v.dims();
    for d in [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1] {
        h.write_i16::<LittleEndian>(d).unwrap();
    }
    w(&mut h, 70);
    h.write_i16::<LittleEndian>(datatype).unwrap();
    h.write_i16::<LittleEndian>(bitpix).unwrap();
    w(&mut h, 76);
    let sp = v.spacing();
    for p in [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0] {
        h.write_f32::<LittleEndian>(p).unwrap();
    }
    h.write_f32::<LittleEndian>(NIFTI_VOX_OFFSET as f32).unwrap(); // vox_offset @108
    h.write_f32::<LittleEndian>(0.0).unwrap(); // scl_slope: no scaling
    w(&mut h, 123);
    h.write_u8(2).unwrap(); // xyzt_units: mm
    w(&mut h, 148);
    let descrip = if v.is_mask() {
        format!("regprompt {MASK_MARKER}")
    } else {
        "regprompt kind=intensity".to_string()
    };
    h.write_all(descrip.as_bytes()).unwrap();
    w(&mut h, 252);
    h.write_i16::<LittleEndian>(1).unwrap(); // qform_code
    h.write_i16::<LittleEndian>(0).unwrap(); // sform_code
    w(&mut h, 268);
    for o in v.origin() {
        h.write_f32::<LittleEndian>(o as f32).unwrap();
    }
    w(&mut h, 344);
    h.write_all(MAGIC_SINGLE).unwrap();

    let mut bytes = h.into_inner();
    bytes.reserve(v.data().len() * (bitpix as usize / 8));
    for x in v.data() {
        if v.is_mask() {
            bytes.push(if *x != T::zero() { 1 } else { 0 });
        } else {
            bytes.write_f32::<LittleEndian>(x.as_f64() as f32).unwrap();
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], kind: VolumeKind) -> Volume<f32> {
        let grid = Grid::new(dims, [0.5, 0.75, 3.0], [-10.0, 2.5, 7.0]).unwrap();
        Volume::from_fn(grid, kind, |i, j, k| match kind {
            VolumeKind::Mask => ((i + j + k) % 2) as f32,
            VolumeKind::Intensity => (i * 100 + j * 10 + k) as f32 - 37.5,
        })
        .unwrap()
    }

    #[test]
    fn raw_json_hand_written_file() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("hand.json");
        fs::write(
            &json,
            r#"{"dims":[4,4,2],"spacing":[1,1,2],"origin":[0,0,0],"dtype":"f32","kind":"intensity"}"#,
        )
        .unwrap();
        let mut payload = Vec::new();
        for i in 0..32 {
            payload.write_f32::<LittleEndian>(i as f32).unwrap();
        }
        fs::write(dir.path().join("hand.raw"), &payload).unwrap();
        let v: Volume<f32> = load_volume(&json, VolumeFormat::RawJson).unwrap();
        assert_eq!(v.dims(), [4, 4, 2]);
        assert_eq!(v.get(3, 3, 1), 31.0);

        let out = dir.path().join("copy.json");
        save_volume(&v, &out, VolumeFormat::RawJson).unwrap();
        assert_eq!(fs::read(dir.path().join("copy.raw")).unwrap(), payload);
    }

    #[test]
    fn raw_json_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("x.json"),
            r#"{"dims":[4,4,2],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"f32","kind":"mask"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("x.raw"), vec![0u8; 31 * 4]).unwrap();
        let r = load_volume::<f32>(&dir.path().join("x"), VolumeFormat::RawJson);
        assert!(matches!(r, Err(VolumeError::LengthMismatch { .. })));
    }

    #[test]
    fn nifti_round_trip_and_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [VolumeKind::Intensity, VolumeKind::Mask] {
            let v = vol([5, 4, 3], kind);
            let p = dir.path().join("v.nii");
            save_volume(&v, &p, VolumeFormat::Nifti1).unwrap();
            let back: Volume<f32> = load_volume(&p, VolumeFormat::Nifti1).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn nifti_float32_payload_byte_count() {
        // 512·512·40 voxels of 4 bytes each after the 352-byte preamble
        let grid = Grid::new([512, 512, 40], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::<f32>::zeros(grid, VolumeKind::Intensity);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.nii");
        save_volume(&v, &p, VolumeFormat::Nifti1).unwrap();
        let len = fs::metadata(&p).unwrap().len();
        assert_eq!(len - NIFTI_VOX_OFFSET as u64, 10_485_760 * 4);
        let rj = dir.path().join("big.json");
        save_volume(&v, &rj, VolumeFormat::RawJson).unwrap();
        assert_eq!(fs::metadata(dir.path().join("big.raw")).unwrap().len(), 41_943_040);
    }

    #[test]
    fn nifti_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        save_volume(&vol([2, 2, 2], VolumeKind::Intensity), &p, VolumeFormat::Nifti1).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[344..348].copy_from_slice(b"n+2\0");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_volume::<f32>(&p, VolumeFormat::Nifti1),
            Err(VolumeError::MalformedHeader(_))
        ));
    }

    #[test]
    fn nifti_int16_is_read_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i16.nii");
        save_volume(&vol([3, 2, 2], VolumeKind::Intensity), &p, VolumeFormat::Nifti1).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        bytes.truncate(NIFTI_VOX_OFFSET);
        let values: Vec<i16> = (0..12).map(|i| i * 250 - 3).collect();
        for v in &values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let back: Volume<f32> = load_volume(&p, VolumeFormat::Nifti1).unwrap();
        let got: Vec<f32> = back.data().to_vec();
        assert_eq!(got, values.iter().map(|v| *v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn nifti_unsupported_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        save_volume(&vol([2, 2, 2], VolumeKind::Intensity), &p, VolumeFormat::Nifti1).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_volume::<f32>(&p, VolumeFormat::Nifti1),
            Err(VolumeError::UnsupportedDatatype(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_is_lossless(
            dims in prop::array::uniform3(1usize..6),
            spacing in prop::array::uniform3(0.1f32..5.0),
            origin in prop::array::uniform3(-100.0f32..100.0),
            seed in any::<u64>(),
            mask in any::<bool>(),
            nifti in any::<bool>(),
        ) {
            // NIfTI stores geometry as f32, so generate f32-representable values.
            let grid = Grid::new(dims, spacing.map(|s| s as f64), origin.map(|o| o as f64)).unwrap();
            let kind = if mask { VolumeKind::Mask } else { VolumeKind::Intensity };
            let mut state = seed;
            let v = Volume::<f32>::from_fn(grid, kind, |_, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let x = (state >> 40) as f32 / 256.0 - 5000.0;
                if mask { (x > 0.0) as u8 as f32 } else { x }
            }).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (p, fmt) = if nifti {
                (dir.path().join("v.nii"), VolumeFormat::Nifti1)
            } else {
                (dir.path().join("v.json"), VolumeFormat::RawJson)
            };
            save_volume(&v, &p, fmt).unwrap();
            let back: Volume<f32> = load_volume(&p, fmt).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
