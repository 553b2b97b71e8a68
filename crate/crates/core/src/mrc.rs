//! MRC2014 file I/O, restricted to mode 2 (32-bit float).
//!
//! The subset written here is a 1024-byte header followed by the raw float32
//! grid in x-fastest order, always little-endian with the standard machine
//! stamp. Reading honors the header-declared byte order and skips any
//! extended header. Volumes are written with `ISPG = 1`, single images and
//! frame stacks with `ISPG = 0`; stacks are the plain frame-count extension
//! (`NZ` = frame count, square frames).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::volume::{DensityVolume, Micrograph};
use crate::{Error, Result};

const HEADER_LEN: usize = 1024;
const MODE_FLOAT32: i32 = 2;
const NVERSION: i32 = 20140;

/// Contents of an MRC file: a cubic volume, a single image, or a frame stack.
#[derive(Debug, Clone)]
pub enum MrcContent {
    Volume(DensityVolume),
    Image(Micrograph),
    Stack(Vec<Micrograph>),
}

struct Header {
    nx: usize,
    ny: usize,
    nz: usize,
    mode: i32,
    cell_x: f32,
    ispg: i32,
    nsymbt: i32,
    big_endian: bool,
}

fn parse_header(raw: &[u8]) -> Result<Header> {
    if &raw[208..212] != b"MAP " {
        return Err(Error::BadMrcHeader("missing MAP magic at word 53".into()));
    }
    // Machine stamp: 0x44 0x44 (or 0x44 0x41) little endian, 0x11 0x11 big.
    let big_endian = match (raw[212], raw[213]) {
        (0x44, _) => false,
        (0x11, 0x11) => true,
        (a, b) => {
            return Err(Error::BadMrcHeader(format!(
                "unrecognized machine stamp {a:#04x} {b:#04x}"
            )))
        }
    };
    let i32_at = |off: usize| -> i32 {
        if big_endian {
            BigEndian::read_i32(&raw[off..off + 4])
        } else {
            LittleEndian::read_i32(&raw[off..off + 4])
        }
    };
    let f32_at = |off: usize| -> f32 {
        if big_endian {
            BigEndian::read_f32(&raw[off..off + 4])
        } else {
            LittleEndian::read_f32(&raw[off..off + 4])
        }
    };
    let (nx, ny, nz) = (i32_at(0), i32_at(4), i32_at(8));
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(Error::BadMrcHeader(format!(
            "non-positive dimensions {nx}x{ny}x{nz}"
        )));
    }
    Ok(Header {
        nx: nx as usize,
        ny: ny as usize,
        nz: nz as usize,
        mode: i32_at(12),
        cell_x: f32_at(40),
        ispg: i32_at(88),
        nsymbt: i32_at(92),
        big_endian,
    })
}

/// Reads an MRC2014 mode-2 file and classifies it as a volume, image, or
/// frame stack.
///
/// `NZ = 1` yields an image. With `NZ > 1`, a cubic grid is a volume (stacks
/// this crate writes are square frames, and reading a cubic stack as a
/// volume is harmless for the eval path); a non-cubic grid with `NX = NY`
/// and `ISPG = 0` is a stack; anything else is rejected as a non-cubic
/// volume.
pub fn read_mrc(path: &Path) -> Result<MrcContent> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut reader = BufReader::new(file);

    let mut raw = [0u8; HEADER_LEN];
    if file_len < HEADER_LEN as u64 {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN as u64,
            found: file_len,
        });
    }
    reader.read_exact(&mut raw)?;
    let hdr = parse_header(&raw)?;

    if hdr.mode != MODE_FLOAT32 {
        return Err(Error::UnsupportedMrcMode(hdr.mode));
    }
    if hdr.nsymbt > 0 {
        std::io::copy(
            &mut reader.by_ref().take(hdr.nsymbt as u64),
            &mut std::io::sink(),
        )?;
    }

    let n_values = hdr.nx * hdr.ny * hdr.nz;
    let expected = HEADER_LEN as u64 + hdr.nsymbt.max(0) as u64 + 4 * n_values as u64;
    if file_len < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: file_len,
        });
    }

    let mut bytes = vec![0u8; 4 * n_values];
    reader.read_exact(&mut bytes)?;
    let mut values = vec![0f32; n_values];
    if hdr.big_endian {
        BigEndian::read_f32_into(&bytes, &mut values);
    } else {
        LittleEndian::read_f32_into(&bytes, &mut values);
    }
    let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();

    if hdr.cell_x <= 0.0 {
        return Err(Error::BadMrcHeader("non-positive cell dimension".into()));
    }
    let sampling = hdr.cell_x as f64 / hdr.nx as f64;

    if hdr.nz == 1 {
        let grid = Array2::from_shape_vec((hdr.ny, hdr.nx), data)
            .expect("shape matches value count");
        return Ok(MrcContent::Image(Micrograph::new(grid, sampling)?));
    }
    if hdr.nx == hdr.ny && hdr.ny == hdr.nz {
        let grid = Array3::from_shape_vec((hdr.nz, hdr.ny, hdr.nx), data)
            .expect("shape matches value count");
        return Ok(MrcContent::Volume(DensityVolume::new(grid, sampling)?));
    }
    if hdr.nx == hdr.ny && hdr.ispg == 0 {
        let frame_len = hdr.nx * hdr.ny;
        let frames = data
            .chunks_exact(frame_len)
            .map(|chunk| {
                let grid = Array2::from_shape_vec((hdr.ny, hdr.nx), chunk.to_vec())
                    .expect("shape matches value count");
                Micrograph::new(grid, sampling)
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(MrcContent::Stack(frames));
    }
    Err(Error::NonCubicVolume {
        nx: hdr.nx as i64,
        ny: hdr.ny as i64,
        nz: hdr.nz as i64,
    })
}

/// Reads a file that must contain a cubic volume.
pub fn read_volume(path: &Path) -> Result<DensityVolume> {
    match read_mrc(path)? {
        MrcContent::Volume(v) => Ok(v),
        MrcContent::Image(_) | MrcContent::Stack(_) => Err(Error::NonCubicVolume {
            nx: -1,
            ny: -1,
            nz: -1,
        }),
    }
}

/// Reads a file that must contain a single 2D image.
pub fn read_micrograph(path: &Path) -> Result<Micrograph> {
    match read_mrc(path)? {
        MrcContent::Image(m) => Ok(m),
        other => Err(Error::BadMrcHeader(format!(
            "expected a single 2D image, found {}",
            match other {
                MrcContent::Volume(_) => "a volume",
                MrcContent::Stack(_) => "a stack",
                MrcContent::Image(_) => unreachable!(),
            }
        ))),
    }
}

/// Reads a frame stack; a single image comes back as a one-frame stack.
pub fn read_stack(path: &Path) -> Result<Vec<Micrograph>> {
    match read_mrc(path)? {
        MrcContent::Stack(frames) => Ok(frames),
        MrcContent::Image(m) => Ok(vec![m]),
        MrcContent::Volume(v) => {
            // A cubic particle stack is indistinguishable from a volume by
            // shape alone; split it into frames.
            let side = v.side();
            let frames = (0..side)
                .map(|z| {
                    let slice = v.data().index_axis(ndarray::Axis(0), z).to_owned();
                    Micrograph::new(slice, v.voxel_size())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(frames)
        }
    }
}

fn write_header<W: Write>(
    w: &mut W,
    dims: (usize, usize, usize),
    sampling: f64,
    stats: (f32, f32, f32, f32),
    ispg: i32,
) -> Result<()> {
    let (nx, ny, nz) = dims;
    let (dmin, dmax, dmean, rms) = stats;
    let mut hdr = Vec::with_capacity(HEADER_LEN);
    for &d in &[nx, ny, nz] {
        hdr.write_i32::<LittleEndian>(d as i32)?;
    }
    hdr.write_i32::<LittleEndian>(MODE_FLOAT32)?;
    for _ in 0..3 {
        hdr.write_i32::<LittleEndian>(0)?; // NXSTART/NYSTART/NZSTART
    }
    for &d in &[nx, ny, nz] {
        hdr.write_i32::<LittleEndian>(d as i32)?; // MX/MY/MZ
    }
    for &d in &[nx, ny, nz] {
        hdr.write_f32::<LittleEndian>((d as f64 * sampling) as f32)?; // CELLA
    }
    for _ in 0..3 {
        hdr.write_f32::<LittleEndian>(90.0)?; // CELLB
    }
    for &axis in &[1i32, 2, 3] {
        hdr.write_i32::<LittleEndian>(axis)?; // MAPC/MAPR/MAPS
    }
    hdr.write_f32::<LittleEndian>(dmin)?;
    hdr.write_f32::<LittleEndian>(dmax)?;
    hdr.write_f32::<LittleEndian>(dmean)?;
    hdr.write_i32::<LittleEndian>(ispg)?;
    hdr.write_i32::<LittleEndian>(0)?; // NSYMBT
    hdr.extend_from_slice(&[0u8; 12]); // EXTRA + EXTTYP
    hdr.write_i32::<LittleEndian>(NVERSION)?;
    hdr.extend_from_slice(&[0u8; 84]); // EXTRA through byte 195
    for _ in 0..3 {
        hdr.write_f32::<LittleEndian>(0.0)?; // ORIGIN
    }
    hdr.extend_from_slice(b"MAP ");
    hdr.extend_from_slice(&[0x44, 0x44, 0x00, 0x00]); // MACHST little endian
    hdr.write_f32::<LittleEndian>(rms)?;
    hdr.write_i32::<LittleEndian>(0)?; // NLABL
    hdr.resize(HEADER_LEN, 0u8);
    debug_assert_eq!(hdr.len(), HEADER_LEN);
    w.write_all(&hdr)?;
    Ok(())
}

fn stats_f32(values: &[f32]) -> (f32, f32, f32, f32) {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    let mut sum = 0f64;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v as f64;
    }
    let mean = sum / values.len() as f64;
    let ss: f64 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
    let rms = (ss / values.len() as f64).sqrt();
    (min, max, mean as f32, rms as f32)
}

fn write_grid(path: &Path, dims: (usize, usize, usize), sampling: f64, data: &[f64], ispg: i32) -> Result<()> {
    let values: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    let stats = stats_f32(&values);
    let mut writer = BufWriter::new(File::create(path)?);
    write_header(&mut writer, dims, sampling, stats, ispg)?;
    let mut bytes = vec![0u8; 4 * values.len()];
    LittleEndian::write_f32_into(&values, &mut bytes);
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}

/// Writes any MRC content; statistics header words are recomputed from the
/// float32-converted data.
pub fn write_mrc(content: &MrcContent, path: &Path) -> Result<()> {
    match content {
        MrcContent::Volume(v) => write_volume(v, path),
        MrcContent::Image(m) => write_micrograph(m, path),
        MrcContent::Stack(frames) => write_stack(frames, path),
    }
}

pub fn write_volume(v: &DensityVolume, path: &Path) -> Result<()> {
    let d = v.side();
    let data = v.data().as_standard_layout();
    write_grid(path, (d, d, d), v.voxel_size(), data.as_slice().unwrap(), 1)
}

pub fn write_micrograph(m: &Micrograph, path: &Path) -> Result<()> {
    let data = m.data().as_standard_layout();
    write_grid(
        path,
        (m.width(), m.height(), 1),
        m.pixel_size(),
        data.as_slice().unwrap(),
        0,
    )
}

/// Writes square frames as a stack (`NZ` = frame count).
pub fn write_stack(frames: &[Micrograph], path: &Path) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidGrid("empty stack".into()))?;
    let (h, w) = (first.height(), first.width());
    if h != w {
        return Err(Error::InvalidGrid(format!("stack frames must be square, got {h}x{w}")));
    }
    let mut data = Vec::with_capacity(h * w * frames.len());
    for frame in frames {
        if frame.height() != h || frame.width() != w {
            return Err(Error::DimMismatch(format!(
                "stack frame {}x{} vs {}x{}",
                frame.height(),
                frame.width(),
                h,
                w
            )));
        }
        let std_layout = frame.data().as_standard_layout();
        data.extend_from_slice(std_layout.as_slice().unwrap());
    }
    write_grid(path, (w, h, frames.len()), first.pixel_size(), &data, 0)
}
