//! On-disk dataset format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic            8 bytes   "CSI4CAST"
//! version          u32       currently 1
//! n_tx             u32
//! n_rx             u32
//! n_sc             u32
//! n_guard          u32
//! hist_len         u32
//! pred_len         u32
//! carrier_freq_hz  f64
//! sc_spacing_hz    f64
//! report_interval  f64
//! duplex           u8
//! velocity_mps     f64
//! delay_spread_s   f64
//! profile          u8
//! noise_type       u8
//! noise_degree     f64
//! scenario duplex  u8
//! snr mode         u8        0 fixed, 1 per-sample uniform range
//! snr lo_db        f64       0 when fixed
//! snr hi_db        f64       0 when fixed
//! sample_count     u64
//! dtype            u8        0 complex64 (f32 pairs), 1 complex128 (f64 pairs)
//! ```
//!
//! followed by `sample_count` records, each:
//!
//! ```text
//! seed             u64
//! noise_degree     f64       this sample's actual degree
//! start_time_s     f64       history start; target start is derived
//! history          n_tx * hist_len * n_sc elements
//! target           n_tx * pred_len * n_sc elements
//! ```
//!
//! Tensor elements are row-major over (antenna, time, subcarrier) with
//! interleaved (re, im) parts in the header's dtype. A complex128 file
//! round-trips bit-exactly; complex64 narrows each part to f32 on save.

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::types::{
    ChannelProfile, CsiDataset, CsiSample, CsiSequence, Duplex, NoiseType, ScenarioDescriptor,
    SnrMode, SystemConfig,
};
use ndarray::Array3;
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 8] = *b"CSI4CAST";
const VERSION: u32 = 1;

/// Element encoding for CSI tensors on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Complex64,
    Complex128,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::Complex64 => 0,
            Dtype::Complex128 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Complex64),
            1 => Ok(Dtype::Complex128),
            other => Err(Error::InvalidEncoding(format!("dtype code {other}"))),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c64" | "complex64" => Ok(Dtype::Complex64),
            "c128" | "complex128" => Ok(Dtype::Complex128),
            other => Err(Error::InvalidConfig(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Everything before the sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFileHeader {
    pub config: SystemConfig,
    pub scenario: ScenarioDescriptor,
    pub snr_mode: SnrMode,
    pub sample_count: u64,
    pub dtype: Dtype,
}

fn write_config<W: Write>(w: &mut LeWriter<W>, config: &SystemConfig) -> Result<()> {
    w.u32(config.n_tx as u32)?;
    w.u32(config.n_rx as u32)?;
    w.u32(config.n_sc as u32)?;
    w.u32(config.n_guard as u32)?;
    w.u32(config.hist_len as u32)?;
    w.u32(config.pred_len as u32)?;
    w.f64(config.carrier_freq_hz)?;
    w.f64(config.sc_spacing_hz)?;
    w.f64(config.report_interval_s)?;
    w.u8(config.duplex.code())
}

fn read_config<R: Read>(r: &mut LeReader<R>) -> Result<SystemConfig> {
    Ok(SystemConfig {
        n_tx: r.u32()? as usize,
        n_rx: r.u32()? as usize,
        n_sc: r.u32()? as usize,
        n_guard: r.u32()? as usize,
        hist_len: r.u32()? as usize,
        pred_len: r.u32()? as usize,
        carrier_freq_hz: r.f64()?,
        sc_spacing_hz: r.f64()?,
        report_interval_s: r.f64()?,
        duplex: Duplex::from_code(r.u8()?)?,
    })
}

fn write_scenario<W: Write>(w: &mut LeWriter<W>, sc: &ScenarioDescriptor) -> Result<()> {
    w.f64(sc.velocity_mps)?;
    w.f64(sc.delay_spread_s)?;
    w.u8(sc.profile.code())?;
    w.u8(sc.noise.code())?;
    w.f64(sc.noise_degree)?;
    w.u8(sc.duplex.code())
}

fn read_scenario<R: Read>(r: &mut LeReader<R>) -> Result<ScenarioDescriptor> {
    Ok(ScenarioDescriptor {
        velocity_mps: r.f64()?,
        delay_spread_s: r.f64()?,
        profile: ChannelProfile::from_code(r.u8()?)?,
        noise: NoiseType::from_code(r.u8()?)?,
        noise_degree: r.f64()?,
        duplex: Duplex::from_code(r.u8()?)?,
    })
}

fn write_tensor<W: Write>(w: &mut LeWriter<W>, data: &Array3<Complex64>, dtype: Dtype) -> Result<()> {
    for c in data.iter() {
        match dtype {
            Dtype::Complex64 => {
                w.f32(c.re as f32)?;
                w.f32(c.im as f32)?;
            }
            Dtype::Complex128 => {
                w.f64(c.re)?;
                w.f64(c.im)?;
            }
        }
    }
    Ok(())
}

fn read_tensor<R: Read>(
    r: &mut LeReader<R>,
    shape: (usize, usize, usize),
    dtype: Dtype,
) -> Result<Array3<Complex64>> {
    let mut data = Array3::zeros(shape);
    for c in data.iter_mut() {
        *c = match dtype {
            Dtype::Complex64 => Complex64::new(r.f32()? as f64, r.f32()? as f64),
            Dtype::Complex128 => Complex64::new(r.f64()?, r.f64()?),
        };
    }
    Ok(data)
}

/// Write a dataset. `Dtype::Complex128` preserves every bit; use
/// `Dtype::Complex64` to halve the file size when f32 precision is enough.
pub fn save_dataset(dataset: &CsiDataset, path: &Path, dtype: Dtype) -> Result<()> {
    dataset.validate()?;
    let mut w = LeWriter::new(BufWriter::new(File::create(path)?));
    w.bytes(&MAGIC)?;
    w.u32(VERSION)?;
    write_config(&mut w, &dataset.config)?;
    write_scenario(&mut w, &dataset.scenario)?;
    match dataset.snr_mode {
        SnrMode::Fixed => {
            w.u8(0)?;
            w.f64(0.0)?;
            w.f64(0.0)?;
        }
        SnrMode::UniformRange { lo_db, hi_db } => {
            w.u8(1)?;
            w.f64(lo_db)?;
            w.f64(hi_db)?;
        }
    }
    w.u64(dataset.samples.len() as u64)?;
    w.u8(dtype.code())?;
    for sample in &dataset.samples {
        w.u64(sample.seed)?;
        w.f64(sample.scenario.noise_degree)?;
        w.f64(sample.history.start_time_s)?;
        write_tensor(&mut w, &sample.history.data, dtype)?;
        write_tensor(&mut w, &sample.target.data, dtype)?;
    }
    w.finish()
}

fn read_header_from<R: Read>(r: &mut LeReader<R>) -> Result<DatasetFileHeader> {
    r.expect_magic(&MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let config = read_config(r)?;
    let scenario = read_scenario(r)?;
    let snr_mode = match r.u8()? {
        0 => {
            r.f64()?;
            r.f64()?;
            SnrMode::Fixed
        }
        1 => SnrMode::UniformRange { lo_db: r.f64()?, hi_db: r.f64()? },
        other => return Err(Error::InvalidEncoding(format!("snr mode code {other}"))),
    };
    let sample_count = r.u64()?;
    let dtype = Dtype::from_code(r.u8()?)?;
    Ok(DatasetFileHeader { config, scenario, snr_mode, sample_count, dtype })
}

/// Read just the header, for fast catalog listings.
pub fn read_dataset_header(path: &Path) -> Result<DatasetFileHeader> {
    let mut r = LeReader::new(BufReader::new(File::open(path)?));
    read_header_from(&mut r)
}

pub fn load_dataset(path: &Path) -> Result<CsiDataset> {
    let mut r = LeReader::new(BufReader::new(File::open(path)?));
    let header = read_header_from(&mut r)?;
    let config = header.config;
    let dt = config.report_interval_s;
    let mut samples = Vec::with_capacity(header.sample_count as usize);
    for _ in 0..header.sample_count {
        let seed = r.u64()?;
        let degree = r.f64()?;
        let start = r.f64()?;
        let history_data = read_tensor(
            &mut r,
            (config.n_tx, config.hist_len, config.n_sc),
            header.dtype,
        )?;
        let target_data = read_tensor(
            &mut r,
            (config.n_tx, config.pred_len, config.n_sc),
            header.dtype,
        )?;
        let history = CsiSequence::new(history_data, start, dt)?;
        let target = CsiSequence::new(target_data, start + config.hist_len as f64 * dt, dt)?;
        samples.push(CsiSample {
            history,
            target,
            scenario: ScenarioDescriptor {
                noise_degree: degree,
                ..header.scenario.clone()
            },
            seed,
        });
    }
    let dataset = CsiDataset {
        config,
        scenario: header.scenario,
        snr_mode: header.snr_mode,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}
