//! The dataset manifest: one CSV row per scenario file, written after
//! every file it references, and re-verified against file headers before
//! any consumer touches the data.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use csi4cast_core::dataset_io::read_dataset_header;
use csi4cast_core::{
    ChannelProfile, Duplex, Error, NoiseType, Result, ScenarioDescriptor, SnrMode,
};

use crate::tables::{column, fmt_f64, parse_f64, parse_u64, read_csv, CsvWriter};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub scenario: ScenarioDescriptor,
    pub samples: u64,
    pub seed: u64,
    pub snr_mode: SnrMode,
}

const COLUMNS: [&str; 11] = [
    "file",
    "velocity_mps",
    "delay_spread_s",
    "profile",
    "noise",
    "degree",
    "duplex",
    "samples",
    "seed",
    "snr_lo_db",
    "snr_hi_db",
];

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = CsvWriter::new(&COLUMNS);
    for e in entries {
        let (lo, hi) = match e.snr_mode {
            SnrMode::Fixed => (String::new(), String::new()),
            SnrMode::UniformRange { lo_db, hi_db } => (fmt_f64(lo_db), fmt_f64(hi_db)),
        };
        w.row([
            e.file.clone(),
            fmt_f64(e.scenario.velocity_mps),
            fmt_f64(e.scenario.delay_spread_s),
            e.scenario.profile.to_string(),
            e.scenario.noise.to_string(),
            fmt_f64(e.scenario.noise_degree),
            e.scenario.duplex.to_string(),
            e.samples.to_string(),
            e.seed.to_string(),
            lo,
            hi,
        ]);
    }
    w.write(&dir.join(MANIFEST_FILE))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let (header, rows) = read_csv(&dir.join(MANIFEST_FILE))?;
    let idx = |name: &str| column(&header, name);
    let (c_file, c_v, c_s) = (idx("file")?, idx("velocity_mps")?, idx("delay_spread_s")?);
    let (c_p, c_n, c_d, c_dup) = (idx("profile")?, idx("noise")?, idx("degree")?, idx("duplex")?);
    let (c_count, c_seed) = (idx("samples")?, idx("seed")?);
    let (c_lo, c_hi) = (idx("snr_lo_db")?, idx("snr_hi_db")?);
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        let snr_mode = match (row[c_lo].as_str(), row[c_hi].as_str()) {
            ("", "") => SnrMode::Fixed,
            (lo, hi) => SnrMode::UniformRange {
                lo_db: parse_f64(lo, "snr_lo_db")?,
                hi_db: parse_f64(hi, "snr_hi_db")?,
            },
        };
        entries.push(ManifestEntry {
            file: row[c_file].clone(),
            scenario: ScenarioDescriptor {
                velocity_mps: parse_f64(&row[c_v], "velocity_mps")?,
                delay_spread_s: parse_f64(&row[c_s], "delay_spread_s")?,
                profile: ChannelProfile::from_str(&row[c_p])?,
                noise: NoiseType::from_str(&row[c_n])?,
                noise_degree: parse_f64(&row[c_d], "degree")?,
                duplex: Duplex::from_str(&row[c_dup])?,
            },
            samples: parse_u64(&row[c_count], "samples")?,
            seed: parse_u64(&row[c_seed], "seed")?,
            snr_mode,
        });
    }
    Ok(entries)
}

/// Read the manifest and cross-check every referenced file: it must
/// exist and its header must repeat the manifest's scenario, sample
/// count, and SNR mode.
pub fn verify_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = read_manifest(dir)?;
    for e in &entries {
        let path = dir.join(&e.file);
        if !path.is_file() {
            return Err(Error::MissingData(format!("dataset file {}", path.display())));
        }
        let header = read_dataset_header(&path)?;
        if header.scenario != e.scenario
            || header.sample_count != e.samples
            || header.snr_mode != e.snr_mode
        {
            return Err(Error::InvalidEncoding(format!(
                "{}: header does not match its manifest row",
                e.file
            )));
        }
    }
    Ok(entries)
}

/// Path of one manifest entry's dataset file.
pub fn entry_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
    dir.join(&entry.file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use csi4cast_core::channel::make_dataset;
    use csi4cast_core::dataset_io::{save_dataset, Dtype};
    use csi4cast_core::SystemConfig;
    use tempfile::tempdir;

    fn tiny_entry(dir: &Path, file: &str, velocity: f64) -> ManifestEntry {
        let config = SystemConfig { n_tx: 1, n_sc: 4, hist_len: 4, pred_len: 2, ..SystemConfig::default() };
        let scenario = ScenarioDescriptor {
            velocity_mps: velocity,
            delay_spread_s: 100e-9,
            profile: ChannelProfile::NlosA,
            noise: NoiseType::None,
            noise_degree: 0.0,
            duplex: Duplex::Tdd,
        };
        let ds = make_dataset(&config, &scenario, 2, 9, SnrMode::Fixed).unwrap();
        save_dataset(&ds, &dir.join(file), Dtype::Complex64).unwrap();
        ManifestEntry { file: file.into(), scenario, samples: 2, seed: 9, snr_mode: SnrMode::Fixed }
    }

    #[test]
    fn round_trips_and_verifies() {
        let dir = tempdir().unwrap();
        let entries = vec![
            tiny_entry(dir.path(), "a.bin", 1.0),
            tiny_entry(dir.path(), "b.bin", 10.0),
        ];
        write_manifest(dir.path(), &entries).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
        assert_eq!(verify_manifest(dir.path()).unwrap(), entries);
    }

    #[test]
    fn missing_file_fails_verification() {
        let dir = tempdir().unwrap();
        let mut entries = vec![tiny_entry(dir.path(), "a.bin", 1.0)];
        entries[0].file = "ghost.bin".into();
        write_manifest(dir.path(), &entries).unwrap();
        assert!(matches!(verify_manifest(dir.path()).unwrap_err(), Error::MissingData(_)));
    }

    #[test]
    fn scenario_mismatch_fails_verification() {
        let dir = tempdir().unwrap();
        let mut entries = vec![tiny_entry(dir.path(), "a.bin", 1.0)];
        entries[0].scenario.velocity_mps = 99.0;
        write_manifest(dir.path(), &entries).unwrap();
        assert!(matches!(verify_manifest(dir.path()).unwrap_err(), Error::InvalidEncoding(_)));
    }

    #[test]
    fn uniform_range_mode_round_trips() {
        let dir = tempdir().unwrap();
        let config = SystemConfig { n_tx: 1, n_sc: 4, hist_len: 4, pred_len: 2, ..SystemConfig::default() };
        let scenario = ScenarioDescriptor {
            velocity_mps: 5.0,
            delay_spread_s: 100e-9,
            profile: ChannelProfile::NlosA,
            noise: NoiseType::Awgn,
            noise_degree: 12.5,
            duplex: Duplex::Tdd,
        };
        let mode = SnrMode::UniformRange { lo_db: 0.0, hi_db: 25.0 };
        let ds = make_dataset(&config, &scenario, 2, 3, mode).unwrap();
        save_dataset(&ds, &dir.path().join("u.bin"), Dtype::Complex64).unwrap();
        let entries =
            vec![ManifestEntry { file: "u.bin".into(), scenario, samples: 2, seed: 3, snr_mode: mode }];
        write_manifest(dir.path(), &entries).unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), entries);
    }
}
