use std::fs;
use std::path::{Path, PathBuf};

use super::record::ClinicalRecord;
use super::synth::{synthesize, GridSpec};
use super::volume::{read_volume, write_volume, Grid, VolumeData};
use crate::error::{Error, Result};

/// One phantom: record, normalized intensities, ground-truth mask and anatomy labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub record: ClinicalRecord,
    pub intensity: Grid<f32>,
    pub mask: Grid<u8>,
    pub labels: Option<Grid<u8>>,
}

/// Per-case seed derived from a dataset seed (SplitMix64 finalizer).
pub fn case_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_case(id: String, seed: u64, spec: &GridSpec) -> Result<Case> {
    let record = ClinicalRecord::sample(seed);
    let p = synthesize(&record, seed, spec)?;
    Ok(Case { id, record, intensity: p.intensity, mask: p.mask, labels: Some(p.labels) })
}

pub fn generate_cases(n: usize, seed: u64, spec: &GridSpec) -> Result<Vec<Case>> {
    (0..n).map(|i| generate_case(format!("case_{i:04}"), case_seed(seed, i), spec)).collect()
}

/// Manifest line: record, volume and mask paths, plus an optional label path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub record: PathBuf,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub labels: Option<PathBuf>,
}

impl ManifestEntry {
    /// Case id: the volume file stem.
    pub fn id(&self) -> String {
        self.volume.file_stem().map_or_else(|| self.volume.display().to_string(), |s| s.to_string_lossy().into_owned())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses whitespace-separated lines; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(Error::Data(format!("manifest line {}: expected 3 or 4 paths, found {}", n + 1, cols.len())));
            }
            let p = |s: &str| base.join(s);
            entries.push(ManifestEntry { record: p(cols[0]), volume: p(cols[1]), mask: p(cols[2]), labels: cols.get(3).map(|s| p(s)) });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every referenced path that does not exist.
    pub fn missing(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| [Some(&e.record), Some(&e.volume), Some(&e.mask), e.labels.as_ref()])
            .flatten()
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }

    /// Loads every case; any missing file fails up front with the full list.
    pub fn load(&self) -> Result<Vec<Case>> {
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(Error::Manifest(missing));
        }
        self.entries
            .iter()
            .map(|e| {
                let text = fs::read_to_string(&e.record).map_err(|err| Error::io(&e.record, err))?;
                let intensity = read_volume(&e.volume)?.into_intensity()?;
                let mask = read_volume(&e.mask)?.into_mask()?;
                if mask.dims() != intensity.dims() {
                    return Err(Error::Data(format!("{}: mask grid {:?} differs from volume {:?}", e.id(), mask.dims(), intensity.dims())));
                }
                let labels = e.labels.as_ref().map(|p| read_volume(p)?.into_labels()).transpose()?;
                Ok(Case { id: e.id(), record: ClinicalRecord::parse_file(&text)?, intensity, mask, labels })
            })
            .collect()
    }
}

/// Writes `n` phantoms plus `manifest.txt` into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, n: usize, seed: u64, spec: &GridSpec) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for i in 0..n {
        let case = generate_case(format!("case_{i:04}"), case_seed(seed, i), spec)?;
        let names = ["rec", "vol", "mask", "labels"].map(|ext| format!("{}.{ext}", case.id));
        fs::write(dir.join(&names[0]), case.record.to_file_string()).map_err(|e| Error::io(dir.join(&names[0]), e))?;
        write_volume(&dir.join(&names[1]), &VolumeData::Intensity(case.intensity))?;
        write_volume(&dir.join(&names[2]), &VolumeData::Mask(case.mask))?;
        write_volume(&dir.join(&names[3]), &VolumeData::Labels(case.labels.expect("generated cases carry labels")))?;
        manifest.push_str(&names.join(" "));
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
