//! Synthetic breast phantoms whose target volume is decided by a clinical record.

mod dataset;
mod record;
mod synth;
mod volume;

pub use dataset::{case_seed, generate_case, generate_cases, write_dataset, Case, Manifest, ManifestEntry};
pub use record::{ClinicalRecord, Field, Laterality, NStage, Surgery, TStage, AGE_RANGE};
pub use synth::{anatomy_labels, base_intensity, label, side_of, synthesize, target_mask, GridSpec, Phantom, NOISE_SIGMA};
pub use volume::{
    normalize_hu, read_volume, write_volume, Grid, IntensityVolume, LabelVolume, MaskVolume, VolumeData, VolumeKind, MAGIC,
};
