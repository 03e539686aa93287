//! Split, prescale and normalise a dataset in one step.

use std::path::PathBuf;

use crate::data::{minmax_normalize, prescale, stratified_split_indices, ChoiceDataset, ScalingRecord};
use crate::error::Result;

/// Default attribute prescale (CHF and minutes become hundreds).
pub const DEFAULT_PRESCALE: f64 = 100.0;

/// Raw Swissmetro file shipped with the crate.
pub fn bundled_swissmetro() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join("swissmetro.dat")
}

/// One stratified split in three unit conventions. Scaling bounds come from
/// the training rows only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train_original: ChoiceDataset,
    pub test_original: ChoiceDataset,
    pub train_prescaled: ChoiceDataset,
    pub test_prescaled: ChoiceDataset,
    pub train: ChoiceDataset,
    pub test: ChoiceDataset,
    pub scaling: ScalingRecord,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

pub fn prepare(ds: &ChoiceDataset, test_fraction: f64, seed: u64, factor: f64) -> Result<PreparedData> {
    let (train_indices, test_indices) = stratified_split_indices(ds.choices(), ds.n_alternatives(), test_fraction, seed)?;
    let train_original = ds.subset(&train_indices);
    let test_original = ds.subset(&test_indices);
    let train_prescaled = prescale(&train_original, factor)?;
    let test_prescaled = prescale(&test_original, factor)?;
    let (train, scaling) = minmax_normalize(&train_prescaled)?;
    let test = scaling.normalize(&test_prescaled)?;
    Ok(PreparedData { train_original, test_original, train_prescaled, test_prescaled, train, test, scaling, train_indices, test_indices })
}
