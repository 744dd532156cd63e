//! On-disk dataset layouts.
//!
//! Raw cases: `<root>/<case>/<case>_{flair,t1,t1ce,t2,seg}.nii`.
//! Preprocessed samples: `<root>/<id>_x.nii` (float32, `[spatial.., 4]`) and
//! `<root>/<id>_y.nii` (uint8 class indices).

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, PreprocessedSample, StudyCase, MODALITIES};
use crate::nifti::{read_nifti_file, write_nifti_file, NiftiError, NiftiVolume};

const SEG: &str = "seg";
const X_SUFFIX: &str = "_x.nii";
const Y_SUFFIX: &str = "_y.nii";

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("case {case}: missing {file}")]
    MissingFile { case: String, file: PathBuf },
    #[error("no cases found under {0}")]
    NoCases(PathBuf),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> LayoutError + '_ {
    move |source| LayoutError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn case_file(root: &Path, id: &str, part: &str) -> PathBuf {
    root.join(id).join(format!("{id}_{part}.nii"))
}

/// Case ids (subdirectory names), sorted. Every subdirectory must hold all
/// five files.
pub fn discover_cases(root: &Path) -> Result<Vec<String>, LayoutError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(io(root))? {
        let entry = entry.map_err(io(root))?;
        if !entry.file_type().map_err(io(root))?.is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().into_owned();
        for part in MODALITIES.iter().chain([&SEG]) {
            let file = case_file(root, &id, part);
            if !file.is_file() {
                return Err(LayoutError::MissingFile { case: id, file });
            }
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(LayoutError::NoCases(root.to_path_buf()));
    }
    ids.sort();
    Ok(ids)
}

pub fn read_case(root: &Path, id: &str) -> Result<StudyCase, LayoutError> {
    let modality = |part: &str| -> Result<_, LayoutError> {
        Ok(read_nifti_file(&case_file(root, id, part))?.to_tensor()?)
    };
    let case = StudyCase {
        id: id.to_string(),
        flair: modality(MODALITIES[0])?,
        t1: modality(MODALITIES[1])?,
        t1ce: modality(MODALITIES[2])?,
        t2: modality(MODALITIES[3])?,
        mask: read_nifti_file(&case_file(root, id, SEG))?.to_mask()?,
    };
    case.validate()?;
    Ok(case)
}

pub fn write_case(root: &Path, case: &StudyCase) -> Result<(), LayoutError> {
    let dir = root.join(&case.id);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    for (part, m) in MODALITIES.iter().zip(case.modalities()) {
        write_nifti_file(&case_file(root, &case.id, part), &NiftiVolume::from_tensor(m)?)?;
    }
    write_nifti_file(&case_file(root, &case.id, SEG), &NiftiVolume::from_mask(&case.mask)?)?;
    Ok(())
}

pub fn write_sample(root: &Path, sample: &PreprocessedSample) -> Result<(), LayoutError> {
    fs::create_dir_all(root).map_err(io(root))?;
    write_nifti_file(&root.join(format!("{}{X_SUFFIX}", sample.id)), &NiftiVolume::from_tensor(&sample.x)?)?;
    write_nifti_file(&root.join(format!("{}{Y_SUFFIX}", sample.id)), &NiftiVolume::from_mask(&sample.y)?)?;
    Ok(())
}

pub fn read_sample(root: &Path, id: &str) -> Result<PreprocessedSample, LayoutError> {
    let y_path = root.join(format!("{id}{Y_SUFFIX}"));
    if !y_path.is_file() {
        return Err(LayoutError::MissingFile {
            case: id.to_string(),
            file: y_path,
        });
    }
    let x = read_nifti_file(&root.join(format!("{id}{X_SUFFIX}")))?.to_tensor()?;
    let y = read_nifti_file(&y_path)?.to_mask()?;
    if let Some(&bad) = y.labels().iter().find(|&&l| l as usize >= crate::mask::N_CLASSES) {
        return Err(DataError::UnexpectedLabel(bad).into());
    }
    Ok(PreprocessedSample::new(id, x, y)?)
}

/// All preprocessed samples in a directory, sorted by id.
pub fn read_samples(root: &Path) -> Result<Vec<PreprocessedSample>, LayoutError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(io(root))? {
        let name = entry.map_err(io(root))?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(X_SUFFIX) {
            ids.push(id.to_string());
        }
    }
    if ids.is_empty() {
        return Err(LayoutError::NoCases(root.to_path_buf()));
    }
    ids.sort();
    ids.iter().map(|id| read_sample(root, id)).collect()
}
