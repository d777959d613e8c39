//! Case directories.
//!
//! A case directory holds `<id>_<channel>.mvol` intensity volumes and an
//! optional `<id>_mask.mvol` lesion mask per case. When a `cases.txt` file
//! is present it lists the case ids, one per line; otherwise the ids are
//! taken from the file names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mvol;
use crate::phantom::CASE_LIST;
use crate::volume::MultiChannelCase;

/// File-name suffix of lesion masks.
pub const MASK_SUFFIX: &str = "mask";

/// `(case id, suffix) -> path` for every `<id>_<suffix>.mvol` in `dir`.
pub fn scan(dir: &Path) -> Result<BTreeMap<(String, String), PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".mvol") else { continue };
        let Some((id, suffix)) = stem.rsplit_once('_') else { continue };
        out.insert((id.to_string(), suffix.to_string()), entry.path());
    }
    Ok(out)
}

fn case_ids(dir: &Path, files: &BTreeMap<(String, String), PathBuf>) -> Result<Vec<String>> {
    let list = dir.join(CASE_LIST);
    if list.exists() {
        let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    let ids: BTreeSet<String> = files.keys().map(|(id, _)| id.clone()).collect();
    Ok(ids.into_iter().collect())
}

/// Loads every case of `dir`. Channels follow `channels` when given (a
/// missing one is a [`Error::ChannelMismatch`]); otherwise all non-mask
/// volumes are loaded in file-name order.
pub fn load_cases(dir: impl AsRef<Path>, channels: Option<&[String]>) -> Result<Vec<MultiChannelCase>> {
    let dir = dir.as_ref();
    let files = scan(dir)?;
    let mut cases = Vec::new();
    for id in case_ids(dir, &files)? {
        let available: Vec<String> = files
            .keys()
            .filter(|(i, s)| *i == id && s != MASK_SUFFIX)
            .map(|(_, s)| s.clone())
            .collect();
        let wanted: Vec<String> = match channels {
            Some(names) => {
                if let Some(missing) = names.iter().find(|n| !available.contains(n)) {
                    log::error!("case {id} has no {missing} volume");
                    return Err(Error::ChannelMismatch { expected: names.to_vec(), found: available });
                }
                names.to_vec()
            }
            None => available,
        };
        if wanted.is_empty() {
            return Err(Error::MissingFile(dir.join(format!("{id}_<channel>.mvol"))));
        }
        let mut vols = Vec::with_capacity(wanted.len());
        for name in wanted {
            let v = mvol::load_volume(&files[&(id.clone(), name.clone())])?;
            vols.push((name, v));
        }
        let mask = match files.get(&(id.clone(), MASK_SUFFIX.to_string())) {
            Some(path) => Some(mvol::load_mask(path)?),
            None => None,
        };
        cases.push(MultiChannelCase::new(id, vols, mask)?);
    }
    Ok(cases)
}
