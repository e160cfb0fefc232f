//! JSONL dataset manifests and split assignment files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use muscall_core::audio::decode_wav;
use muscall_core::config::SplitConfig;
use muscall_core::trainer::{assign_splits, Dataset, Pair, Split};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Environment variable naming the dataset root when `--data` is absent.
pub const DATA_DIR_ENV: &str = "MUSCALL_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

/// One manifest line. `audio_path` is relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub audio_path: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

/// Finds the manifest: `data` may be the file itself or a directory holding
/// `manifest.jsonl`; without it, `$MUSCALL_DATA_DIR` is used.
pub fn locate_manifest(data: Option<&Path>) -> CliResult<PathBuf> {
    let root = match data {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Data(format!("no dataset given: pass --data or set {DATA_DIR_ENV}")))?,
    };
    let path = if root.is_dir() { root.join(MANIFEST_FILE) } else { root };
    if !path.is_file() {
        return Err(CliError::Data(format!("manifest {} not found", path.display())));
    }
    Ok(path)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads and checks a manifest: ids unique, audio files present.
pub fn load_manifest(path: &Path) -> CliResult<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = base_dir(path);
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if !seen.insert(row.id.clone()) {
            return Err(CliError::Data(format!("duplicate id {} in {}", row.id, path.display())));
        }
        let audio = base.join(&row.audio_path);
        if !audio.is_file() {
            return Err(CliError::Data(format!("audio for {} not found at {}", row.id, audio.display())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("manifest {} has no rows", path.display())));
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

/// Reads a `{id: "train" | "valid" | "test"}` object.
pub fn load_splits(path: &Path) -> CliResult<HashMap<String, Split>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_splits(path: &Path, assignment: &[(String, Split)]) -> CliResult<()> {
    let map: BTreeMap<&str, Split> = assignment.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    std::fs::write(path, serde_json::to_string_pretty(&map)?).map_err(|e| CliError::io(path, e))
}

/// Split of every manifest row: from `splits.json` beside the manifest when
/// present, otherwise a seeded random partition.
pub fn split_rows(manifest: &Path, rows: &[ManifestRow], fractions: &SplitConfig, seed: u64) -> CliResult<Vec<Split>> {
    let file = base_dir(manifest).join(SPLITS_FILE);
    if file.is_file() {
        let map = load_splits(&file)?;
        rows.iter()
            .map(|r| {
                map.get(&r.id)
                    .copied()
                    .ok_or_else(|| CliError::Data(format!("{} has no split for {}", file.display(), r.id)))
            })
            .collect()
    } else {
        Ok(assign_splits(rows.len(), fractions, seed))
    }
}

/// Decodes the audio of the rows in `wanted` splits into a [`Dataset`].
pub fn load_dataset(
    manifest: &Path,
    rows: &[ManifestRow],
    splits: &[Split],
    wanted: &[Split],
) -> CliResult<Dataset> {
    let base = base_dir(manifest);
    let mut ds = Dataset::default();
    for (row, &split) in rows.iter().zip(splits) {
        if !wanted.contains(&split) {
            continue;
        }
        let pair = Pair {
            id: row.id.clone(),
            audio: decode_wav(base.join(&row.audio_path))?,
            caption: row.caption.clone(),
        };
        match split {
            Split::Train => ds.train.push(pair),
            Split::Valid => ds.valid.push(pair),
            Split::Test => ds.test.push(pair),
        }
    }
    Ok(ds)
}
