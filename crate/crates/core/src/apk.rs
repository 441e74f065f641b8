//! APK (ZIP) containers: locate the manifest and every `classesN.dex`.

use std::io::{Cursor, Read, Write};

use thiserror::Error;
use zip::write::SimpleFileOptions;

use crate::dex::{extract_from_dex_with, DexError, DexOptions};
use crate::histogram::{merge_histograms, OpcodeHistogram};
use crate::manifest::{parse_manifest_bytes, ManifestError, PermissionSet};

#[derive(Debug, Error)]
pub enum ApkError {
    #[error("zip: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no AndroidManifest.xml entry")]
    MissingManifest,
    #[error("{entry}: {source}")]
    Dex { entry: String, source: DexError },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Raw entries pulled out of an APK.
#[derive(Debug, Clone, Default)]
pub struct ApkContents {
    pub manifest: Option<Vec<u8>>,
    /// `(entry name, bytes)` ordered classes.dex, classes2.dex, ...
    pub dex_files: Vec<(String, Vec<u8>)>,
}

/// `classes.dex` is index 1, `classesN.dex` is N.
pub fn dex_entry_index(name: &str) -> Option<u32> {
    let stem = name.strip_prefix("classes")?.strip_suffix(".dex")?;
    if stem.is_empty() {
        Some(1)
    } else if stem.starts_with('0') {
        None
    } else {
        stem.parse().ok().filter(|&n| n >= 2)
    }
}

pub fn read_apk(bytes: &[u8]) -> Result<ApkContents, ApkError> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))?;
    let mut contents = ApkContents::default();
    let mut dex: Vec<(u32, String, Vec<u8>)> = Vec::new();
    for i in 0..archive.len() {
        let mut file = archive.by_index(i)?;
        let name = file.name()?.to_string();
        if name == "AndroidManifest.xml" {
            let mut buf = Vec::new();
            file.read_to_end(&mut buf)?;
            contents.manifest = Some(buf);
        } else if let Some(index) = dex_entry_index(&name) {
            let mut buf = Vec::new();
            file.read_to_end(&mut buf)?;
            dex.push((index, name, buf));
        }
    }
    dex.sort_by_key(|(index, _, _)| *index);
    contents.dex_files = dex.into_iter().map(|(_, n, b)| (n, b)).collect();
    Ok(contents)
}

/// Histogram merged over every dex entry, plus requested permissions.
pub fn analyze_apk(
    bytes: &[u8],
    options: DexOptions,
) -> Result<(OpcodeHistogram, PermissionSet), ApkError> {
    let contents = read_apk(bytes)?;
    let manifest = contents
        .manifest
        .as_deref()
        .ok_or(ApkError::MissingManifest)?;
    let perms = parse_manifest_bytes(manifest)?;
    let parts = contents
        .dex_files
        .iter()
        .map(|(entry, data)| {
            extract_from_dex_with(data, options).map_err(|source| ApkError::Dex {
                entry: entry.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((merge_histograms(&parts), perms))
}

/// Writes a stored (uncompressed) APK with the given entries in order.
pub fn write_apk(entries: &[(&str, &[u8])]) -> Result<Vec<u8>, ApkError> {
    let mut writer = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let options = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for (name, data) in entries {
        writer.start_file(*name, options)?;
        writer.write_all(data)?;
    }
    Ok(writer.finish()?.into_inner())
}
