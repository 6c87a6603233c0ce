//! Directory format: `manifest.json` plus `params.f64`, a little-endian
//! blob of every parameter in [`PromptBank::flat_params`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BankConfig, BankError, PromptBank, PromptEntry};

pub const BANK_FORMAT: &str = "promptrag-bank";
pub const BANK_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankManifest {
    pub format: String,
    pub version: u32,
    pub config: BankConfig,
    pub seed: u64,
    pub parameter_count: usize,
    pub checksum: u32,
}

pub(crate) fn blob_bytes(flat: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(flat.len() * 8);
    for x in flat {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BankError + '_ {
    move |source| BankError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl PromptBank {
    pub fn manifest(&self) -> BankManifest {
        BankManifest {
            format: BANK_FORMAT.to_string(),
            version: BANK_VERSION,
            config: self.config,
            seed: self.seed,
            parameter_count: self.parameter_count(),
            checksum: self.checksum(),
        }
    }

    /// Writes the bank into directory `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<(), BankError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let blob = blob_bytes(&self.flat_params());
        let mut manifest = self.manifest();
        manifest.checksum = crc32fast::hash(&blob);
        let blob_path = dir.join(BLOB);
        fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
        let man_path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| BankError::Malformed(e.to_string()))?;
        fs::write(&man_path, text).map_err(io_err(&man_path))?;
        Ok(())
    }

    /// Reads a bank written by [`PromptBank::save`], verifying the checksum.
    pub fn load(dir: &Path) -> Result<Self, BankError> {
        let man_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&man_path).map_err(io_err(&man_path))?;
        let manifest: BankManifest =
            serde_json::from_str(&text).map_err(|e| BankError::Malformed(format!("{}: {e}", man_path.display())))?;
        if manifest.format != BANK_FORMAT {
            return Err(BankError::Malformed(format!("unexpected format tag {:?}", manifest.format)));
        }
        if manifest.version != BANK_VERSION {
            return Err(BankError::VersionMismatch {
                expected: BANK_VERSION,
                found: manifest.version,
            });
        }
        manifest.config.validate()?;
        let blob_path = dir.join(BLOB);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        let found = crc32fast::hash(&blob);
        if found != manifest.checksum {
            return Err(BankError::ChecksumMismatch {
                expected: manifest.checksum,
                found,
            });
        }
        let expected_len = manifest.config.parameter_count() * 8;
        if blob.len() != expected_len || manifest.parameter_count != manifest.config.parameter_count() {
            return Err(BankError::Malformed(format!(
                "blob holds {} bytes, config requires {expected_len}",
                blob.len()
            )));
        }
        let flat: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let entries = (0..manifest.config.entries)
            .map(|_| PromptEntry::zeros(&manifest.config))
            .collect();
        let mut bank = PromptBank::from_entries(manifest.config, manifest.seed, entries)?;
        bank.set_flat_params(&flat)?;
        Ok(bank)
    }
}
