//! Output files and the manifest that records their hashes.

use std::path::{Path, PathBuf};

use drpo_core::experiments::Manifest;
use drpo_core::Document;
use serde_json::Value;

use crate::{CliResult, Ctx};

pub(crate) struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
}

impl Outputs {
    pub(crate) fn new(ctx: &Ctx, subcommand: &str, config: Value, seed: u64) -> CliResult<Self> {
        std::fs::create_dir_all(&ctx.out_dir)?;
        Ok(Self { dir: ctx.out_dir.clone(), manifest: Manifest::new(subcommand, config, seed, ctx.seed.from_env) })
    }

    /// Writes `bytes` to `name` inside the output directory.
    pub(crate) fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)?;
        self.manifest.record_output(name, bytes);
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// Writes to `explicit` if given, else to `name` in the output directory.
    pub(crate) fn write_to(&mut self, explicit: Option<&Path>, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        match explicit {
            None => self.write(name, bytes),
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(p, bytes)?;
                self.manifest.record_output(&p.display().to_string(), bytes);
                Ok(p.to_path_buf())
            }
        }
    }

    pub(crate) fn finish(self) -> CliResult<()> {
        let path = self.dir.join("manifest.json");
        self.manifest.write_file(&path)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}
