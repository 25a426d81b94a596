use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::Utc;

use crate::config::RunConfig;

/// Output directory of one command invocation plus its manifest.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    started: String,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    notes: Vec<String>,
}

impl RunDir {
    /// Creates `<out>/<command>-<UTC timestamp>-<seed>`, adding a numeric
    /// suffix if that name is taken.
    pub fn create(out: &Path, command: &str, seed: u64) -> Result<Self> {
        let now = Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let base = format!("{command}-{stamp}-{seed}");
        let mut path = out.join(&base);
        let mut k = 1;
        while path.exists() {
            path = out.join(format!("{base}.{k}"));
            k += 1;
        }
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(RunDir {
            path,
            command: command.to_string(),
            started: now.to_rfc3339(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.display().to_string()));
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Writes `contents` to `name` inside the run directory.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.record(name);
        Ok(())
    }

    /// Lists a file or directory written by other means.
    pub fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn finish(self, cfg: &RunConfig) -> Result<PathBuf> {
        let mut m = String::new();
        m.push_str(&format!("command={}\n", self.command));
        m.push_str(&format!("started_utc={}\n", self.started));
        m.push_str(&format!("seed={}\n", cfg.raw("seed")));
        m.push_str(&format!("stsens_version={}\n", env!("CARGO_PKG_VERSION")));
        m.push_str(&format!("checkpoint_format={}\n", stsens_core::model::FORMAT_VERSION));
        let threads = rayon::current_num_threads();
        m.push_str(&format!("threads={threads}\n"));
        for (role, p) in &self.inputs {
            m.push_str(&format!("input.{role}={p}\n"));
        }
        for o in &self.outputs {
            m.push_str(&format!("output={o}\n"));
        }
        for n in &self.notes {
            m.push_str(&format!("note={n}\n"));
        }
        m.push_str("\n[config]\n");
        m.push_str(&cfg.echo());
        fs::write(self.path.join("manifest.txt"), m)?;
        fs::write(self.path.join("config.txt"), cfg.echo())?;
        Ok(self.path)
    }
}
