//! Append-only run directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::{RunConfig, THREADS_ENV};

/// A fresh directory for one command invocation.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `explicit` must not exist yet or be empty. Otherwise a new
    /// `<root>/<command>-<timestamp>` is created, suffixed when taken.
    pub fn create(command: &str, explicit: Option<&Path>, root: &Path) -> Result<Self> {
        if let Some(p) = explicit {
            if p.exists() && fs::read_dir(p).with_context(|| format!("reading {}", p.display()))?.next().is_some() {
                bail!("output directory {} exists and is not empty", p.display());
            }
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
            return Ok(Self { path: p.to_path_buf() });
        }
        fs::create_dir_all(root).with_context(|| format!("creating output root {}", root.display()))?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        for k in 0.. {
            let name = if k == 0 { format!("{command}-{stamp}") } else { format!("{command}-{stamp}-{k}") };
            let p = root.join(name);
            match fs::create_dir(&p) {
                Ok(()) => return Ok(Self { path: p }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", p.display())),
            }
        }
        unreachable!()
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        self.write("config.toml", cfg.to_toml()?)
    }
}

/// Caps the global worker pool. `threads` wins over the environment variable.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(s.parse().with_context(|| format!("{THREADS_ENV}={s} is not a count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}
