//! Output directories, provenance stamps and the seed worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{CtlError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_VAR: &str = "LILAC_THREADS";

/// Creates an empty command directory. An existing one is refused unless
/// `force`, in which case it is replaced.
pub fn claim(dir: &Path, force: bool) -> Result<PathBuf> {
    if dir.exists() {
        if !force {
            return Err(CtlError::Refused(format!("{} exists (use --force)", dir.display())));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// First line of every CSV file.
pub fn csv_stamp(hash: &str) -> String {
    format!("# lilac {VERSION} config {hash}\n")
}

/// Drops `#` comment lines.
pub fn csv_body(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#'))
}

/// Worker count from `LILAC_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CtlError::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Applies `f` to every item on at most `threads` workers; results keep
/// item order. The first error wins.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                let failed = r.is_err();
                slots.lock().expect("worker panicked")[i] = Some(r);
                if failed {
                    next.store(items.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let slots = slots.into_inner().expect("worker panicked");
    let mut out = Vec::with_capacity(items.len());
    for r in slots.into_iter().flatten() {
        out.push(r?);
    }
    if out.len() != items.len() {
        return Err(CtlError::Runtime("worker stopped early".into()));
    }
    Ok(out)
}

/// Quotes a CSV field when it holds a comma or quote.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// File-name form of a baseline name.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "+-_".contains(c) { c } else { '_' })
        .collect()
}
