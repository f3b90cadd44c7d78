//! Download of published archives into a content-addressed cache.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use adaptkit::package::{verify_zip_bytes, VerifyReport, ZIP_CONFIG, ZIP_METADATA, ZIP_PACKAGE};
use sha2::{Digest, Sha256};

use crate::error::{HubError, Result};
use crate::metadata::{is_sha256_hex, HubEntry};

/// Environment variable overriding the cache location.
pub const CACHE_ENV: &str = "ADAPTKIT_CACHE";

const ARCHIVE: &str = "archive.zip";
const MAX_ARCHIVE_BYTES: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedAdapter {
    pub dir: PathBuf,
    pub archive: PathBuf,
    pub package: PathBuf,
    /// True when no transfer took place.
    pub from_cache: bool,
}

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$ADAPTKIT_CACHE`, else `~/.cache/adaptkit`, else a directory under the system temp dir.
    pub fn from_env() -> Self {
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
            return Self::new(dir);
        }
        match std::env::var_os("HOME").filter(|d| !d.is_empty()) {
            Some(home) => Self::new(Path::new(&home).join(".cache").join("adaptkit")),
            None => Self::new(std::env::temp_dir().join("adaptkit-cache")),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn slot(&self, sha256: &str) -> PathBuf {
        self.root.join(sha256)
    }

    /// The cached copy of the archive with digest `sha256`, if a complete one exists.
    pub fn lookup(&self, sha256: &str) -> Option<CachedAdapter> {
        if !is_sha256_hex(sha256) {
            return None;
        }
        let dir = self.slot(sha256);
        let archive = dir.join(ARCHIVE);
        let package = dir.join(ZIP_PACKAGE);
        let bytes = fs::read(&archive).ok()?;
        if hex::encode(Sha256::digest(&bytes)) != sha256 || !package.is_file() {
            return None;
        }
        Some(CachedAdapter { dir, archive, package, from_cache: true })
    }

    /// Fetch the archive of `entry`, verify its digest and unpack it into the cache.
    /// A second fetch of the same digest is served locally.
    pub fn fetch(&self, entry: &HubEntry) -> Result<CachedAdapter> {
        if let Some(hit) = self.lookup(&entry.sha256) {
            return Ok(hit);
        }
        let bytes = download(&entry.url)?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if actual != entry.sha256 {
            return Err(HubError::Digest { url: entry.url.clone(), expected: entry.sha256.clone(), actual });
        }
        self.store(&entry.sha256, &bytes)?;
        let mut out = self.lookup(&entry.sha256).ok_or_else(|| HubError::Index("cache slot vanished".into()))?;
        out.from_cache = false;
        Ok(out)
    }

    fn store(&self, sha256: &str, archive: &[u8]) -> Result<VerifyReport> {
        let report = verify_zip_bytes(archive)?;
        fs::create_dir_all(&self.root)?;
        let tmp = tempfile::Builder::new().prefix(".partial-").tempdir_in(&self.root)?;
        fs::write(tmp.path().join(ARCHIVE), archive)?;
        let mut zip = zip::ZipArchive::new(std::io::Cursor::new(archive)).map_err(adaptkit::Error::from)?;
        for name in [ZIP_PACKAGE, ZIP_CONFIG, ZIP_METADATA] {
            let mut file = zip.by_name(name).map_err(adaptkit::Error::from)?;
            let mut buf = Vec::new();
            file.read_to_end(&mut buf)?;
            fs::write(tmp.path().join(name), buf)?;
        }
        let slot = self.slot(sha256);
        let staged = tmp.keep();
        if let Err(e) = fs::rename(&staged, &slot) {
            let _ = fs::remove_dir_all(&staged);
            // Another fetch of the same digest finished first.
            if self.lookup(sha256).is_none() {
                return Err(e.into());
            }
        }
        Ok(report)
    }
}

/// Raw bytes behind a `file://`, `http://` or `https://` url.
pub fn download(url: &str) -> Result<Vec<u8>> {
    let parsed = url::Url::parse(url).map_err(|_| HubError::Url(url.to_string()))?;
    let transport = |message: String| HubError::Transport { url: url.to_string(), message };
    match parsed.scheme() {
        "file" => {
            let path = parsed.to_file_path().map_err(|_| HubError::Url(url.to_string()))?;
            fs::read(&path).map_err(|e| transport(format!("{}: {e}", path.display())))
        }
        "http" | "https" => {
            let mut response = ureq::get(url).call().map_err(|e| transport(e.to_string()))?;
            response
                .body_mut()
                .with_config()
                .limit(MAX_ARCHIVE_BYTES)
                .read_to_vec()
                .map_err(|e| transport(e.to_string()))
        }
        _ => Err(HubError::Url(url.to_string())),
    }
}
