//! Sharing side of adaptkit: metadata validation, the hub index and its
//! explore tree, compatibility-aware name resolution and cached downloads.

pub mod error;
pub mod fetch;
pub mod index;
pub mod metadata;

pub use error::{HubError, Result, Violation};
pub use fetch::{download, Cache, CachedAdapter, CACHE_ENV};
pub use index::{ExploreTree, HubIndex, Level1};
pub use metadata::{ingest_file, ingest_metadata, HubEntry};

use adaptkit::{LoadOptions, Model};

/// Resolve `query` for `model`, fetch the archive through `cache` and register the adapter.
pub fn load_from_hub(
    model: &mut Model,
    index: &HubIndex,
    cache: &Cache,
    query: &str,
    opts: &LoadOptions,
) -> Result<String> {
    let config = opts.config.as_ref().map(|c| match c {
        adaptkit::AdapterSpec::Preset(name) => name.clone(),
        adaptkit::AdapterSpec::Config(cfg) => cfg.hash(),
    });
    let entry = index.resolve(query, &model.config().hash(), config.as_deref())?;
    let cached = cache.fetch(entry)?;
    Ok(adaptkit::load_adapter(model, &cached.package, opts)?)
}
