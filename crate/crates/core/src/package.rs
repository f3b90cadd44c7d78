//! The `ADPK` package container, backbone checkpoints and the zip archive
//! used as the hub's upload unit. The byte layout is documented in
//! `docs/FORMAT.md`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::adapter::{count_adapter_params, preset, AdapterConfig};
use crate::backbone::{BackboneWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::manager::{adapter_prefix, AdapterEntry, AdapterSpec, AdapterType, Model};
use crate::params::{Ownership, Parameter};
use crate::tensor::Tensor;
use crate::train::{head_prefix, HeadKind, PredictionHead};

pub const MAGIC: &[u8; 4] = b"ADPK";
pub const FORMAT_VERSION: u32 = 1;

pub const ZIP_PACKAGE: &str = "adapter.pkg";
pub const ZIP_CONFIG: &str = "adapter_config.txt";
pub const ZIP_METADATA: &str = "metadata.yaml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackageKind {
    Adapter,
    Backbone,
}

impl PackageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PackageKind::Adapter => "adapter",
            PackageKind::Backbone => "backbone",
        }
    }
}

impl FromStr for PackageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(PackageKind::Adapter),
            "backbone" => Ok(PackageKind::Backbone),
            other => Err(Error::Format(format!("unknown package kind '{other}'"))),
        }
    }
}

/// One line of a weights manifest. Names are relative to the adapter or head
/// they belong to, so a package can be registered under a different name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub ownership: Ownership,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl fmt::Display for TensorRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.name,
            self.ownership,
            shape.join("x"),
            self.offset,
            self.byte_len,
            self.sha256
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackageHeader {
    pub kind: PackageKind,
    pub name: String,
    pub adapter_type: Option<AdapterType>,
    pub model_type: String,
    pub model_config_hash: String,
    pub adapter_config_hash: Option<String>,
    /// Preset the configuration matches, or `custom`.
    pub preset: Option<String>,
    pub trained: bool,
    pub seed: Option<u64>,
}

impl PackageHeader {
    fn to_text(&self) -> String {
        let mut out = format!("kind={}\nname={}\n", self.kind.as_str(), self.name);
        if let Some(t) = self.adapter_type {
            out.push_str(&format!("adapter_type={t}\n"));
        }
        out.push_str(&format!("model_type={}\nmodel_config_hash={}\n", self.model_type, self.model_config_hash));
        if let Some(h) = &self.adapter_config_hash {
            out.push_str(&format!("adapter_config_hash={h}\n"));
        }
        if let Some(p) = &self.preset {
            out.push_str(&format!("preset={p}\n"));
        }
        out.push_str(&format!("trained={}\n", self.trained));
        if let Some(s) = self.seed {
            out.push_str(&format!("seed={s}\n"));
        }
        out
    }

    fn from_text(text: &str) -> Result<Self> {
        let kv = crate::descriptor::parse(text)?;
        let header = Self {
            kind: kv.string("kind")?.parse()?,
            name: kv.string("name")?,
            adapter_type: kv.optional("adapter_type").map(str::parse).transpose()?,
            model_type: kv.string("model_type")?,
            model_config_hash: kv.string("model_config_hash")?,
            adapter_config_hash: kv.optional("adapter_config_hash").map(str::to_string),
            preset: kv.optional("preset").map(str::to_string),
            trained: kv.parse("trained")?,
            seed: kv.optional("seed").map(|s| s.parse()).transpose().map_err(|_| Error::Format("invalid seed".into()))?,
        };
        kv.finish_with(&[
            "kind",
            "name",
            "adapter_type",
            "model_type",
            "model_config_hash",
            "adapter_config_hash",
            "preset",
            "trained",
            "seed",
        ])?;
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSection {
    pub name: String,
    pub kind: HeadKind,
    pub model_config_hash: String,
    pub manifest: Vec<TensorRecord>,
    pub blob: Vec<u8>,
}

impl HeadSection {
    fn header_text(&self) -> String {
        let mut out = format!("name={}\n", self.name);
        match self.kind {
            HeadKind::Classification { num_classes } => {
                out.push_str(&format!("head_kind=classification\nnum_classes={num_classes}\n"))
            }
            HeadKind::Regression => out.push_str("head_kind=regression\n"),
        }
        out.push_str(&format!("model_config_hash={}\n", self.model_config_hash));
        out
    }

    fn parse_header(text: &str) -> Result<(String, HeadKind, String)> {
        let kv = crate::descriptor::parse(text)?;
        let kind = match kv.string("head_kind")?.as_str() {
            "classification" => HeadKind::Classification { num_classes: kv.parse("num_classes")? },
            "regression" => HeadKind::Regression,
            other => return Err(Error::Format(format!("unknown head kind '{other}'"))),
        };
        kv.finish_with(&["name", "head_kind", "num_classes", "model_config_hash"])?;
        Ok((kv.string("name")?, kind, kv.string("model_config_hash")?))
    }

    pub fn num_params(&self) -> usize {
        self.manifest.iter().map(TensorRecord::numel).sum()
    }

    pub fn to_head(&self, model: &ModelConfig) -> Result<PredictionHead> {
        let mut tensors = decode_tensors(&self.manifest, &self.blob)?;
        let mut take = |n: &str| {
            tensors.remove(n).ok_or_else(|| Error::Format(format!("head section is missing tensor '{n}'")))
        };
        let weight = take("weight")?;
        let bias = take("bias")?;
        if model.hash() != self.model_config_hash {
            return Err(Error::IncompatibleModel { package: self.model_config_hash.clone(), live: model.hash() });
        }
        PredictionHead::from_tensors(&self.name, self.kind, model, weight, bias)
    }
}

/// A decoded, checksum-verified package.
#[derive(Debug, Clone, PartialEq)]
pub struct Package {
    pub format_version: u32,
    pub header: PackageHeader,
    pub model_config: ModelConfig,
    pub adapter_config: Option<AdapterConfig>,
    pub manifest: Vec<TensorRecord>,
    pub blob: Vec<u8>,
    pub head: Option<HeadSection>,
    pub sha256: String,
}

fn encode_tensors<'a>(params: impl IntoIterator<Item = (String, &'a Parameter)>) -> (Vec<TensorRecord>, Vec<u8>) {
    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    for (name, p) in params {
        let offset = blob.len() as u64;
        let start = blob.len();
        for v in p.value().data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let bytes = &blob[start..];
        manifest.push(TensorRecord {
            name,
            ownership: p.ownership(),
            shape: p.shape().to_vec(),
            offset,
            byte_len: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }
    (manifest, blob)
}

fn decode_tensors(manifest: &[TensorRecord], blob: &[u8]) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::with_capacity(manifest.len());
    for r in manifest {
        let bytes = &blob[r.offset as usize..(r.offset + r.byte_len) as usize];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if out.insert(r.name.clone(), Tensor::new(r.shape.clone(), data)?).is_some() {
            return Err(Error::Format(format!("manifest repeats tensor '{}'", r.name)));
        }
    }
    Ok(out)
}

fn parse_manifest(text: &str) -> Result<Vec<TensorRecord>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::Format(format!("manifest line has {} columns, expected 6: {line}", cols.len())));
        }
        let bad = |what: &str| Error::Format(format!("manifest line has invalid {what}: {line}"));
        let shape = cols[2].split('x').map(|d| d.parse::<usize>().map_err(|_| bad("shape"))).collect::<Result<_>>()?;
        out.push(TensorRecord {
            name: cols[0].to_string(),
            ownership: Ownership::parse(cols[1]).ok_or_else(|| bad("ownership"))?,
            shape,
            offset: cols[3].parse().map_err(|_| bad("offset"))?,
            byte_len: cols[4].parse().map_err(|_| bad("byte length"))?,
            sha256: cols[5].to_string(),
        });
    }
    Ok(out)
}

fn manifest_text(manifest: &[TensorRecord]) -> String {
    manifest.iter().map(|r| format!("{r}\n")).collect()
}

/// Check that the manifest tiles the blob exactly and that every slice matches its digest.
fn check_manifest(manifest: &[TensorRecord], blob: &[u8]) -> Result<()> {
    let mut expected_offset = 0u64;
    for r in manifest {
        if r.offset != expected_offset || r.byte_len != 4 * r.numel() as u64 {
            return Err(Error::Format(format!("tensor '{}' has an inconsistent offset or length", r.name)));
        }
        expected_offset += r.byte_len;
        if expected_offset > blob.len() as u64 {
            return Err(Error::Format(format!("tensor '{}' extends past the end of the blob", r.name)));
        }
        let slice = &blob[r.offset as usize..expected_offset as usize];
        if hex::encode(Sha256::digest(slice)) != r.sha256 {
            return Err(Error::Checksum(format!("tensor '{}' does not match its digest", r.name)));
        }
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Format(format!("blob has {} bytes, manifest covers {expected_offset}", blob.len())));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("package is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("section is not valid UTF-8".into()))
    }

    fn blob(&mut self) -> Result<Vec<u8>> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Format("blob length overflows".into()))?;
        Ok(self.take(n)?.to_vec())
    }
}

fn put_text(out: &mut Vec<u8>, text: &str) {
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

fn head_section(head: &PredictionHead) -> HeadSection {
    let prefix = head_prefix(head.name());
    let (manifest, blob) =
        encode_tensors(head.parameters().into_iter().map(|p| (p.name().trim_start_matches(&prefix).to_string(), p)));
    HeadSection {
        name: head.name().to_string(),
        kind: head.kind(),
        model_config_hash: head.model_hash().to_string(),
        manifest,
        blob,
    }
}

impl Package {
    /// Extract the weights of adapter `name`, and optionally a head, from `model`.
    pub fn from_adapter(model: &Model, name: &str, head: Option<&str>) -> Result<Self> {
        let head = head.map(|h| model.head(h)).transpose()?;
        Self::from_entry(model.config(), model.adapter(name)?, head)
    }

    /// Package a registry entry directly; `model` must be the configuration it was built for.
    pub fn from_entry(model: &ModelConfig, entry: &AdapterEntry, head: Option<&PredictionHead>) -> Result<Self> {
        if entry.layers.len() != model.num_layers {
            return Err(Error::InvalidConfig(format!(
                "adapter has {} layers, model has {}",
                entry.layers.len(),
                model.num_layers
            )));
        }
        let prefix = adapter_prefix(&entry.name);
        let (manifest, blob) = encode_tensors(
            entry.parameters().into_iter().map(|p| (p.name().trim_start_matches(&prefix).to_string(), p)),
        );
        let header = PackageHeader {
            kind: PackageKind::Adapter,
            name: entry.name.clone(),
            adapter_type: Some(entry.adapter_type),
            model_type: model.model_type.clone(),
            model_config_hash: model.hash(),
            adapter_config_hash: Some(entry.config.hash()),
            preset: Some(entry.config.matching_preset().map_or("custom".to_string(), |p| p.name().to_string())),
            trained: entry.trained,
            seed: None,
        };
        let head = head.map(head_section);
        Ok(Self::assemble(header, model.clone(), Some(entry.config.clone()), manifest, blob, head))
    }

    /// Capture the backbone weights, and optionally a head, as a checkpoint.
    pub fn from_backbone(model: &Model, head: Option<&str>) -> Result<Self> {
        let (manifest, blob) = encode_tensors(model.backbone().parameters().into_iter().map(|p| (p.name().to_string(), p)));
        let header = PackageHeader {
            kind: PackageKind::Backbone,
            name: "backbone".into(),
            adapter_type: None,
            model_type: model.config().model_type.clone(),
            model_config_hash: model.config().hash(),
            adapter_config_hash: None,
            preset: None,
            trained: true,
            seed: Some(model.seed()),
        };
        let head = head.map(|h| model.head(h).map(head_section)).transpose()?;
        Ok(Self::assemble(header, model.config().clone(), None, manifest, blob, head))
    }

    fn assemble(
        header: PackageHeader,
        model_config: ModelConfig,
        adapter_config: Option<AdapterConfig>,
        manifest: Vec<TensorRecord>,
        blob: Vec<u8>,
        head: Option<HeadSection>,
    ) -> Self {
        let mut pkg = Self {
            format_version: FORMAT_VERSION,
            header,
            model_config,
            adapter_config,
            manifest,
            blob,
            head,
            sha256: String::new(),
        };
        let bytes = pkg.body_bytes();
        pkg.sha256 = hex::encode(Sha256::digest(&bytes));
        pkg
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.blob.len() + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        put_text(&mut out, &self.header.to_text());
        put_text(&mut out, &self.model_config.descriptor());
        put_text(&mut out, &self.adapter_config.as_ref().map(AdapterConfig::descriptor).unwrap_or_default());
        put_text(&mut out, &manifest_text(&self.manifest));
        put_blob(&mut out, &self.blob);
        match &self.head {
            Some(h) => {
                put_text(&mut out, &h.header_text());
                put_text(&mut out, &manifest_text(&h.manifest));
                put_blob(&mut out, &h.blob);
            }
            None => {
                put_text(&mut out, "");
                put_text(&mut out, "");
                put_blob(&mut out, &[]);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        out.extend_from_slice(&Sha256::digest(&out));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an ADPK package".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(Error::Checksum("package sha256 does not match its contents".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {format_version}")));
        }
        let header = PackageHeader::from_text(&r.text()?)?;
        let model_config = ModelConfig::from_descriptor(&r.text()?)?;
        let adapter_text = r.text()?;
        let manifest = parse_manifest(&r.text()?)?;
        let blob = r.blob()?;
        let head_header = r.text()?;
        let head_manifest = r.text()?;
        let head_blob = r.blob()?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last section".into()));
        }

        if model_config.hash() != header.model_config_hash {
            return Err(Error::Format("model descriptor does not match model_config_hash".into()));
        }
        let adapter_config = match header.kind {
            PackageKind::Adapter => {
                let cfg = AdapterConfig::from_descriptor(&adapter_text)?;
                if header.adapter_config_hash.as_deref() != Some(cfg.hash().as_str()) {
                    return Err(Error::Format("adapter descriptor does not match adapter_config_hash".into()));
                }
                if header.adapter_type.is_none() {
                    return Err(Error::Format("adapter package has no adapter_type".into()));
                }
                if manifest.iter().any(|r| r.ownership != Ownership::Adapter) {
                    return Err(Error::Format("adapter package holds non-adapter tensors".into()));
                }
                Some(cfg)
            }
            PackageKind::Backbone => {
                if !adapter_text.is_empty() {
                    return Err(Error::Format("backbone checkpoint carries an adapter descriptor".into()));
                }
                None
            }
        };
        check_manifest(&manifest, &blob)?;

        let head = if head_header.is_empty() {
            if !head_manifest.is_empty() || !head_blob.is_empty() {
                return Err(Error::Format("head tensors present without a head header".into()));
            }
            None
        } else {
            let (name, kind, model_config_hash) = HeadSection::parse_header(&head_header)?;
            let manifest = parse_manifest(&head_manifest)?;
            check_manifest(&manifest, &head_blob)?;
            Some(HeadSection { name, kind, model_config_hash, manifest, blob: head_blob })
        };
        Ok(Self {
            format_version,
            header,
            model_config,
            adapter_config,
            manifest,
            blob,
            head,
            sha256: hex::encode(digest),
        })
    }

    pub fn num_params(&self) -> usize {
        self.manifest.iter().map(TensorRecord::numel).sum()
    }

    pub fn tensors(&self) -> Result<HashMap<String, Tensor>> {
        decode_tensors(&self.manifest, &self.blob)
    }

    /// Rebuild the adapter as a registry entry named `name`, checking every
    /// tensor name and shape against the configuration.
    pub fn to_entry(&self, name: &str) -> Result<AdapterEntry> {
        let config = self
            .adapter_config
            .clone()
            .ok_or_else(|| Error::Format("backbone checkpoint holds no adapter".into()))?;
        let adapter_type = self.header.adapter_type.expect("checked on decode");
        let mut entry = AdapterEntry::new(name, adapter_type, config, &self.model_config, 0);
        let mut tensors = self.tensors()?;
        let prefix = adapter_prefix(name);
        for p in entry.parameters_mut() {
            let rel = p.name().trim_start_matches(&prefix).to_string();
            let t = tensors.remove(&rel).ok_or_else(|| Error::Format(format!("package is missing tensor '{rel}'")))?;
            if t.shape() != p.shape() {
                return Err(Error::Format(format!(
                    "tensor '{rel}' has shape {:?}, the configuration implies {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p.value_mut() = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("package holds unexpected tensor '{extra}'")));
        }
        entry.trained = self.header.trained;
        Ok(entry)
    }

    pub fn to_backbone(&self) -> Result<BackboneWeights> {
        if self.header.kind != PackageKind::Backbone {
            return Err(Error::Format("package is not a backbone checkpoint".into()));
        }
        BackboneWeights::from_named(&self.model_config, self.tensors()?)
    }
}

/// Write `bytes` to `path` via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_package(path: &Path) -> Result<Package> {
    Package::from_bytes(&fs::read(path)?)
}

pub fn save_adapter(model: &Model, name: &str, destination: &Path) -> Result<Package> {
    save_adapter_with_head(model, name, None, destination)
}

pub fn save_adapter_with_head(model: &Model, name: &str, head: Option<&str>, destination: &Path) -> Result<Package> {
    let pkg = Package::from_adapter(model, name, head)?;
    write_atomic(destination, &pkg.to_bytes())?;
    Ok(pkg)
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Configuration the caller expects; a preset name matches any reduction factor.
    pub config: Option<AdapterSpec>,
    /// Register under this name instead of the one stored in the package.
    pub rename: Option<String>,
    pub load_head: bool,
}

fn check_requested_config(requested: &AdapterSpec, found: &AdapterConfig) -> Result<()> {
    let ok = match requested {
        AdapterSpec::Preset(name) => {
            preset(name)?;
            found.matching_preset().is_some_and(|p| p.name() == name.as_str())
        }
        AdapterSpec::Config(cfg) => cfg.hash() == found.hash(),
    };
    if ok {
        return Ok(());
    }
    let requested = match requested {
        AdapterSpec::Preset(name) => name.clone(),
        AdapterSpec::Config(cfg) => cfg.hash(),
    };
    let found = found.matching_preset().map_or_else(|| found.hash(), |p| p.name().to_string());
    Err(Error::ConfigConflict { requested, found })
}

/// Register a decoded package in `model`; returns the registered adapter name.
pub fn install_package(model: &mut Model, pkg: &Package, opts: &LoadOptions) -> Result<String> {
    if pkg.header.kind != PackageKind::Adapter {
        return Err(Error::Format("expected an adapter package, found a backbone checkpoint".into()));
    }
    let live = model.config().hash();
    if pkg.header.model_config_hash != live {
        return Err(Error::IncompatibleModel { package: pkg.header.model_config_hash.clone(), live });
    }
    let config = pkg.adapter_config.as_ref().expect("adapter packages carry a config");
    if let Some(requested) = &opts.config {
        check_requested_config(requested, config)?;
    }
    let name = opts.rename.clone().unwrap_or_else(|| pkg.header.name.clone());
    let mut entry = pkg.to_entry(&name)?;
    entry.trained = true;
    let head = match (&pkg.head, opts.load_head) {
        (Some(h), true) => Some(h.to_head(model.config())?),
        _ => None,
    };
    model.insert_adapter(entry)?;
    if let Some(h) = head {
        model.attach_head(h)?;
    }
    Ok(name)
}

pub fn load_adapter(model: &mut Model, source: &Path, opts: &LoadOptions) -> Result<String> {
    let pkg = read_package(source)?;
    install_package(model, &pkg, opts)
}

pub fn save_backbone(model: &Model, head: Option<&str>, destination: &Path) -> Result<Package> {
    let pkg = Package::from_backbone(model, head)?;
    write_atomic(destination, &pkg.to_bytes())?;
    Ok(pkg)
}

/// Restore a model (and its head, when the checkpoint has one) from a backbone checkpoint.
pub fn load_backbone(source: &Path) -> Result<Model> {
    let pkg = read_package(source)?;
    let backbone = pkg.to_backbone()?;
    let mut model = Model::from_backbone(pkg.model_config.clone(), backbone, pkg.header.seed.unwrap_or(0));
    if let Some(h) = &pkg.head {
        model.attach_head(h.to_head(&pkg.model_config)?)?;
    }
    Ok(model)
}

#[derive(Debug, Serialize)]
struct MetadataStub<'a> {
    id: &'a str,
    #[serde(rename = "type")]
    adapter_type: String,
    model_type: &'a str,
    model_hash: &'a str,
    config_hash: &'a str,
    config: &'a str,
    reduction_factor: usize,
}

/// Metadata skeleton stored in the zip; hub fields such as url and sha256 are added at upload time.
pub fn metadata_stub(pkg: &Package) -> Result<String> {
    let config = pkg.adapter_config.as_ref().ok_or_else(|| Error::Format("backbone checkpoint holds no adapter".into()))?;
    let stub = MetadataStub {
        id: &pkg.header.name,
        adapter_type: pkg.header.adapter_type.map(|t| t.to_string()).unwrap_or_default(),
        model_type: &pkg.header.model_type,
        model_hash: &pkg.header.model_config_hash,
        config_hash: pkg.header.adapter_config_hash.as_deref().unwrap_or_default(),
        config: pkg.header.preset.as_deref().unwrap_or("custom"),
        reduction_factor: config.reduction_factor,
    };
    serde_yaml::to_string(&stub).map_err(|e| Error::Format(e.to_string()))
}

/// Zip the package together with its standalone configuration and a metadata stub.
/// Entries carry a fixed timestamp so equal inputs give equal archives.
pub fn pack_zip(package: &Path, metadata: &str, destination: &Path) -> Result<Package> {
    let bytes = fs::read(package)?;
    let pkg = Package::from_bytes(&bytes)?;
    let config = pkg
        .adapter_config
        .as_ref()
        .ok_or_else(|| Error::Format("only adapter packages can be zipped".into()))?;
    let opts = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default());
    let mut zip = ZipWriter::new(std::io::Cursor::new(Vec::new()));
    zip.start_file(ZIP_PACKAGE, opts)?;
    zip.write_all(&bytes)?;
    zip.start_file(ZIP_CONFIG, opts)?;
    zip.write_all(config.descriptor().as_bytes())?;
    zip.start_file(ZIP_METADATA, opts)?;
    zip.write_all(metadata.as_bytes())?;
    let archive = zip.finish()?.into_inner();
    write_atomic(destination, &archive)?;
    Ok(pkg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub name: String,
    pub model_config_hash: String,
    pub adapter_config_hash: String,
    pub preset: String,
    pub params: usize,
    pub head_params: usize,
    pub blob_bytes: usize,
    pub package_sha256: String,
}

fn read_entry<R: Read + std::io::Seek>(zip: &mut ZipArchive<R>, name: &str, missing: &str) -> Result<Vec<u8>> {
    let mut file = match zip.by_name(name) {
        Ok(f) => f,
        Err(zip::result::ZipError::FileNotFound) => return Err(Error::Verify(format!("missing {missing}"))),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    file.read_to_end(&mut out)?;
    Ok(out)
}

pub fn verify_zip_bytes(archive: &[u8]) -> Result<VerifyReport> {
    let mut zip = ZipArchive::new(std::io::Cursor::new(archive))?;
    let pkg_bytes = read_entry(&mut zip, ZIP_PACKAGE, "package")?;
    let config_bytes = read_entry(&mut zip, ZIP_CONFIG, "configuration")?;
    read_entry(&mut zip, ZIP_METADATA, "metadata")?;
    let pkg = Package::from_bytes(&pkg_bytes)?;
    let text = String::from_utf8(config_bytes).map_err(|_| Error::Verify("configuration is not UTF-8".into()))?;
    let config = AdapterConfig::from_descriptor(&text)?;
    let embedded = pkg
        .adapter_config
        .as_ref()
        .ok_or_else(|| Error::Verify("archive holds a backbone checkpoint".into()))?;
    if embedded.hash() != config.hash() {
        return Err(Error::Verify("standalone configuration differs from the one in the package".into()));
    }
    pkg.to_entry(&pkg.header.name)?;
    let params = count_adapter_params(&pkg.model_config, &config);
    if params != pkg.num_params() || pkg.blob.len() != 4 * params {
        return Err(Error::Verify(format!("manifest holds {} parameters, configuration implies {params}", pkg.num_params())));
    }
    if let Some(h) = &pkg.head {
        h.to_head(&pkg.model_config)?;
    }
    Ok(VerifyReport {
        name: pkg.header.name.clone(),
        model_config_hash: pkg.header.model_config_hash.clone(),
        adapter_config_hash: config.hash(),
        preset: pkg.header.preset.clone().unwrap_or_else(|| "custom".into()),
        params,
        head_params: pkg.head.as_ref().map_or(0, HeadSection::num_params),
        blob_bytes: pkg.blob.len(),
        package_sha256: pkg.sha256.clone(),
    })
}

pub fn verify_zip(path: &Path) -> Result<VerifyReport> {
    verify_zip_bytes(&fs::read(path)?)
}
