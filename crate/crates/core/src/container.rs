//! On-disk trace container.
//!
//! A container is a directory (or a zip archive of one) holding:
//!
//! ```text
//! manifest.json            UTF-8 JSON, see ManifestFile
//! attn_agg.bin             aggregated attention, dims [L, S, N]
//! head_logits_L<l>.bin     optional, dims [H, S, P_l, N]
//! vqa.csv                  optional, columns image_id,c1,c2,n
//! ```
//!
//! Every `.bin` file is a 4-byte magic `DVDT`, a `u16` version (1), a `u8`
//! dtype (0 = f32), a `u8` rank, `rank` dims as `u32`, then the row-major
//! payload. All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{
    validate, AggregatedAttention, Category, HeadLogits, LayerGroups, LayerLogits, TokenMap, Trace, TraceManifest,
    Violation,
};
use crate::scoring::{self, ImageTally};

pub const MAGIC: [u8; 4] = *b"DVDT";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
/// Fixed part of a tensor header: magic, version, dtype and rank.
pub const FIXED_HEADER_LEN: usize = 8;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ATTENTION_FILE: &str = "attn_agg.bin";
pub const VQA_FILE: &str = "vqa.csv";

pub fn head_logits_file(layer: usize) -> String {
    format!("head_logits_L{layer}.bin")
}

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: bad magic {found:?}")]
    BadMagic { file: String, found: [u8; 4] },
    #[error("{file}: unsupported format version {version}")]
    UnsupportedVersion { file: String, version: u32 },
    #[error("{file}: unsupported dtype code {dtype}")]
    UnsupportedDtype { file: String, dtype: u8 },
    #[error("{file}: dims {found:?} do not match expected {expected}")]
    DimMismatch {
        file: String,
        expected: String,
        found: Vec<u32>,
    },
    #[error("{file}: {actual} bytes, expected {expected}")]
    Truncated {
        file: String,
        expected: usize,
        actual: usize,
    },
    #[error("{file}: {actual} bytes, expected exactly {expected}")]
    TrailingBytes {
        file: String,
        expected: usize,
        actual: usize,
    },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("container is missing {0}")]
    MissingFile(String),
    #[error("bad zip archive: {0}")]
    Zip(String),
    #[error("bad {VQA_FILE}: {0}")]
    Vqa(String),
    #[error("trace fails validation: {}", join_violations(.0))]
    InvalidTrace(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// JSON shape of `manifest.json`. Unknown keys are ignored on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub format_version: u32,
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_steps: usize,
    pub scheduler_timesteps: Vec<f64>,
    pub tokens: Vec<String>,
    pub prompt_text: String,
    pub dominant_idx: Option<usize>,
    pub dominated_idx: Option<usize>,
    pub category: Category,
    pub layer_groups: LayerGroups,
}

impl ManifestFile {
    fn from_parts(m: &TraceManifest, t: &TokenMap) -> Self {
        Self {
            format_version: m.format_version,
            model_id: m.model_id.clone(),
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            n_steps: m.n_steps,
            scheduler_timesteps: m.scheduler_timesteps.clone(),
            tokens: t.tokens.clone(),
            prompt_text: t.prompt_text.clone(),
            dominant_idx: t.dominant_idx,
            dominated_idx: t.dominated_idx,
            category: t.category,
            layer_groups: m.layer_groups.clone(),
        }
    }

    fn into_parts(self) -> (TraceManifest, TokenMap) {
        (
            TraceManifest {
                format_version: self.format_version,
                model_id: self.model_id,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                n_steps: self.n_steps,
                scheduler_timesteps: self.scheduler_timesteps,
                layer_groups: self.layer_groups,
            },
            TokenMap {
                prompt_text: self.prompt_text,
                tokens: self.tokens,
                dominant_idx: self.dominant_idx,
                dominated_idx: self.dominated_idx,
                category: self.category,
            },
        )
    }
}

/// A decoded container: the trace plus the optional per-image VQA tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub trace: Trace,
    pub vqa: Option<Vec<ImageTally>>,
}

/// Serializes one f32 tensor with its header.
pub fn encode_tensor(dims: &[usize], values: &[f32]) -> Vec<u8> {
    assert_eq!(
        dims.iter().product::<usize>(),
        values.len(),
        "dims do not cover payload"
    );
    let rank = u8::try_from(dims.len()).expect("rank fits in u8");
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).expect("dimension fits in u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor whose dims must match `expected`, where `None` accepts
/// any positive size. Returns the dims and the payload.
pub fn decode_tensor(
    file: &str,
    bytes: &[u8],
    expected: &[Option<usize>],
) -> Result<(Vec<usize>, Vec<f32>), ContainerError> {
    let truncated = |expected: usize| ContainerError::Truncated {
        file: file.to_string(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < FIXED_HEADER_LEN {
        return Err(truncated(FIXED_HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ContainerError::BadMagic {
            file: file.to_string(),
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion {
            file: file.to_string(),
            version: version.into(),
        });
    }
    if bytes[6] != DTYPE_F32 {
        return Err(ContainerError::UnsupportedDtype {
            file: file.to_string(),
            dtype: bytes[6],
        });
    }
    let rank = bytes[7] as usize;
    let describe = || {
        let parts: Vec<String> = expected
            .iter()
            .map(|d| d.map_or_else(|| "*".to_string(), |d| d.to_string()))
            .collect();
        format!("[{}]", parts.join(", "))
    };
    if rank != expected.len() {
        return Err(ContainerError::DimMismatch {
            file: file.to_string(),
            expected: describe(),
            found: Vec::new(),
        });
    }
    let header_len = FIXED_HEADER_LEN + 4 * rank;
    if bytes.len() < header_len {
        return Err(truncated(header_len));
    }
    let found: Vec<u32> = bytes[FIXED_HEADER_LEN..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let dims_ok = found.iter().zip(expected).all(|(&f, e)| match e {
        Some(e) => f as usize == *e,
        None => f > 0,
    });
    if !dims_ok {
        return Err(ContainerError::DimMismatch {
            file: file.to_string(),
            expected: describe(),
            found,
        });
    }
    let dims: Vec<usize> = found.iter().map(|&d| d as usize).collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ContainerError::DimMismatch {
            file: file.to_string(),
            expected: describe(),
            found: found.clone(),
        })?;
    let total = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(header_len))
        .ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(ContainerError::TrailingBytes {
            file: file.to_string(),
            expected: total,
            actual: bytes.len(),
        });
    }
    let values = bytes[header_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}

/// Files of a container, keyed by name relative to the container root.
struct Files(BTreeMap<String, Vec<u8>>);

impl Files {
    fn load(path: &Path) -> Result<Self, ContainerError> {
        let io = |source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let meta = fs::metadata(path).map_err(io)?;
        if meta.is_dir() {
            let mut files = BTreeMap::new();
            for entry in fs::read_dir(path).map_err(io)? {
                let entry = entry.map_err(io)?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let is_payload = name == MANIFEST_FILE || name == VQA_FILE || name.ends_with(".bin");
                if is_payload && entry.file_type().map_err(io)?.is_file() {
                    let p = entry.path();
                    let bytes = fs::read(&p).map_err(|source| ContainerError::Io {
                        path: p.clone(),
                        source,
                    })?;
                    files.insert(name, bytes);
                }
            }
            Ok(Self(files))
        } else {
            let bytes = fs::read(path).map_err(io)?;
            Self::from_zip(&bytes)
        }
    }

    fn from_zip(bytes: &[u8]) -> Result<Self, ContainerError> {
        let zip_err = |e: zip::result::ZipError| ContainerError::Zip(e.to_string());
        let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).map_err(zip_err)?;
        let names: Vec<String> = archive.file_names().map(str::to_string).collect();
        // The archive may wrap the container in one top-level directory.
        let manifest = names
            .iter()
            .filter(|n| n.rsplit('/').next() == Some(MANIFEST_FILE))
            .min_by_key(|n| n.len())
            .ok_or_else(|| ContainerError::MissingFile(MANIFEST_FILE.into()))?;
        let prefix = &manifest[..manifest.len() - MANIFEST_FILE.len()];
        let mut files = BTreeMap::new();
        for name in &names {
            let Some(rel) = name.strip_prefix(prefix) else { continue };
            if rel.is_empty() || rel.contains('/') {
                continue;
            }
            let mut entry = archive.by_name(name).map_err(zip_err)?;
            let mut buf = Vec::with_capacity(entry.size() as usize);
            entry
                .read_to_end(&mut buf)
                .map_err(|e| ContainerError::Zip(e.to_string()))?;
            files.insert(rel.to_string(), buf);
        }
        Ok(Self(files))
    }

    fn get(&self, name: &str) -> Option<&[u8]> {
        self.0.get(name).map(Vec::as_slice)
    }

    fn require(&self, name: &str) -> Result<&[u8], ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::MissingFile(name.into()))
    }
}

fn parse_logits_layer(name: &str) -> Option<usize> {
    name.strip_prefix("head_logits_L")?.strip_suffix(".bin")?.parse().ok()
}

/// Reads a container directory or zip archive.
pub fn read_container(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
    let files = Files::load(path.as_ref())?;

    let manifest_bytes = files.require(MANIFEST_FILE)?;
    let raw: serde_json::Value =
        serde_json::from_slice(manifest_bytes).map_err(|e| ContainerError::MalformedManifest(e.to_string()))?;
    // Gate on the version before the full schema so newer layouts fail cleanly.
    match raw.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(ContainerError::UnsupportedVersion {
                file: MANIFEST_FILE.into(),
                version: u32::try_from(v).unwrap_or(u32::MAX),
            })
        }
        None => {
            return Err(ContainerError::MalformedManifest(
                "format_version missing or not an integer".into(),
            ))
        }
    }
    let manifest_file: ManifestFile =
        serde_json::from_value(raw).map_err(|e| ContainerError::MalformedManifest(e.to_string()))?;
    let (manifest, token_map) = manifest_file.into_parts();

    let (l, s, n, h) = (
        manifest.n_layers,
        manifest.n_steps,
        token_map.n_tokens(),
        manifest.n_heads,
    );
    let (_, values) = decode_tensor(
        ATTENTION_FILE,
        files.require(ATTENTION_FILE)?,
        &[Some(l), Some(s), Some(n)],
    )?;
    let attention = AggregatedAttention::new(l, s, n, values).expect("decoded payload matches its dims");

    let mut layers = Vec::new();
    for (name, bytes) in &files.0 {
        let Some(layer) = parse_logits_layer(name) else {
            continue;
        };
        let (dims, values) = decode_tensor(name, bytes, &[Some(h), Some(s), None, Some(n)])?;
        let ll = LayerLogits::new(layer, [dims[0], dims[1], dims[2], dims[3]], values)
            .expect("decoded payload matches its dims");
        layers.push(ll);
    }
    let head_logits = (!layers.is_empty()).then(|| HeadLogits::new(layers));

    let trace = Trace {
        manifest,
        token_map,
        attention,
        head_logits,
    };
    let violations = validate(&trace);
    if !violations.is_empty() {
        return Err(ContainerError::InvalidTrace(violations));
    }

    let vqa = files
        .get(VQA_FILE)
        .map(|b| scoring::read_image_tallies(b).map_err(|e| ContainerError::Vqa(e.to_string())))
        .transpose()?;
    Ok(Container { trace, vqa })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace, ContainerError> {
    read_container(path).map(|c| c.trace)
}

/// Serialized files of a container in their canonical write order.
fn render(trace: &Trace, vqa: Option<&[ImageTally]>) -> Result<Vec<(String, Vec<u8>)>, ContainerError> {
    let violations = validate(trace);
    if !violations.is_empty() {
        return Err(ContainerError::InvalidTrace(violations));
    }
    let manifest = ManifestFile::from_parts(&trace.manifest, &trace.token_map);
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');

    let mut files = vec![
        (MANIFEST_FILE.to_string(), json),
        (
            ATTENTION_FILE.to_string(),
            encode_tensor(&trace.attention.shape(), trace.attention.values()),
        ),
    ];
    if let Some(hl) = &trace.head_logits {
        for ll in hl.layers() {
            files.push((head_logits_file(ll.layer()), encode_tensor(&ll.shape(), ll.values())));
        }
    }
    if let Some(rows) = vqa {
        let bytes = scoring::write_image_tallies(rows).map_err(|e| ContainerError::Vqa(e.to_string()))?;
        files.push((VQA_FILE.to_string(), bytes));
    }
    Ok(files)
}

/// Writes a container. A path ending in `.zip` produces an uncompressed
/// archive; anything else is treated as a directory and created if needed.
pub fn write_container(
    trace: &Trace,
    vqa: Option<&[ImageTally]>,
    path: impl AsRef<Path>,
) -> Result<(), ContainerError> {
    let path = path.as_ref();
    let files = render(trace, vqa)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ContainerError::Io { path: p, source }
    };
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip")) {
        let zip_err = |e: zip::result::ZipError| ContainerError::Zip(e.to_string());
        let mut buf = Cursor::new(Vec::new());
        {
            let mut zw = zip::ZipWriter::new(&mut buf);
            // Fixed timestamp and no compression keep archives byte-stable.
            let opts = zip::write::SimpleFileOptions::default()
                .compression_method(zip::CompressionMethod::Stored)
                .last_modified_time(zip::DateTime::default());
            for (name, bytes) in &files {
                zw.start_file(name.as_str(), opts).map_err(zip_err)?;
                zw.write_all(bytes).map_err(io(path))?;
            }
            zw.finish().map_err(zip_err)?;
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        fs::write(path, buf.into_inner()).map_err(io(path))
    } else {
        fs::create_dir_all(path).map_err(io(path))?;
        for (name, bytes) in &files {
            let p = path.join(name);
            fs::write(&p, bytes).map_err(io(&p))?;
        }
        Ok(())
    }
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    write_container(trace, None, path)
}

/// True when `path` looks like a container (a zip file or a directory with
/// a manifest).
pub fn is_container(path: &Path) -> bool {
    if path.is_dir() {
        path.join(MANIFEST_FILE).is_file()
    } else {
        path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"))
    }
}

/// Lists containers for a path: the path itself if it is one, otherwise its
/// immediate children that are containers, sorted by name.
pub fn list_containers(path: &Path) -> Result<Vec<PathBuf>, ContainerError> {
    if is_container(path) {
        return Ok(vec![path.to_path_buf()]);
    }
    let io = |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if is_container(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
