//! On-disk formats: PGM images, JSONL manifests, checkpoints, flat JSON
//! configs and atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::net::{Architecture, ModelParams};
use crate::synth::{DefectClass, Sample};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDDCKPT1";

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialise");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value))
}

/// One compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("report types serialise");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

// ---- PGM ----

/// Encodes a `[H, W]` or `[1, H, W]` tensor with values in `[0, 1]` as
/// binary 8-bit PGM.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => {
            return Err(Error::dim(
                "encode_pgm",
                format!("expected [H,W] or [1,H,W], got {s:?}"),
            ))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes binary PGM into `[H, W]` with values scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::format(path, "not a binary PGM (magic P5)"));
    }
    let mut num = |field: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::format(path, format!("bad PGM {field}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 {
        return Err(Error::format(path, "PGM has a zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path,
            format!("only 8-bit PGM is supported, maxval {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::format(path, format!("PGM raster truncated, need {} bytes", w * h)))?;
    let scale = maxval as f32;
    Tensor::new(vec![h, w], raster.iter().map(|&b| b as f32 / scale).collect())
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pgm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read(path)?, path)
}

// ---- manifest ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

/// Writes images, masks and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    create_dir(&dir.join("images"))?;
    let with_masks = samples.iter().any(|s| s.mask.is_some());
    if with_masks {
        create_dir(&dir.join("masks"))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("images/{}.pgm", s.id);
        write_pgm(&dir.join(&image), &s.image)?;
        let mask = match &s.mask {
            Some(m) => {
                let rel = format!("masks/{}.pgm", s.id);
                write_pgm(&dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        records.push(ManifestRecord {
            id: s.id.clone(),
            image,
            mask,
            label: s.label.map(u8::from),
            class: s.class.map(|c| c.name().to_string()),
            domain: Some(s.domain.clone()),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_jsonl(&manifest, &records)?;
    Ok(manifest)
}

/// Loads every record of a manifest; paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let records: Vec<ManifestRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::format(path, "manifest has no records"));
    }
    records
        .into_iter()
        .map(|r| {
            let img_path = base.join(&r.image);
            let img = read_pgm(&img_path)?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let image = img.reshape(&[1, h, w])?;
            let mask = match &r.mask {
                Some(m) => {
                    let mp = base.join(m);
                    let mt = read_pgm(&mp)?;
                    if mt.shape() != [h, w] {
                        return Err(Error::format(
                            &mp,
                            format!("mask {:?} does not match image {h}x{w}", mt.shape()),
                        ));
                    }
                    Some(mt.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
                }
                None => None,
            };
            let label = match r.label {
                None => None,
                Some(0) => Some(false),
                Some(1) => Some(true),
                Some(v) => {
                    return Err(Error::format(
                        path,
                        format!("record {}: label must be 0 or 1, got {v}", r.id),
                    ))
                }
            };
            let class = match &r.class {
                None => None,
                Some(c) => Some(
                    DefectClass::from_name(c)
                        .ok_or_else(|| Error::format(path, format!("record {}: unknown class {c:?}", r.id)))?,
                ),
            };
            Ok(Sample {
                id: r.id,
                image,
                mask,
                label,
                domain: r.domain.unwrap_or_default(),
                class,
            })
        })
        .collect()
}

// ---- checkpoint ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub fingerprint: String,
    pub input_h: usize,
    pub input_w: usize,
    pub params: Vec<ParamEntry>,
    pub seed: u64,
    pub provenance: BTreeMap<String, String>,
}

/// Seed and free-form provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub provenance: BTreeMap<String, String>,
}

pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    params.check_fingerprint()?;
    let arch = params.arch();
    let header = CheckpointHeader {
        fingerprint: params.fingerprint().to_string(),
        input_h: arch.input_h,
        input_w: arch.input_w,
        params: params
            .entries()
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        seed: meta.seed,
        provenance: meta.provenance.clone(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serialises");
    let len = u32::try_from(hjson.len()).map_err(|_| Error::Config("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(12 + hjson.len() + 4 * params.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&hjson);
    for (_, t) in params.entries() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing SDDCKPT1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hbytes = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::format(path, "truncated checkpoint header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(hbytes).map_err(|e| Error::format(path, format!("checkpoint header: {e}")))?;
    let arch = Architecture::new(header.input_h, header.input_w).map_err(|e| Error::format(path, e.to_string()))?;
    if arch.fingerprint() != header.fingerprint {
        return Err(Error::ArchitectureMismatch {
            expected: arch.fingerprint(),
            found: header.fingerprint,
        });
    }
    let mut data = &bytes[12 + hlen..];
    let mut entries = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if data.len() < 4 * n {
            return Err(Error::format(path, format!("parameter data truncated at {}", p.name)));
        }
        let (chunk, rest) = data.split_at(4 * n);
        let values = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        entries.push((
            p.name.clone(),
            Tensor::new(p.shape.clone(), values).map_err(|e| Error::format(path, e.to_string()))?,
        ));
        data = rest;
    }
    if !data.is_empty() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after parameter data", data.len()),
        ));
    }
    let params = ModelParams::from_entries(arch, entries).map_err(|e| match e {
        Error::ArchitectureMismatch { .. } => e,
        other => Error::format(path, other.to_string()),
    })?;
    Ok((
        params,
        CheckpointMeta {
            seed: header.seed,
            provenance: header.provenance,
        },
    ))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    decode_checkpoint(&read(path)?, path)
}

/// Loads a checkpoint and insists it was written for `arch`.
pub fn load_checkpoint_for(path: &Path, arch: Architecture) -> Result<(ModelParams, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    if params.arch() != arch {
        return Err(Error::ArchitectureMismatch {
            expected: arch.fingerprint(),
            found: params.fingerprint().to_string(),
        });
    }
    Ok((params, meta))
}

// ---- flat configs ----

/// Top-level keys a type serialises to, taken from its default value.
pub fn keys_of<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

pub fn read_flat_config(path: &Path) -> Result<Map<String, Value>> {
    let bytes = read(path)?;
    match serde_json::from_slice(&bytes) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::format(path, "config must be a flat JSON object")),
        Err(e) => Err(Error::format(path, e.to_string())),
    }
}

/// Fills a config section from the keys of `flat` it owns, each spelled
/// `prefix` + field name.
pub fn take_section<T: DeserializeOwned + Serialize + Default>(
    flat: &mut Map<String, Value>,
    prefix: &str,
    source: &str,
) -> Result<T> {
    let mut part = Map::new();
    for k in keys_of::<T>() {
        if let Some(v) = flat.remove(&format!("{prefix}{k}")) {
            part.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(part)).map_err(|e| Error::Config(format!("{source}: {e}")))
}

/// Rejects whatever keys no section claimed.
pub fn reject_leftovers(flat: &Map<String, Value>, source: &str) -> Result<()> {
    match flat.keys().next() {
        None => Ok(()),
        Some(k) => Err(Error::Config(format!("{source}: unknown key {k:?}"))),
    }
}

/// Merges prefixed config sections into one flat object for re-emission.
pub fn flatten_sections(sections: &[(&str, Value)]) -> Map<String, Value> {
    let mut out = Map::new();
    for (prefix, s) in sections {
        if let Value::Object(m) = s {
            out.extend(m.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())));
        }
    }
    out
}
