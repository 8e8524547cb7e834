//! Checkpoint serialization.
//!
//! A checkpoint is two files derived from one stem:
//!
//! ```text
//!     <stem>.manifest   text, key=value: config fields, then one
//!                       tensor=<name>:<dims>:<byte-offset> line per tensor
//!     <stem>.bin        raw little-endian f32 values in manifest order
//! ```
//!
//! The manifest is the source of truth for ordering; loading verifies every
//! tensor name, shape, and offset against the model rebuilt from the config
//! fields, so a manifest/blob mismatch fails loudly instead of silently
//! scrambling parameters. Values are stored as f32 regardless of the working
//! precision; saving an f32 model and loading it back is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::featmap::FeatureMapKind;
use crate::model::{build_model, MixerKind, Model, ModelConfig};
use crate::real::Real;
use crate::rules::{RuleConfig, RuleKind};

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn push_config_lines(out: &mut String, cfg: &ModelConfig) {
    out.push_str("format=fastweights-v1\n");
    out.push_str(&format!("vocab_size={}\n", cfg.vocab_size));
    out.push_str(&format!("d_model={}\n", cfg.d_model));
    out.push_str(&format!("n_heads={}\n", cfg.n_heads));
    out.push_str(&format!("head_dim={}\n", cfg.head_dim));
    out.push_str(&format!("feature_dim={}\n", cfg.feature_dim));
    out.push_str(&format!("n_layers={}\n", cfg.n_layers));
    out.push_str(&format!("ffn_mult={}\n", cfg.ffn_mult));
    out.push_str(&format!("max_t={}\n", cfg.max_t));
    match &cfg.mixer {
        MixerKind::Softmax => out.push_str("mixer=softmax\n"),
        MixerKind::Local { window } => {
            out.push_str("mixer=local\n");
            out.push_str(&format!("window={window}\n"));
        }
        MixerKind::Rule(rc) => {
            out.push_str("mixer=rule\n");
            out.push_str(&format!("rule={}\n", rc.rule.name()));
            out.push_str(&format!("feature_map={}\n", rc.feature_map.name()));
            out.push_str(&format!("sum_norm={}\n", rc.sum_norm));
            out.push_str(&format!("attention_norm={}\n", rc.attention_norm));
        }
    }
}

/// Write `<stem>.manifest` and `<stem>.bin`. Values are converted to f32.
pub fn save_checkpoint<T: Real>(model: &Model<T>, stem: &Path) -> Result<()> {
    let mut manifest = String::new();
    push_config_lines(&mut manifest, &model.config);
    let mut offset = 0usize;
    model.visit_params(&mut |name, dims, data| {
        let dims_s = dims
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("tensor={name}:{dims_s}:{offset}\n"));
        offset += data.len() * 4;
    });
    fs::write(manifest_path(stem), manifest)?;

    let file = fs::File::create(blob_path(stem))?;
    let mut writer = BufWriter::new(file);
    let mut io_err: Option<std::io::Error> = None;
    model.visit_params(&mut |_, _, data| {
        if io_err.is_some() {
            return;
        }
        for &v in data {
            let bytes = (v.to_f64_lossy() as f32).to_le_bytes();
            if let Err(e) = writer.write_all(&bytes) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    writer.flush()?;
    Ok(())
}

struct TensorRecord {
    name: String,
    elems: usize,
    offset: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

fn parse_manifest(text: &str) -> Result<(BTreeMap<String, String>, Vec<TensorRecord>)> {
    let mut fields = BTreeMap::new();
    let mut tensors = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key=value, got {line:?}", ln + 1)))?;
        if key == "tensor" {
            let mut parts = value.split(':');
            let (name, dims, offset) = match (parts.next(), parts.next(), parts.next(), parts.next())
            {
                (Some(n), Some(d), Some(o), None) => (n, d, o),
                _ => return Err(bad(format!("line {}: malformed tensor record", ln + 1))),
            };
            let mut elems = 1usize;
            for dim in dims.split('x') {
                elems = elems
                    .checked_mul(
                        dim.parse::<usize>()
                            .map_err(|_| bad(format!("bad dimension {dim:?}")))?,
                    )
                    .ok_or_else(|| bad("tensor shape overflows"))?;
            }
            tensors.push(TensorRecord {
                name: name.to_string(),
                elems,
                offset: offset
                    .parse()
                    .map_err(|_| bad(format!("bad offset {offset:?}")))?,
            });
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    Ok((fields, tensors))
}

fn field<'a>(fields: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| bad(format!("missing field {key:?}")))
}

fn usize_field(fields: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    field(fields, key)?
        .parse()
        .map_err(|_| bad(format!("field {key:?} is not a count")))
}

fn bool_field(fields: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match field(fields, key)? {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(format!("field {key:?} is not a flag: {other:?}"))),
    }
}

fn config_from_fields(fields: &BTreeMap<String, String>) -> Result<ModelConfig> {
    if field(fields, "format")? != "fastweights-v1" {
        return Err(bad("unrecognized checkpoint format tag"));
    }
    let head_dim = usize_field(fields, "head_dim")?;
    let feature_dim = usize_field(fields, "feature_dim")?;
    let mixer = match field(fields, "mixer")? {
        "softmax" => MixerKind::Softmax,
        "local" => MixerKind::Local {
            window: usize_field(fields, "window")?,
        },
        "rule" => MixerKind::Rule(RuleConfig {
            rule: RuleKind::parse(field(fields, "rule")?)?,
            feature_map: FeatureMapKind::parse(field(fields, "feature_map")?)?,
            sum_norm: bool_field(fields, "sum_norm")?,
            attention_norm: bool_field(fields, "attention_norm")?,
            d: head_dim,
            m: feature_dim,
        }),
        other => return Err(bad(format!("unknown mixer {other:?}"))),
    };
    Ok(ModelConfig {
        vocab_size: usize_field(fields, "vocab_size")?,
        d_model: usize_field(fields, "d_model")?,
        n_heads: usize_field(fields, "n_heads")?,
        head_dim,
        feature_dim,
        n_layers: usize_field(fields, "n_layers")?,
        ffn_mult: usize_field(fields, "ffn_mult")?,
        max_t: usize_field(fields, "max_t")?,
        mixer,
    })
}

/// Rebuild a model from `<stem>.manifest` and `<stem>.bin`.
pub fn load_checkpoint(stem: &Path) -> Result<Model<f32>> {
    let text = fs::read_to_string(manifest_path(stem))?;
    let (fields, tensors) = parse_manifest(&text)?;
    let config = config_from_fields(&fields)?;
    let blob = fs::read(blob_path(stem))?;

    let mut model = build_model::<f32>(&config, 0)?;
    let mut cursor = 0usize;
    let mut index = 0usize;
    let mut problem: Option<Error> = None;
    model.visit_params_mut(&mut |name, data| {
        if problem.is_some() {
            return;
        }
        let record = match tensors.get(index) {
            Some(r) => r,
            None => {
                problem = Some(bad(format!("manifest ends before tensor {name:?}")));
                return;
            }
        };
        if record.name != name || record.elems != data.len() || record.offset != cursor {
            problem = Some(bad(format!(
                "tensor {index} mismatch: manifest has {}:{}@{}, model expects {}:{}@{}",
                record.name, record.elems, record.offset, name, data.len(), cursor
            )));
            return;
        }
        let end = cursor + data.len() * 4;
        if end > blob.len() {
            problem = Some(bad(format!(
                "blob ends at {} bytes but tensor {name:?} needs {end}",
                blob.len()
            )));
            return;
        }
        for (i, chunk) in blob[cursor..end].chunks_exact(4).enumerate() {
            data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        cursor = end;
        index += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if index != tensors.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, model holds {index}",
            tensors.len()
        )));
    }
    if cursor != blob.len() {
        return Err(bad(format!(
            "blob holds {} bytes, manifest accounts for {cursor}",
            blob.len()
        )));
    }
    Ok(model)
}
