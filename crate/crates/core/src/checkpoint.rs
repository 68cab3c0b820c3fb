//! Checkpoint files: a text manifest followed by a little-endian `f32` blob.
//!
//! ```text
//! tfbest-checkpoint
//! format_version=1
//! precision=f32
//! config.window=30
//! ...
//! meta.adam.beta1=0.9
//! param.0=time_embed.weight 16x64 0 1024
//! ...
//! blob_bytes=...
//! end
//! <blob>
//! ```
//!
//! Each `param.<i>` line holds name, shape, byte offset into the blob and
//! element count.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::AttentionScale;
use crate::model::{ModelConfig, TfbestModel};
use crate::tensor::Tensor;

pub const MAGIC: &str = "tfbest-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end";

/// Free-form key/value metadata stored with `meta.` prefixes.
pub type Metadata = BTreeMap<String, String>;

fn config_entries(c: &ModelConfig) -> Vec<(&'static str, String)> {
    let scale = match c.attention_scale {
        AttentionScale::HeadDim => "head_dim",
        AttentionScale::ModelDim => "model_dim",
    };
    vec![
        ("window", c.window.to_string()),
        ("features", c.features.to_string()),
        ("d_model", c.d_model.to_string()),
        ("heads", c.heads.to_string()),
        ("enc_layers", c.enc_layers.to_string()),
        ("dec_layers", c.dec_layers.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("dropout", c.dropout.to_string()),
        ("variant", c.variant.to_string()),
        ("attention_scale", scale.to_string()),
    ]
}

fn parse_config(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        kv.get(&format!("config.{k}"))
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks config.{k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config.{k} is not an integer")))
    };
    let attention_scale = match get("attention_scale")?.as_str() {
        "head_dim" => AttentionScale::HeadDim,
        "model_dim" => AttentionScale::ModelDim,
        other => return Err(Error::Checkpoint(format!("unknown attention scale `{other}`"))),
    };
    Ok(ModelConfig {
        window: num("window")?,
        features: num("features")?,
        d_model: num("d_model")?,
        heads: num("heads")?,
        enc_layers: num("enc_layers")?,
        dec_layers: num("dec_layers")?,
        d_ff: num("d_ff")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("config.dropout is not a number".into()))?,
        variant: get("variant")?.parse()?,
        attention_scale,
    })
}

/// Serializes a model and metadata into checkpoint bytes.
pub fn encode(model: &TfbestModel<f32>, meta: &Metadata) -> Vec<u8> {
    let mut manifest = format!("{MAGIC}\nformat_version={FORMAT_VERSION}\nprecision=f32\nendianness=little\n");
    for (k, v) in config_entries(model.config()) {
        manifest.push_str(&format!("config.{k}={v}\n"));
    }
    for (k, v) in meta {
        manifest.push_str(&format!("meta.{k}={v}\n"));
    }
    let params = model.params();
    manifest.push_str(&format!("param_count={}\n", params.len()));
    let mut offset = 0usize;
    for (i, (name, t)) in params.names().iter().zip(params.values()).enumerate() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "param.{i}={name} {} {offset} {}\n",
            shape.join("x"),
            t.numel()
        ));
        offset += 4 * t.numel();
    }
    manifest.push_str(&format!("blob_bytes={offset}\n{END}\n"));

    let mut bytes = manifest.into_bytes();
    bytes.reserve(offset);
    for t in params.values() {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

/// Writes the checkpoint through a temporary file and a rename.
pub fn save_checkpoint(model: &TfbestModel<f32>, path: &Path, meta: &Metadata) -> Result<()> {
    let bytes = encode(model, meta);
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Decodes checkpoint bytes into a model and its metadata.
pub fn decode(bytes: &[u8]) -> Result<(TfbestModel<f32>, Metadata)> {
    let marker = format!("\n{END}\n");
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .ok_or_else(|| Error::Checkpoint("manifest terminator not found".into()))?;
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let blob = &bytes[split + marker.len()..];

    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("not a tfbest checkpoint".into()));
    }
    let mut kv = BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let version = kv.get("format_version").map(String::as_str);
    if version != Some(&FORMAT_VERSION.to_string()) {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    if kv.get("precision").map(String::as_str) != Some("f32") {
        return Err(Error::Checkpoint("only f32 checkpoints are supported".into()));
    }
    let config = parse_config(&kv)?;
    let count: usize = kv
        .get("param_count")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing param_count".into()))?;
    let blob_bytes: usize = kv
        .get("blob_bytes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing blob_bytes".into()))?;
    if blob.len() != blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest declares {blob_bytes} (truncated?)",
            blob.len()
        )));
    }

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let line = kv
            .get(&format!("param.{i}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing param.{i}")))?;
        let parts: Vec<&str> = line.split(' ').collect();
        let bad = || Error::Checkpoint(format!("malformed param.{i} entry `{line}`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let shape = parts[1]
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        entries.push(ParamEntry {
            name: parts[0].to_string(),
            shape,
            offset: parts[2].parse().map_err(|_| bad())?,
            len: parts[3].parse().map_err(|_| bad())?,
        });
    }

    let mut model = TfbestModel::<f32>::new(config, 0)?;
    if model.params().len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            entries.len(),
            model.params().len()
        )));
    }
    for (i, e) in entries.iter().enumerate() {
        let expected = &model.params().values()[i];
        let expected_name = &model.params().names()[i];
        if &e.name != expected_name || e.shape != expected.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {i}: manifest has {} {:?}, config implies {expected_name} {:?}",
                e.name,
                e.shape,
                expected.shape()
            )));
        }
        if e.len != expected.numel() || e.offset + 4 * e.len > blob.len() {
            return Err(Error::Checkpoint(format!("parameter {} is out of blob bounds", e.name)));
        }
        let data = blob[e.offset..e.offset + 4 * e.len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        model.params_mut().values_mut()[i] = Tensor::new(e.shape.clone(), data)?;
    }
    let meta = kv
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v)))
        .collect();
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(TfbestModel<f32>, Metadata)> {
    decode(&fs::read(path)?)
}

/// Loads parameters into an existing model whose config must match exactly.
pub fn load_into(model: &mut TfbestModel<f32>, path: &Path) -> Result<Metadata> {
    let (loaded, meta) = load_checkpoint(path)?;
    if loaded.config() != model.config() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {:?} differs from model config {:?}",
            loaded.config(),
            model.config()
        )));
    }
    *model.params_mut() = loaded.params().clone();
    Ok(meta)
}
