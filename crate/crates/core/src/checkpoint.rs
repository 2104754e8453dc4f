//! Checkpoint files.
//!
//! Layout: a UTF-8 manifest, then the raw little-endian payload of every
//! tensor in manifest order.
//!
//! ```text
//! msresnet-checkpoint 1
//! config A=1 B=1 C=1 classes=4 in_channels=1 resolution=64 widths=16,32,64,128 depths=3,4,6,3 se_reduction=16
//! norm mean=0.25 std=0.125
//! tensors 221
//! stem.k3.conv.weight 8,1,3,3 f32 param
//! ...
//! end
//! <payload bytes>
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Standardize;
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::params::ParamKind;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &str = "msresnet-checkpoint 1";

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::format("checkpoint", format!("bad integer list `{s}`"))))
        .collect()
}

fn parse_four(s: &str) -> Result<[usize; 4]> {
    parse_list(s)?
        .try_into()
        .map_err(|_| Error::format("checkpoint", format!("expected four values, got `{s}`")))
}

pub fn encode_config(c: &ModelConfig) -> String {
    let b = |v: bool| u8::from(v);
    format!(
        "A={} B={} C={} classes={} in_channels={} resolution={} widths={} depths={} se_reduction={}",
        b(c.use_inception_down),
        b(c.use_multiscale_stem),
        b(c.use_se),
        c.num_classes,
        c.in_channels,
        c.input_resolution,
        join(&c.stage_widths),
        join(&c.stage_depths),
        c.se_reduction
    )
}

pub fn decode_config(line: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    let bad = |what: &str| Error::format("checkpoint", format!("bad config field `{what}`"));
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad(tok))?;
        let flag = || match v {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(tok)),
        };
        let num = || v.parse::<usize>().map_err(|_| bad(tok));
        match k {
            "A" => c.use_inception_down = flag()?,
            "B" => c.use_multiscale_stem = flag()?,
            "C" => c.use_se = flag()?,
            "classes" => c.num_classes = num()?,
            "in_channels" => c.in_channels = num()?,
            "resolution" => c.input_resolution = num()?,
            "widths" => c.stage_widths = parse_four(v)?,
            "depths" => c.stage_depths = parse_four(v)?,
            "se_reduction" => c.se_reduction = num()?,
            _ => return Err(bad(tok)),
        }
    }
    Ok(c)
}

fn join_f32(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn encode_norm(n: &Standardize) -> String {
    format!("mean={} std={}", join_f32(&n.mean), join_f32(&n.std))
}

fn decode_norm(line: &str) -> Result<Standardize> {
    let bad = || Error::format("checkpoint", format!("bad norm line `{line}`"));
    let floats = |s: &str| -> Result<Vec<f32>> { s.split(',').map(|x| x.parse().map_err(|_| bad())).collect() };
    let (m, s) = line.split_once(' ').ok_or_else(bad)?;
    let mean = floats(m.strip_prefix("mean=").ok_or_else(bad)?)?;
    let std = floats(s.strip_prefix("std=").ok_or_else(bad)?)?;
    if mean.len() != std.len() {
        return Err(bad());
    }
    Ok(Standardize { mean, std })
}

/// A model together with the input standardization it was trained with.
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub norm: Option<Standardize>,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>, norm: Option<&Standardize>) -> Vec<u8> {
    let store = model.params();
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("config {}\n", encode_config(model.config())));
    if let Some(n) = norm {
        out.push_str(&format!("norm {}\n", encode_norm(n)));
    }
    out.push_str(&format!("tensors {}\n", store.len()));
    for e in store.entries() {
        out.push_str(&format!(
            "{} {} {} {}\n",
            e.name,
            join(e.value.shape()),
            T::DTYPE,
            e.kind.name()
        ));
    }
    out.push_str("end\n");
    let mut bytes = out.into_bytes();
    for e in store.entries() {
        for &v in e.value.data() {
            v.write_le(&mut bytes);
        }
    }
    bytes
}

pub fn save<T: Scalar>(model: &Model<T>, norm: Option<&Standardize>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, norm);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct ManifestLine {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    kind: ParamKind,
}

pub struct Manifest {
    pub config: ModelConfig,
    pub norm: Option<Standardize>,
    entries: Vec<ManifestLine>,
    payload_offset: usize,
}

impl Manifest {
    pub fn dtype(&self) -> Option<DType> {
        self.entries.first().map(|e| e.dtype)
    }
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint", "truncated manifest"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("checkpoint", "manifest is not UTF-8"))
}

pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut pos = 0;
    if next_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::format("checkpoint", "missing header"));
    }
    let config = decode_config(
        next_line(bytes, &mut pos)?
            .strip_prefix("config ")
            .ok_or_else(|| Error::format("checkpoint", "missing config line"))?,
    )?;
    let mut line = next_line(bytes, &mut pos)?;
    let mut norm = None;
    if let Some(rest) = line.strip_prefix("norm ") {
        norm = Some(decode_norm(rest)?);
        line = next_line(bytes, &mut pos)?;
    }
    let count: usize = line
        .strip_prefix("tensors ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format("checkpoint", "missing tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(bytes, &mut pos)?;
        let f: Vec<&str> = line.split(' ').collect();
        let [name, shape, dtype, kind] = f.as_slice() else {
            return Err(Error::format("checkpoint", format!("bad manifest line `{line}`")));
        };
        let kind = match *kind {
            "param" => ParamKind::Learnable,
            "stat" => ParamKind::RunningStat,
            other => return Err(Error::format("checkpoint", format!("unknown tensor kind `{other}`"))),
        };
        entries.push(ManifestLine {
            name: name.to_string(),
            shape: parse_list(shape)?,
            dtype: dtype.parse()?,
            kind,
        });
    }
    if next_line(bytes, &mut pos)? != "end" {
        return Err(Error::format("checkpoint", "manifest not terminated by `end`"));
    }
    Ok(Manifest {
        config,
        norm,
        entries,
        payload_offset: pos,
    })
}

/// Rebuilds the model described by the checkpoint and loads every tensor.
/// Values stored in another precision are converted.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(bytes)?;
    let mut model = build_model::<T>(&manifest.config, 0)?;
    let store = model.params_mut();
    if manifest.entries.len() != store.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} tensors stored, model has {}", manifest.entries.len(), store.len()),
        ));
    }
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let mut pos = manifest.payload_offset;
    for line in &manifest.entries {
        let id = store
            .lookup(&line.name)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor {}", line.name)))?;
        if seen.insert(&line.name, ()).is_some() {
            return Err(Error::format("checkpoint", format!("tensor {} stored twice", line.name)));
        }
        if store.entry(id).kind != line.kind || store.get(id).shape() != line.shape.as_slice() {
            return Err(Error::format("checkpoint", format!("tensor {} does not match the model", line.name)));
        }
        let n: usize = line.shape.iter().product();
        let width = line.dtype.size_bytes();
        let end = pos + n * width;
        if end > bytes.len() {
            return Err(Error::format("checkpoint", "payload truncated"));
        }
        let data: Vec<T> = bytes[pos..end]
            .chunks_exact(width)
            .map(|c| match line.dtype {
                DType::F32 => T::cast(f32::read_le(c) as f64),
                DType::F64 => T::cast(f64::read_le(c)),
            })
            .collect();
        *store.get_mut(id) = Tensor::new(&line.shape, data)?;
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes after payload"));
    }
    Ok(Checkpoint {
        model,
        norm: manifest.norm,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}
