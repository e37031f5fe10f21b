//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RP2PNCKP"  u32 format  u64 header_len  header (JSON)  tensor data
//! ```
//!
//! The header carries the run config, model config, channel layout, code
//! version, step counter and the list of stored tensors (name, shape,
//! group). Tensor data follows in header order as `f32` or `f64` values.
//! Unknown header fields are ignored when reading, so newer writers stay
//! readable as long as the format number is unchanged. The channel layout
//! is also written as `layout.toml` next to the checkpoint.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::Tensor;
use crate::model::{Rp2pn, Rp2pnConfig};
use crate::preprocess::{ChannelLayout, InputOptions, LAYOUT_VERSION};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RP2PNCKP";
pub const CHECKPOINT_FORMAT: u32 = 1;
pub const LAYOUT_SIDECAR: &str = "layout.toml";

/// `rp2pn-v<version>`, with `-g<rev>` when built from a git checkout.
pub fn version_tag() -> String {
    match option_env!("RP2PN_GIT_REV") {
        Some(rev) if !rev.is_empty() => format!("rp2pn-v{}-g{rev}", env!("CARGO_PKG_VERSION")),
        _ => format!("rp2pn-v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Adam moments, one entry per model parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: [usize; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    run: RunConfig,
    model: Rp2pnConfig,
    layout: ChannelLayout,
    step: usize,
    adam_t: Option<u64>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub version: String,
    pub run: RunConfig,
    pub model: Rp2pnConfig,
    pub layout: ChannelLayout,
    /// Optimizer steps taken.
    pub step: usize,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<AdamState<T>>,
}

fn dtype<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Rp2pn<T>, run: &RunConfig, layout: &ChannelLayout, step: usize) -> Self {
        let params = model
            .store
            .ids()
            .map(|id| (model.store.name(id).to_string(), model.store.value(id).clone()))
            .collect();
        Self {
            version: version_tag(),
            run: run.clone(),
            model: model.config.clone(),
            layout: layout.clone(),
            step,
            params,
            optimizer: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tensors: Vec<(TensorEntry, &Tensor<T>)> = self
            .params
            .iter()
            .map(|(n, t)| {
                (
                    TensorEntry {
                        name: n.clone(),
                        group: "param".into(),
                        shape: [t.channels, t.height, t.width],
                    },
                    t,
                )
            })
            .collect();
        if let Some(opt) = &self.optimizer {
            for (group, list) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
                for ((n, _), t) in self.params.iter().zip(list) {
                    tensors.push((
                        TensorEntry {
                            name: n.clone(),
                            group: group.into(),
                            shape: [t.channels, t.height, t.width],
                        },
                        t,
                    ));
                }
            }
        }
        let header = Header {
            version: self.version.clone(),
            run: self.run.clone(),
            model: self.model.clone(),
            layout: self.layout.clone(),
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            dtype: dtype::<T>().into(),
            tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(json.len() + 32);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &tensors {
            for &v in &t.data {
                if dtype::<T>() == "f32" {
                    buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    buf.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_file_name(LAYOUT_SIDECAR);
        self.layout.save(&sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format_err(path, "not a checkpoint file"));
        }
        let format = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Incompatible(format!(
                "{} has checkpoint format {format}, this build reads format {CHECKPOINT_FORMAT}",
                path.display()
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| format_err(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| format_err(path, format!("bad header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            d => return Err(format_err(path, format!("unknown dtype {d:?}"))),
        };
        let mut pos = 20 + hlen;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let n = e.shape.iter().product::<usize>();
            let raw = bytes
                .get(pos..pos + n * width)
                .ok_or_else(|| format_err(path, format!("truncated data for {}", e.name)))?;
            pos += n * width;
            let data: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    } else {
                        T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    }
                })
                .collect();
            let t = Tensor::from_vec(e.shape[0], e.shape[1], e.shape[2], data)?;
            match e.group.as_str() {
                "param" => params.push((e.name.clone(), t)),
                "adam_m" => m.push(t),
                "adam_v" => v.push(t),
                g => return Err(format_err(path, format!("unknown tensor group {g:?}"))),
            }
        }
        if pos != bytes.len() {
            return Err(format_err(path, "trailing bytes after tensor data"));
        }
        let optimizer = header.adam_t.map(|t| AdamState { t, m, v });
        Ok(Self {
            version: header.version,
            run: header.run,
            model: header.model,
            layout: header.layout,
            step: header.step,
            params,
            optimizer,
        })
    }

    /// Rebuilds the model and copies the stored weights into it.
    pub fn restore_model(&self) -> Result<Rp2pn<T>> {
        let mut model = Rp2pn::new(self.model.clone(), self.run.seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint stores {} tensors, the model has {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, (name, t)) in ids.into_iter().zip(&self.params) {
            let (want_name, want_shape) = (model.store.name(id).to_string(), model.store.value(id).shape());
            if *name != want_name || t.shape() != want_shape {
                return Err(Error::Incompatible(format!(
                    "checkpoint tensor {name} {:?} does not match model tensor {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            *model.store.value_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Fails unless the stored layout equals the one this build produces for
    /// `options` and `extractor`.
    pub fn check_layout(&self, options: &InputOptions, extractor: &dyn FeatureExtractor<T>) -> Result<()> {
        if self.layout.version != LAYOUT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint channel layout version {} differs from this build's {LAYOUT_VERSION}",
                self.layout.version
            )));
        }
        let current = ChannelLayout::new(options, extractor.id());
        if current != self.layout {
            return Err(Error::Incompatible(format!(
                "checkpoint channel layout ({} channels, extractor {}) does not match the current input ({} channels, extractor {})",
                self.layout.channels(),
                self.layout.extractor,
                current.channels(),
                current.extractor
            )));
        }
        Ok(())
    }
}

/// Path of the checkpoint written at `step`.
pub fn step_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}
