//! Checkpoints: a plain-text manifest next to a raw little-endian `f64` blob.
//!
//! ```text
//! strae-checkpoint 1
//! blob epoch-003.bin
//! epoch 3
//! rng_word_pos 1184
//! dev_history 2.75 2.5 2.375
//! adam 0.9 0.999 0.00000001 42
//! config objective = contrastive
//! ...
//! tensor param.embedding 120 16 0
//! tensor adam_m.embedding 120 16 15360
//! ```
//!
//! Tensor lines give name, rows, columns and byte offset into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_lines, write_atomic};
use crate::model::{ModelKind, ModelParams};
use crate::trainer::{AdamState, TrainConfig};

const MAGIC: &str = "strae-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub dev_history: Vec<f64>,
    /// Position of the shuffling RNG stream (seeded from `config.seed`).
    pub rng_word_pos: u128,
}

impl Checkpoint {
    /// Writes the blob and then the manifest, each atomically, so a manifest
    /// on disk always describes a complete blob.
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let blob_path = manifest.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", manifest.display())))?
            .to_string_lossy()
            .into_owned();

        let names: Vec<&str> = self.params.tensors().iter().map(|(n, _)| *n).collect();
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in self.params.tensors() {
            tensors.push((format!("param.{name}"), t));
        }
        for (name, t) in names.iter().zip(&self.adam.m) {
            tensors.push((format!("adam_m.{name}"), t));
        }
        for (name, t) in names.iter().zip(&self.adam.v) {
            tensors.push((format!("adam_v.{name}"), t));
        }

        let mut text = format!("{MAGIC}\nblob {blob_name}\n");
        text += &format!("epoch {}\nrng_word_pos {}\n", self.epoch, self.rng_word_pos);
        let history: Vec<String> = self.dev_history.iter().map(f64::to_string).collect();
        text += &format!("dev_history {}\n", history.join(" "));
        text += &format!(
            "adam {} {} {} {}\n",
            self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.t
        );
        for (k, v) in self.config.entries() {
            text += &format!("config {k} = {v}\n");
        }
        let mut blob = Vec::new();
        for (name, t) in &tensors {
            text += &format!("tensor {name} {} {} {}\n", t.rows(), t.cols(), blob.len());
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_atomic(&blob_path, &blob)?;
        write_atomic(manifest, text.as_bytes())
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let lines = read_lines(manifest)?;
        let bad = |line: usize, msg: String| Error::format(manifest, line, msg);
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(bad(1, format!("expected {MAGIC:?}")));
        }
        let mut blob_name = None;
        let mut epoch = None;
        let mut rng_word_pos = None;
        let mut dev_history = Vec::new();
        let mut adam_header = None;
        let mut config_entries: Vec<(String, String)> = Vec::new();
        let mut tensor_lines: Vec<(usize, String, usize, usize, usize)> = Vec::new();

        for (i, line) in lines.iter().enumerate().skip(1) {
            let no = i + 1;
            let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(no, format!("bad integer {s:?}")));
            match key {
                "blob" => blob_name = Some(rest.to_string()),
                "epoch" => epoch = Some(num(rest)?),
                "rng_word_pos" => {
                    rng_word_pos = Some(rest.parse::<u128>().map_err(|_| bad(no, "bad rng position".into()))?)
                }
                "dev_history" => {
                    dev_history = rest
                        .split_whitespace()
                        .map(|s| s.parse::<f64>().map_err(|_| bad(no, format!("bad loss {s:?}"))))
                        .collect::<Result<_>>()?
                }
                "adam" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let float = |s: &str| s.parse::<f64>().map_err(|_| bad(no, format!("bad float {s:?}")));
                    if f.len() != 4 {
                        return Err(bad(no, "adam line needs beta1 beta2 eps step".into()));
                    }
                    let t = f[3].parse::<u64>().map_err(|_| bad(no, "bad adam step".into()))?;
                    adam_header = Some((float(f[0])?, float(f[1])?, float(f[2])?, t));
                }
                "config" => {
                    let (k, v) = rest
                        .split_once(" = ")
                        .ok_or_else(|| bad(no, "config line needs `key = value`".into()))?;
                    config_entries.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 4 {
                        return Err(bad(no, "tensor line needs name rows cols offset".into()));
                    }
                    tensor_lines.push((no, f[0].to_string(), num(f[1])?, num(f[2])?, num(f[3])?));
                }
                "" => {}
                other => return Err(bad(no, format!("unknown manifest entry {other:?}"))),
            }
        }

        let missing = |what: &str| bad(lines.len(), format!("manifest has no {what} line"));
        let blob_name = blob_name.ok_or_else(|| missing("blob"))?;
        let blob_path: PathBuf = manifest.with_file_name(&blob_name);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let config = TrainConfig::from_entries(config_entries.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .map_err(|e| bad(0, e.to_string()))?;

        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        let mut expected_offset = 0;
        for (no, name, rows, cols, offset) in tensor_lines {
            let len = rows * cols * 8;
            if offset != expected_offset || offset + len > blob.len() {
                return Err(bad(no, format!("tensor {name} does not fit the blob")));
            }
            let data = blob[offset..offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(rows, cols, data)?));
            expected_offset = offset + len;
        }
        if expected_offset != blob.len() {
            return Err(Error::format(&blob_path, 0, "blob has trailing bytes"));
        }

        let mut take_group = |prefix: &str| -> Vec<(String, Tensor)> {
            let mut out = Vec::new();
            tensors.retain(|(name, t)| match name.strip_prefix(prefix) {
                Some(rest) => {
                    out.push((rest.to_string(), t.clone()));
                    false
                }
                None => true,
            });
            out
        };
        let params = ModelParams::from_named(config.n, config.model == ModelKind::Iornn, take_group("param."))?;
        let order: Vec<&str> = params.tensors().iter().map(|(n, _)| *n).collect();
        let arrange = |group: Vec<(String, Tensor)>, what: &str| -> Result<Vec<Tensor>> {
            order
                .iter()
                .map(|name| {
                    group
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| bad(0, format!("missing {what}.{name}")))
                })
                .collect()
        };
        let m = arrange(take_group("adam_m."), "adam_m")?;
        let v = arrange(take_group("adam_v."), "adam_v")?;
        let (beta1, beta2, eps, t) = adam_header.ok_or_else(|| missing("adam"))?;

        Ok(Checkpoint {
            config,
            params,
            adam: AdamState {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            },
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            dev_history,
            rng_word_pos: rng_word_pos.ok_or_else(|| missing("rng_word_pos"))?,
        })
    }
}
