//! Trained model container and its binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian u32 unless noted):
//! magic `CDML`, format version, config block (length-prefixed
//! `key = value` text), tensor count, then per tensor: name length,
//! name bytes, rank, extents, raw little-endian f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, ExtractorParams, ConvSpec, FEATURE_DIM};
use crate::metric::MetricLayer;
use crate::tensor::Tensor;
use crate::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDML";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ExtractorConfig,
    pub params: ExtractorParams<Real>,
    pub metric: MetricLayer<Real>,
}

impl Model {
    pub fn init(config: ExtractorConfig, lambda: Real, seed: u64) -> Result<Self> {
        let params = crate::extractor::init_params(&config, seed)?;
        Ok(Model {
            config,
            params,
            metric: MetricLayer::identity(FEATURE_DIM, lambda),
        })
    }

    /// Features for the given dataset samples, in index order. Parallel
    /// over samples but deterministically ordered.
    pub fn features(
        &self,
        dataset: &crate::data::Dataset,
        indices: &[usize],
    ) -> Result<Vec<crate::metric::FeatureVector<Real>>> {
        use rayon::prelude::*;
        indices
            .par_iter()
            .map(|&i| {
                crate::extractor::extract(&dataset.samples[i].pixels, &self.params, &self.config)
            })
            .collect()
    }
}

fn config_block(model: &Model) -> String {
    let c = &model.config;
    let mut s = String::new();
    for (name, spec) in [("conv1", &c.conv1), ("conv2", &c.conv2), ("conv3", &c.conv3)] {
        s.push_str(&format!("{name}.filters = {}\n", spec.filters));
        s.push_str(&format!("{name}.kernel = {}\n", spec.kernel));
        s.push_str(&format!("{name}.stride = {}\n", spec.stride));
    }
    s.push_str(&format!("hidden_width = {}\n", c.hidden_width));
    s.push_str(&format!("relu_after_conv = {}\n", c.relu_after_conv));
    s.push_str(&format!("tied_branches = {}\n", c.tied_branches));
    s.push_str(&format!("lambda = {}\n", model.metric.lambda));
    s
}

fn parse_config_block(text: &str) -> Result<(ExtractorConfig, Real)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line: {line}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Format(format!("missing config key {k}")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad integer for {k}")))
    };
    let bool_of = |k: &str| -> Result<bool> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad bool for {k}")))
    };
    let conv = |name: &str| -> Result<ConvSpec> {
        Ok(ConvSpec {
            filters: usize_of(&format!("{name}.filters"))?,
            kernel: usize_of(&format!("{name}.kernel"))?,
            stride: usize_of(&format!("{name}.stride"))?,
        })
    };
    let config = ExtractorConfig {
        conv1: conv("conv1")?,
        conv2: conv("conv2")?,
        conv3: conv("conv3")?,
        hidden_width: usize_of("hidden_width")?,
        relu_after_conv: bool_of("relu_after_conv")?,
        tied_branches: bool_of("tied_branches")?,
    };
    let lambda: Real = get("lambda")?
        .parse()
        .map_err(|_| Error::Format("bad lambda".into()))?;
    Ok((config, lambda))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = config_block(model);
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;

    let mut tensors: Vec<(String, &Tensor<Real>)> = model.params.named_tensors();
    tensors.push(("metric.w".into(), model.metric.weight()));
    tensors.push(("metric.b".into(), model.metric.bias()));
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for e in t.shape() {
            w.write_all(&(*e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(u32::from_le_bytes(buf))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(buf)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = Reader {
        inner: std::io::BufReader::new(std::fs::File::open(path)?),
    };
    let magic = r.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.bytes(cfg_len)?)
        .map_err(|_| Error::Format("config block is not utf-8".into()))?;
    let (config, lambda) = parse_config_block(&cfg_text)?;

    let count = r.u32()? as usize;
    let mut table = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let data: Vec<Real> = raw
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        table.insert(name, Tensor::from_vec(&shape, data)?);
    }

    let mut take = |name: &str| -> Result<Tensor<Real>> {
        table
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let branch_count = if config.tied_branches { 1 } else { crate::extractor::NUM_BRANCHES };
    let mut branches = Vec::with_capacity(branch_count);
    for i in 0..branch_count {
        branches.push(crate::extractor::BranchParams {
            conv1_w: take(&format!("branch{i}.conv1.w"))?,
            conv1_b: take(&format!("branch{i}.conv1.b"))?,
            conv2_w: take(&format!("branch{i}.conv2.w"))?,
            conv2_b: take(&format!("branch{i}.conv2.b"))?,
            conv3_w: take(&format!("branch{i}.conv3.w"))?,
            conv3_b: take(&format!("branch{i}.conv3.b"))?,
        });
    }
    let params = ExtractorParams {
        branches,
        fc1_w: take("fc1.w")?,
        fc1_b: take("fc1.b")?,
        fc2_w: take("fc2.w")?,
        fc2_b: take("fc2.b")?,
    };
    let metric = MetricLayer::from_weight(take("metric.w")?, lambda)?;
    Ok(Model { config, params, metric })
}
