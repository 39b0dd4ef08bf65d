//! Checkpoint file: one line of UTF-8 JSON header, then little-endian f64
//! sections in header order (parameters, BN running stats, velocity, then
//! any optional sections).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BnState, Layout, ModelParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const FORMAT: &str = "shiftseg-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct LayoutEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    num_classes: usize,
    input_h: usize,
    input_w: usize,
    iteration: usize,
    config_hash: String,
    bn_momentum: f64,
    layout: Vec<LayoutEntry>,
    sections: Vec<SectionEntry>,
}

/// Everything needed to resume or evaluate a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub config_hash: String,
    pub params: ModelParams,
    pub bn: BnState,
    pub velocity: Vec<f64>,
    /// Momentum network, present for adaptation checkpoints.
    pub momentum: Option<(ModelParams, BnState)>,
    /// Moving class prior, present for adaptation checkpoints.
    pub class_prior: Option<Vec<f64>>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.params.layout();
        let mut sections: Vec<(&str, Vec<f64>)> = vec![
            ("params", self.params.values().to_vec()),
            ("bn", self.bn.to_flat()),
            ("velocity", self.velocity.clone()),
        ];
        if let Some((psi, bn_psi)) = &self.momentum {
            sections.push(("momentum.params", psi.values().to_vec()));
            sections.push(("momentum.bn", bn_psi.to_flat()));
        }
        if let Some(chi) = &self.class_prior {
            sections.push(("class_prior", chi.clone()));
        }
        let header = Header {
            format: FORMAT.into(),
            version: 1,
            num_classes: layout.num_classes(),
            input_h: self.input_h,
            input_w: self.input_w,
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            bn_momentum: self.bn.update_momentum,
            layout: layout
                .entries()
                .iter()
                .map(|(name, r)| LayoutEntry {
                    name: name.clone(),
                    offset: r.start,
                    len: r.len(),
                })
                .collect(),
            sections: sections
                .iter()
                .map(|(name, v)| SectionEntry {
                    name: (*name).into(),
                    len: v.len(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, values) in &sections {
            push_f64s(&mut out, values);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != 1 {
            return Err(bad(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let layout = Layout::new(header.num_classes);
        let expected: Vec<(String, usize, usize)> = layout
            .entries()
            .iter()
            .map(|(n, r)| (n.clone(), r.start, r.len()))
            .collect();
        let found: Vec<(String, usize, usize)> = header
            .layout
            .iter()
            .map(|e| (e.name.clone(), e.offset, e.len))
            .collect();
        if expected != found {
            return Err(bad("parameter layout does not match this network".into()));
        }
        let mut body = &bytes[newline + 1..];
        let total: usize = header.sections.iter().map(|s| s.len * 8).sum();
        if body.len() != total {
            return Err(bad(format!(
                "expected {total} payload bytes, found {}",
                body.len()
            )));
        }
        let mut take = |len: usize| -> Vec<f64> {
            let (head, rest) = body.split_at(len * 8);
            body = rest;
            head.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let mut params = None;
        let mut bn = None;
        let mut velocity = None;
        let mut psi = None;
        let mut bn_psi = None;
        let mut class_prior = None;
        let m = header.bn_momentum;
        for s in &header.sections {
            let values = take(s.len);
            match s.name.as_str() {
                "params" => params = Some(ModelParams::from_values(layout.clone(), values)?),
                "bn" => bn = Some(BnState::from_flat(&values, m)?),
                "velocity" => velocity = Some(values),
                "momentum.params" => psi = Some(ModelParams::from_values(layout.clone(), values)?),
                "momentum.bn" => bn_psi = Some(BnState::from_flat(&values, m)?),
                "class_prior" => class_prior = Some(values),
                other => return Err(bad(format!("unknown section `{other}`"))),
            }
        }
        let params = params.ok_or_else(|| bad("missing params section".into()))?;
        let velocity = velocity.ok_or_else(|| bad("missing velocity section".into()))?;
        if velocity.len() != params.len() {
            return Err(bad("velocity length differs from parameter count".into()));
        }
        Ok(Self {
            iteration: header.iteration,
            input_h: header.input_h,
            input_w: header.input_w,
            config_hash: header.config_hash,
            params,
            bn: bn.ok_or_else(|| bad("missing bn section".into()))?,
            velocity,
            momentum: psi.zip(bn_psi),
            class_prior,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
