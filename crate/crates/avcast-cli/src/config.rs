//! Run configuration: a JSON file merged with dotted-path flag
//! overrides (`--train.lr 0.001`). Unknown keys and type mismatches are
//! rejected with the offending key path.

use anyhow::{anyhow, bail, Context, Result};
use avcast::m3so::{M3soConfig, SplitCounts};
use avcast::net::NetConfig;
use avcast::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub counts: SplitCounts,
    pub m3so: M3soConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            counts: SplitCounts {
                train: 500,
                val: 48,
                test: 48,
            },
            m3so: M3soConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    /// Futures sampled per clip (best-of-K).
    pub k: usize,
    /// Clips evaluated (0 = the whole split).
    pub clips: usize,
    pub seed: u64,
    /// Frame numbers reported in the Markdown tables.
    pub horizons: Vec<usize>,
    pub diversity_k: Vec<usize>,
    pub diversity_clips: usize,
    pub block_iou: bool,
    pub fooling: bool,
    pub mismatch: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: "test".to_string(),
            k: 10,
            clips: 0,
            seed: 1,
            horizons: vec![6, 15, 20],
            diversity_k: Vec::new(),
            diversity_clips: 0,
            block_iou: false,
            fooling: false,
            mismatch: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub split: String,
    pub index: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            split: "test".to_string(),
            index: 0,
            k: 3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, propagates to data.m3so.seed, train.seed and eval.seed.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub stft: avcast::avfeat::StftParams,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sample: SampleSection,
}

impl RunConfig {
    fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.m3so.seed = s;
            self.train.seed = s;
            self.eval.seed = s.wrapping_add(1);
            self.sample.seed = s.wrapping_add(2);
        }
    }
}

/// Loads the file, applies `--key.path value` overrides, and validates.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow!("config {}: {e}", path.display()))?;
    // Work on the fully-populated value so every known key is present.
    let mut value = serde_json::to_value(&cfg)?;
    for (key, raw) in pair_overrides(overrides)? {
        apply_override(&mut value, &key, &raw)?;
    }
    let mut merged: RunConfig = serde_json::from_value(value.clone())
        .map_err(|e| anyhow!("config after overrides: {e}"))?;
    merged.propagate_seed();
    Ok(merged)
}

fn pair_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected an override flag, got '{flag}'"))?;
        let value = it
            .next()
            .ok_or_else(|| anyhow!("override --{key} is missing a value"))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    let mut cur = &mut *root;
    for (i, seg) in segments.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("unknown key '{key}': '{}' is not an object", segments[..i].join(".")))?;
        cur = obj
            .get_mut(*seg)
            .ok_or_else(|| anyhow!("unknown key '{}'", segments[..=i].join(".")))?;
    }
    // Parse the value as JSON when possible, else keep it as a string.
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    *cur = parsed;
    // Typed round-trip so a bad value is rejected with its key path.
    let check: std::result::Result<RunConfig, _> = serde_json::from_value(root.clone());
    if let Err(e) = check {
        bail!("override --{key} {raw}: {e}");
    }
    Ok(())
}
