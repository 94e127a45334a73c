//! Flat key=value run configuration with include support.
//!
//! Lines are `key = value`, `# comment`, or `include relative/path.cfg`;
//! later assignments override earlier ones, so a file can include a base
//! config and then override a few keys. Unknown keys are hard errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use latseq::bottleneck::BottleneckKind;
use latseq::data::{TaskKind, TaskSpec};
use latseq::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthModeCfg {
    Oracle,
    Predicted,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub data_path: Option<PathBuf>,
    pub min_count: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_cadence: u64,
    pub checkpoint_cadence: u64,
    pub baseline: bool,
    pub seed: u64,
    pub length_mode: LengthModeCfg,
    pub candidates: usize,
    pub decode_temperature: f64,
    pub collapse_threshold: f64,
    pub eval_size: usize,
    /// Raw text after include expansion; embedded in checkpoints.
    pub echo: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            task: TaskKind::Copy,
            vocab_size: 16,
            min_len: 8,
            max_len: 48,
            data_path: None,
            min_count: 1,
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            eval_cadence: 100,
            checkpoint_cadence: 1000,
            baseline: true,
            seed: 1,
            length_mode: LengthModeCfg::Oracle,
            candidates: 10,
            decode_temperature: 0.9,
            collapse_threshold: 0.25,
            eval_size: 128,
            echo: String::new(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = expand_includes(path, 0)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected key = value, got '{raw}'", lineno + 1);
            };
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = RunConfig {
            echo: text.to_string(),
            ..RunConfig::default()
        };
        for (k, v) in &kv {
            cfg.apply(k, v)
                .with_context(|| format!("config key '{k}' = '{v}'"))?;
        }
        // derived model fields
        cfg.model.seed = cfg.seed;
        if cfg.data_path.is_none() {
            cfg.model.src_vocab = cfg.vocab_size;
            cfg.model.tgt_vocab = cfg.vocab_size;
        }
        cfg.model
            .validate()
            .map_err(|e| anyhow!("invalid model configuration: {e}"))?;
        if cfg.max_len + 1 > cfg.model.max_tgt_len {
            bail!(
                "max_len {} (+eos) exceeds max_tgt_len {}",
                cfg.max_len,
                cfg.model.max_tgt_len
            );
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "d_model" => self.model.d_model = v.parse()?,
            "heads" => self.model.heads = v.parse()?,
            "ff_mult" => self.model.ff_mult = v.parse()?,
            "log2_k" => self.model.log2_k = v.parse()?,
            "n_d" => self.model.n_d = v.parse()?,
            "bottleneck" => self.model.bottleneck = v.parse::<BottleneckKind>()?,
            "c" => self.model.compression_exp = v.parse()?,
            "enc_layers" => self.model.enc_layers = v.parse()?,
            "dec_layers" => self.model.dec_layers = v.parse()?,
            "lp_layers" => self.model.lp_layers = v.parse()?,
            "pretrain_steps" => self.model.pretrain_steps = v.parse()?,
            "max_src_len" => self.model.max_src_len = v.parse()?,
            "max_tgt_len" => self.model.max_tgt_len = v.parse()?,
            "ema_decay" => self.model.ema_decay = v.parse()?,
            "beta" => self.model.beta = v.parse()?,
            "commitment_squared" => self.model.commitment_squared = parse_bool(v)?,
            "temperature" => self.model.temperature = v.parse()?,
            "temp_anneal" => {
                let (a, b) = v
                    .split_once(':')
                    .ok_or_else(|| anyhow!("expected FROM:TO"))?;
                self.model.temp_anneal = Some((a.trim().parse()?, b.trim().parse()?));
            }
            "task" => self.task = v.parse::<TaskKind>()?,
            "vocab_size" => self.vocab_size = v.parse()?,
            "min_len" => self.min_len = v.parse()?,
            "max_len" => self.max_len = v.parse()?,
            "data_path" => self.data_path = Some(PathBuf::from(v)),
            "min_count" => self.min_count = v.parse()?,
            "steps" => self.steps = v.parse()?,
            "batch_size" => self.batch_size = v.parse()?,
            "lr" => self.lr = v.parse()?,
            "eval_cadence" => self.eval_cadence = v.parse()?,
            "checkpoint_cadence" => self.checkpoint_cadence = v.parse()?,
            "baseline" => self.baseline = parse_bool(v)?,
            "seed" => self.seed = v.parse()?,
            "length_mode" => {
                self.length_mode = match v {
                    "oracle" => LengthModeCfg::Oracle,
                    "predicted" => LengthModeCfg::Predicted,
                    other => bail!("length_mode must be oracle|predicted, got '{other}'"),
                }
            }
            "candidates" => self.candidates = v.parse()?,
            "decode_temperature" => self.decode_temperature = v.parse()?,
            "collapse_threshold" => self.collapse_threshold = v.parse()?,
            "eval_size" => self.eval_size = v.parse()?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("expected a boolean, got '{other}'"),
    }
}

fn expand_includes(path: &Path, depth: usize) -> Result<String> {
    if depth > 8 {
        bail!("include nesting too deep at {}", path.display());
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("include ") {
            let inc = dir.join(rest.trim());
            out.push_str(&expand_includes(&inc, depth + 1)?);
            out.push('\n');
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}
