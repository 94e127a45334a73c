//! Versioned checkpoint: a JSON header (names, shapes, offsets) followed by a
//! flat little-endian float64 payload. Save -> load -> save is byte-identical
//! and the format is readable from any language with a JSON parser.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use latseq::model::{ArBaseline, LatentTransformer, ModelConfig};
use latseq::rng::CounterRng;
use latseq::tensor::ParamSet;
use latseq::train::Trainer;

const MAGIC: &[u8; 8] = b"LSQCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    adam_steps: [u64; 3],
    noise_seed: u64,
    noise_stream: u64,
    noise_counter: u64,
    config_echo: String,
    tensors: Vec<TensorMeta>,
}

/// Everything a training run owns.
pub struct TrainState {
    pub lt: LatentTransformer,
    pub baseline: Option<ArBaseline>,
    pub trainer: Trainer,
    pub step: u64,
}

struct Builder {
    metas: Vec<TensorMeta>,
    payload: Vec<f64>,
}

impl Builder {
    fn new() -> Self {
        Builder { metas: Vec::new(), payload: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.metas.push(TensorMeta {
            name,
            shape,
            offset: self.payload.len() as u64,
            len: values.len() as u64,
        });
        self.payload.extend_from_slice(values);
    }

    fn push_set(&mut self, prefix: &str, set: &ParamSet) {
        for (_, name, shape, values) in set.iter() {
            self.push(format!("{prefix}/{name}"), shape.to_vec(), values);
        }
    }

    fn push_adam(&mut self, prefix: &str, trainer_part: (&ParamSet, &latseq::train::Adam)) {
        let (set, adam) = trainer_part;
        let (_, m, v) = adam.state();
        for (pid, name, shape, _) in set.iter() {
            if pid.0 < m.len() {
                self.push(format!("{prefix}/m/{name}"), shape.to_vec(), &m[pid.0]);
                self.push(format!("{prefix}/v/{name}"), shape.to_vec(), &v[pid.0]);
            }
        }
    }
}

pub fn save(path: &Path, state: &TrainState, config_echo: &str) -> Result<()> {
    let mut b = Builder::new();
    b.push_set("ae", &state.lt.params);
    b.push_set("lp", &state.lt.lp_params);
    if let Some(bl) = &state.baseline {
        b.push_set("bl", &bl.params);
    }
    if let Some(book) = &state.lt.bottleneck.codebook {
        let (tables, counts, projections) = book.state();
        for (i, t) in tables.iter().enumerate() {
            b.push(format!("codebook/table{i}"), vec![book.k_prime, book.slice_dim], t);
        }
        for (i, c) in counts.iter().enumerate() {
            b.push(format!("codebook/counts{i}"), vec![book.k_prime], c);
        }
        for (i, p) in projections.iter().enumerate() {
            b.push(format!("codebook/proj{i}"), vec![book.d, book.slice_dim], p);
        }
    }
    b.push_adam("adam_ae", (&state.lt.params, &state.trainer.adam_ae));
    b.push_adam("adam_lp", (&state.lt.lp_params, &state.trainer.adam_lp));
    if let Some(bl) = &state.baseline {
        b.push_adam("adam_bl", (&bl.params, &state.trainer.adam_bl));
    }

    let header = Header {
        format_version: VERSION,
        step: state.step,
        adam_steps: [
            state.trainer.adam_ae.state().0,
            state.trainer.adam_lp.state().0,
            state.trainer.adam_bl.state().0,
        ],
        noise_seed: state.trainer.noise.seed(),
        noise_stream: state.trainer.noise.stream(),
        noise_counter: state.trainer.noise.counter(),
        config_echo: config_echo.to_string(),
        tensors: b.metas,
    };
    let header_json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        for v in &b.payload {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild a full training state from a checkpoint. The model architecture
/// comes from `cfg`; every tensor in the file must land on a matching name
/// and shape.
pub fn load(path: &Path, cfg: &ModelConfig, lr: f64, total_steps: u64, with_baseline: bool) -> Result<TrainState> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("not a checkpoint file: bad magic");
    }
    let mut ver = [0u8; 4];
    f.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        bail!("checkpoint version {version} not supported (expected {VERSION})");
    }
    let mut hlen = [0u8; 8];
    f.read_exact(&mut hlen)?;
    let mut header_json = vec![0u8; u64::from_le_bytes(hlen) as usize];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    let mut payload_bytes = Vec::new();
    f.read_to_end(&mut payload_bytes)?;
    if payload_bytes.len() % 8 != 0 {
        bail!("truncated payload");
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut lt = LatentTransformer::new(cfg.clone())?;
    let mut baseline = with_baseline.then(|| ArBaseline::new(cfg));
    let mut trainer = Trainer::new(lr, 0, total_steps);
    trainer.noise =
        CounterRng::with_counter(header.noise_seed, header.noise_stream, header.noise_counter);

    let slice_of = |meta: &TensorMeta| -> Result<&[f64]> {
        let (o, l) = (meta.offset as usize, meta.len as usize);
        if o + l > payload.len() {
            bail!("tensor {} overruns payload", meta.name);
        }
        Ok(&payload[o..o + l])
    };

    let mut adam_ae_m: Vec<Vec<f64>> = Vec::new();
    let mut adam_ae_v: Vec<Vec<f64>> = Vec::new();
    let mut adam_lp_m: Vec<Vec<f64>> = Vec::new();
    let mut adam_lp_v: Vec<Vec<f64>> = Vec::new();
    let mut adam_bl_m: Vec<Vec<f64>> = Vec::new();
    let mut adam_bl_v: Vec<Vec<f64>> = Vec::new();

    for meta in &header.tensors {
        let data = slice_of(meta)?.to_vec();
        let (ns, rest) = meta
            .name
            .split_once('/')
            .with_context(|| format!("malformed tensor name {}", meta.name))?;
        match ns {
            "ae" => set_param(&mut lt.params, rest, data)?,
            "lp" => set_param(&mut lt.lp_params, rest, data)?,
            "bl" => {
                let bl = baseline
                    .as_mut()
                    .context("checkpoint has baseline tensors but baseline is disabled")?;
                set_param(&mut bl.params, rest, data)?;
            }
            "codebook" => {
                let book = lt
                    .bottleneck
                    .codebook
                    .as_mut()
                    .context("checkpoint has codebook tensors but bottleneck has none")?;
                let (tables, counts, projections) = book.state_mut();
                if let Some(i) = rest.strip_prefix("table") {
                    tables[i.parse::<usize>()?] = data;
                } else if let Some(i) = rest.strip_prefix("counts") {
                    counts[i.parse::<usize>()?] = data;
                } else if let Some(i) = rest.strip_prefix("proj") {
                    projections[i.parse::<usize>()?] = data;
                } else {
                    bail!("unknown codebook tensor {rest}");
                }
            }
            "adam_ae" => stash_adam(rest, data, &lt.params, &mut adam_ae_m, &mut adam_ae_v)?,
            "adam_lp" => stash_adam(rest, data, &lt.lp_params, &mut adam_lp_m, &mut adam_lp_v)?,
            "adam_bl" => {
                let bl = baseline.as_ref().context("adam_bl without baseline")?;
                stash_adam(rest, data, &bl.params, &mut adam_bl_m, &mut adam_bl_v)?
            }
            other => bail!("unknown tensor namespace {other}"),
        }
    }

    let fill = |store: &mut Vec<Vec<f64>>, set: &ParamSet| {
        store.resize(set.len(), Vec::new());
        for (pid, _, shape, _) in set.iter() {
            if store[pid.0].is_empty() {
                store[pid.0] = vec![0.0; shape.iter().product()];
            }
        }
    };
    if !adam_ae_m.is_empty() {
        fill(&mut adam_ae_m, &lt.params);
        fill(&mut adam_ae_v, &lt.params);
        trainer.adam_ae.restore(header.adam_steps[0], adam_ae_m, adam_ae_v);
    }
    if !adam_lp_m.is_empty() {
        fill(&mut adam_lp_m, &lt.lp_params);
        fill(&mut adam_lp_v, &lt.lp_params);
        trainer.adam_lp.restore(header.adam_steps[1], adam_lp_m, adam_lp_v);
    }
    if let Some(bl) = &baseline {
        if !adam_bl_m.is_empty() {
            fill(&mut adam_bl_m, &bl.params);
            fill(&mut adam_bl_v, &bl.params);
            trainer.adam_bl.restore(header.adam_steps[2], adam_bl_m, adam_bl_v);
        }
    }

    Ok(TrainState {
        lt,
        baseline,
        trainer,
        step: header.step,
    })
}

/// The config text stored at save time.
pub fn read_config_echo(path: &Path) -> Result<String> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("not a checkpoint file: bad magic");
    }
    let mut ver = [0u8; 4];
    f.read_exact(&mut ver)?;
    if u32::from_le_bytes(ver) != VERSION {
        bail!("unsupported checkpoint version");
    }
    let mut hlen = [0u8; 8];
    f.read_exact(&mut hlen)?;
    let mut header_json = vec![0u8; u64::from_le_bytes(hlen) as usize];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    Ok(header.config_echo)
}

fn set_param(set: &mut ParamSet, name: &str, data: Vec<f64>) -> Result<()> {
    let pid = set
        .find(name)
        .with_context(|| format!("parameter {name} not in this architecture"))?;
    if set.values(pid).len() != data.len() {
        bail!("parameter {name}: size mismatch");
    }
    set.set(pid, data);
    Ok(())
}

fn stash_adam(
    rest: &str,
    data: Vec<f64>,
    set: &ParamSet,
    m: &mut Vec<Vec<f64>>,
    v: &mut Vec<Vec<f64>>,
) -> Result<()> {
    let (which, name) = rest
        .split_once('/')
        .with_context(|| format!("malformed adam tensor {rest}"))?;
    let pid = set
        .find(name)
        .with_context(|| format!("adam state for unknown parameter {name}"))?;
    let store = match which {
        "m" => m,
        "v" => v,
        other => bail!("unknown adam slot {other}"),
    };
    if store.len() < set.len() {
        store.resize(set.len(), Vec::new());
    }
    store[pid.0] = data;
    Ok(())
}
