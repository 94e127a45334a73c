//! `sweep`: 6-cell compression/bit-width grid of reconstruction
//! log-perplexities (n/m in {2,4,8} x bits in {8,14}), each cell a fresh
//! training run under the same budget.
//!
//! Large-scale reference values for this grid (250K-step runs) were
//! 1.33/0.64, 2.04/1.26, 2.44/1.77 for 8/14 bits at n/m = 2, 4, 8;
//! desk-scale runs are expected to reproduce the two monotone orderings,
//! not the absolute numbers.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use crate::config::RunConfig;
use crate::runner::{self, DataSource};
use crate::CliError;

pub const NM_AXIS: [u32; 3] = [1, 2, 3]; // compression exponents: n/m = 2,4,8
pub const BITS_AXIS: [u32; 2] = [8, 14];

#[derive(Debug, Serialize)]
pub struct SweepCell {
    pub n_over_m: usize,
    pub bits: u32,
    pub recon_log_pplx: f64,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// Non-decreasing in n/m within each bit column.
    pub monotone_in_compression: bool,
    /// 14-bit cell never worse than the 8-bit cell in each row.
    pub monotone_in_bits: bool,
    pub csv_path: String,
}

pub fn run(base: RunConfig, out_dir: &Path) -> Result<SweepReport, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Other(e.into()))?;
    let mut cells = Vec::new();
    for &c in &NM_AXIS {
        for &bits in &BITS_AXIS {
            let mut cfg = base.clone();
            cfg.model.compression_exp = c;
            cfg.model.log2_k = bits;
            cfg.model
                .validate()
                .map_err(|e| CliError::Config(e.into()))?;
            let mut cfg2 = cfg.clone();
            let data = DataSource::new(&mut cfg2).map_err(CliError::Config)?;
            let state = runner::train_fresh(&cfg2, &data).map_err(map_train_err)?;
            let pairs = data.eval_pairs(cfg2.eval_size);
            let (l_r, _) =
                runner::eval_reconstruction(&state, &cfg2, &pairs).map_err(CliError::Other)?;
            cells.push(SweepCell {
                n_over_m: 1usize << c,
                bits,
                recon_log_pplx: l_r,
            });
        }
    }

    let get = |nm: usize, bits: u32| -> f64 {
        cells
            .iter()
            .find(|c| c.n_over_m == nm && c.bits == bits)
            .unwrap()
            .recon_log_pplx
    };
    let monotone_in_compression = BITS_AXIS.iter().all(|&bits| {
        let (a, b, c) = (get(2, bits), get(4, bits), get(8, bits));
        a <= b && b <= c
    });
    let monotone_in_bits = [2usize, 4, 8].iter().all(|&nm| get(nm, 14) <= get(nm, 8));

    let csv_path = out_dir.join("sweep.csv");
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&csv_path).map_err(|e| CliError::Other(e.into()))?,
    );
    writeln!(f, "n_over_m,bits,recon_log_pplx").map_err(|e| CliError::Other(e.into()))?;
    for cell in &cells {
        writeln!(f, "{},{},{}", cell.n_over_m, cell.bits, cell.recon_log_pplx)
            .map_err(|e| CliError::Other(e.into()))?;
    }
    f.flush().map_err(|e| CliError::Other(e.into()))?;

    Ok(SweepReport {
        cells,
        monotone_in_compression,
        monotone_in_bits,
        csv_path: csv_path.display().to_string(),
    })
}

fn map_train_err(e: anyhow::Error) -> CliError {
    match e.downcast::<latseq::Error>() {
        Ok(le @ latseq::Error::NonFiniteLoss { .. }) => CliError::Numeric(le.into()),
        Ok(le) => CliError::Other(le.into()),
        Err(e) => CliError::Other(e),
    }
}
