//! Word-level interaction maps of the post-block representations.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfa_tensor::{Real, Tape};

use crate::error::{config_err, Error, Result};
use crate::matcher::{ExamplePair, ForwardOptions, SiameseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `rows.len() × cols.len()`.
    pub values: Vec<Vec<f64>>,
}

/// `M_ij = (1/D)·Σ_d u_id·v_jd` for row-major `u: la × d`, `v: lb × d`.
pub fn feature_averaged_dot(u: &[f64], v: &[f64], d: usize) -> Result<Vec<Vec<f64>>> {
    if d == 0 || !u.len().is_multiple_of(d) || !v.len().is_multiple_of(d) {
        return Err(config_err(format!(
            "inputs of {} and {} values are not multiples of width {d}",
            u.len(),
            v.len()
        )));
    }
    Ok(u.chunks(d)
        .map(|ui| {
            v.chunks(d)
                .map(|vj| ui.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() / d as f64)
                .collect()
        })
        .collect())
}

/// Map for one pair; tokens are rendered with `name`.
pub fn export_heatmap<T: Real>(
    model: &SiameseModel<T>,
    pair: &ExamplePair,
    name: impl Fn(usize) -> String,
) -> Result<Heatmap> {
    let mut tape = Tape::new();
    let trace = model.forward_pair(&mut tape, pair, ForwardOptions::default())?;
    let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let u = to64(tape.value(trace.u));
    let v = to64(tape.value(trace.v));
    Ok(Heatmap {
        rows: pair.tokens_a.iter().map(|&t| name(t)).collect(),
        cols: pair.tokens_b.iter().map(|&t| name(t)).collect(),
        values: feature_averaged_dot(&u, &v, model.config().dim)?,
    })
}

impl Heatmap {
    /// Header row of column tokens; each data row starts with its token.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("token".to_string()).chain(self.cols.iter().cloned());
        w.write_record(header).map_err(csv_err)?;
        for (label, row) in self.rows.iter().zip(&self.values) {
            let rec = std::iter::once(label.clone()).chain(row.iter().map(|v| v.to_string()));
            w.write_record(rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| config_err(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    config_err(format!("csv: {e}"))
}
