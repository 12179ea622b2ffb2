//! Attention-map export: one 8-bit PGM per (layer, head, group token),
//! the token's assignment column reshaped onto the patch grid and min-max
//! normalized.

use std::path::{Path, PathBuf};

use super::{AnalysisError, AttnMatrix};
use crate::data::write_pgm;

/// Export maps for the selected layers/heads. `tokens = None` exports
/// every group token. Returns the written paths.
pub fn export_attention_maps(
    assignments: &[AttnMatrix],
    grid_h: usize,
    grid_w: usize,
    layers: &[usize],
    heads: &[usize],
    tokens: Option<&[usize]>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &l in layers {
        let a = assignments.get(l).ok_or(AnalysisError::BadIndex {
            what: "layer",
            index: l,
            max: assignments.len().saturating_sub(1),
        })?;
        if a.n != grid_h * grid_w {
            return Err(AnalysisError::BadIndex {
                what: "grid",
                index: grid_h * grid_w,
                max: a.n,
            });
        }
        let token_list: Vec<usize> = match tokens {
            Some(t) => t.to_vec(),
            None => (0..a.m).collect(),
        };
        for &h in heads {
            if h >= a.heads {
                return Err(AnalysisError::BadIndex {
                    what: "head",
                    index: h,
                    max: a.heads - 1,
                });
            }
            for &t in &token_list {
                if t >= a.m {
                    return Err(AnalysisError::BadIndex {
                        what: "token",
                        index: t,
                        max: a.m - 1,
                    });
                }
                let column: Vec<f64> = (0..a.n).map(|i| a.row(h, i)[t]).collect();
                let gray = to_gray(&column);
                let path = out_dir.join(format!("attn_L{l}_H{h}_T{t}.pgm"));
                write_pgm(&path, grid_w, grid_h, &gray)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Min-max normalize to 0..255; a constant map renders mid-gray.
fn to_gray(column: &[f64]) -> Vec<u8> {
    let min = column.iter().copied().fold(f64::INFINITY, f64::min);
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if (max - min) < 1e-12 {
        return vec![128; column.len()];
    }
    column
        .iter()
        .map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8)
        .collect()
}
