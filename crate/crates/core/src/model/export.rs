//! Attention visualization export: the final encoder layer's self-attention
//! reduced to a spatial heatmap (PGM), and per-scene decoder activation
//! strengths (CSV).

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::config::ModelConfig;
use crate::model::ForwardOutput;
use crate::tensor::Element;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("attention shape {0:?} does not match a square {1}x{1} map")]
    BadGeometry(Vec<usize>, usize),
}

/// Which transformer branch to visualize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Position,
    Orientation,
}

impl std::str::FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "position" => Ok(Branch::Position),
            "orientation" => Ok(Branch::Orientation),
            other => Err(format!("unknown branch `{other}` (position|orientation)")),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ExportError {
    ExportError::Io { path: path.display().to_string(), source }
}

/// Mean-over-heads, mean-over-query-rows encoder attention upsampled to
/// the input resolution, min-max normalized and written as 8-bit grayscale
/// PGM; plus the per-scene decoder output norms as `scene_id,l2_norm` CSV
/// rows.
pub fn export_attention<E: Element>(
    out: &ForwardOutput<E>,
    branch: Branch,
    config: &ModelConfig,
    heatmap_path: &Path,
    csv_path: &Path,
) -> Result<(), ExportError> {
    let (attn, decoder, side) = match branch {
        Branch::Position => (&out.encoder_attn_x, &out.decoder_x, config.map_x_side()),
        Branch::Orientation => (&out.encoder_attn_q, &out.decoder_q, config.map_q_side()),
    };
    let map = attention_heatmap(attn.data(), attn.shape(), side)?;
    let upsampled = bilinear_upsample(&map, side, config.input_hw);
    let pixels = min_max_to_bytes(&upsampled);
    write_pgm(heatmap_path, config.input_hw, config.input_hw, &pixels)?;

    let c = decoder.shape()[1];
    let mut csv = String::new();
    for (scene, row) in decoder.data().chunks_exact(c).enumerate() {
        let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
        csv.push_str(&format!("{scene},{norm}\n"));
    }
    fs::write(csv_path, csv).map_err(|e| io_err(csv_path, e))?;
    Ok(())
}

/// `[heads, Lq, Lk]` -> per-key mean over heads and query rows, reshaped
/// to the `side x side` map grid.
fn attention_heatmap<E: Element>(
    data: &[E],
    shape: &[usize],
    side: usize,
) -> Result<Vec<f64>, ExportError> {
    let (heads, lq, lk) = match shape {
        [h, q, k] => (*h, *q, *k),
        s => return Err(ExportError::BadGeometry(s.to_vec(), side)),
    };
    if lk != side * side {
        return Err(ExportError::BadGeometry(shape.to_vec(), side));
    }
    let mut sums = vec![0.0f64; lk];
    for row in data.chunks_exact(lk) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v.to_f64();
        }
    }
    let scale = 1.0 / (heads * lq) as f64;
    for s in &mut sums {
        *s *= scale;
    }
    Ok(sums)
}

/// Bilinear resize of a square map; constant inputs stay constant.
fn bilinear_upsample(map: &[f64], side: usize, target: usize) -> Vec<f64> {
    if side == target {
        return map.to_vec();
    }
    let scale = side as f64 / target as f64;
    let mut out = vec![0.0; target * target];
    for oy in 0..target {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let fy = sy - y0 as f64;
        for ox in 0..target {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let fx = sx - x0 as f64;
            let top = map[y0 * side + x0] * (1.0 - fx) + map[y0 * side + x1] * fx;
            let bottom = map[y1 * side + x0] * (1.0 - fx) + map[y1 * side + x1] * fx;
            out[oy * target + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Min-max normalize to [0,1] then quantize to bytes. An all-equal map
/// (degenerate range) maps to 0.
fn min_max_to_bytes(values: &[f64]) -> Vec<u8> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary 8-bit grayscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), ExportError> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    let _ = write!(buf, "P5\n{width} {height}\n255\n");
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_maps_to_constant_zero_heatmap() {
        let side = 3;
        let lk = side * side;
        let attn = vec![1.0f64 / lk as f64; 2 * lk * lk];
        let map = attention_heatmap(&attn, &[2, lk, lk], side).unwrap();
        let up = bilinear_upsample(&map, side, 12);
        let bytes = min_max_to_bytes(&up);
        assert_eq!(bytes.len(), 144);
        assert!(bytes.iter().all(|&b| b == 0));
    }

    #[test]
    fn constant_map_upsampling_is_constant() {
        let map = vec![0.7; 16];
        let up = bilinear_upsample(&map, 4, 32);
        assert_eq!(up.len(), 32 * 32);
        for v in up {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn min_max_uses_full_byte_range() {
        let bytes = min_max_to_bytes(&[0.0, 0.5, 1.0]);
        assert_eq!(bytes, vec![0, 128, 255]);
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = std::env::temp_dir().join("msapr_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        write_pgm(&path, 2, 2, &[0, 64, 128, 255]).unwrap();
        let data = std::fs::read(&path).unwrap();
        assert!(data.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&data[data.len() - 4..], &[0, 64, 128, 255]);
        std::fs::remove_file(&path).unwrap();
    }
}
