//! Attention-map export: binary PGM heatmaps plus raw CSV matrices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit binary PGM (P5), values scaled so the max maps to 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let maxv = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if maxv > 0.0 { 255.0 / maxv } else { 0.0 };
    let mut bytes = Vec::with_capacity(values.len() + 32);
    bytes.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for v in values {
        bytes.push((v * scale).round().clamp(0.0, 255.0) as u8);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Plain CSV of a 2-D tensor, one row per line.
pub fn write_csv(path: &Path, matrix: &Tensor) -> Result<()> {
    let (rows, cols) = matrix.dims2();
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.12e}", matrix.data()[r * cols + c]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Files written for one clip/block: per-frame spatial maps (mean over heads;
/// the PGM shows attention received per patch on the patch grid) and
/// per-patch temporal maps.
pub fn export_attention_maps(
    model: &Model,
    clip: &Tensor,
    block: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (_, maps) = model.encode_with_attention(clip, block)?;
    let (gh, gw) = model.config.grid();
    let mut written = Vec::new();

    for (t, att) in maps.spatial.iter().enumerate() {
        let csv = out_dir.join(format!("spatial_block{block}_frame{t}.csv"));
        write_csv(&csv, att)?;
        written.push(csv);

        // attention received per patch: column means of the row-stochastic map
        let (n, _) = att.dims2();
        let mut received = vec![0.0; n];
        for r in 0..n {
            for c in 0..n {
                received[c] += att.data()[r * n + c] / n as f64;
            }
        }
        let pgm = out_dir.join(format!("spatial_block{block}_frame{t}.pgm"));
        write_pgm(&pgm, gw, gh, &received)?;
        written.push(pgm);
    }

    for (i, att) in maps.temporal.iter().enumerate() {
        let csv = out_dir.join(format!("temporal_block{block}_patch{i}.csv"));
        write_csv(&csv, att)?;
        written.push(csv);
        let (t, _) = att.dims2();
        let pgm = out_dir.join(format!("temporal_block{block}_patch{i}.pgm"));
        write_pgm(&pgm, t, t, att.data())?;
        written.push(pgm);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::params::ParamId;
    use crate::rng::SeededRng;

    fn model_with_zero_projections() -> Model {
        let config = EncoderConfig {
            frames: 4,
            height: 16,
            width: 16,
            patch_size: 8,
            embed_dim: 8,
            blocks: 1,
            spatial_heads: 2,
            head_dim: 4,
            head_scale: 0.5,
            projector_dim: 8,
            ..EncoderConfig::default()
        };
        let mut model = Model::new(config, 2, 1).unwrap();
        for i in 0..model.params.len() {
            let name = model.params.name(ParamId(i)).to_string();
            if name.contains(".wq") || name.contains(".wk") {
                model.params.get_mut(ParamId(i)).value.data_mut().fill(0.0);
            }
        }
        model
    }

    #[test]
    fn zero_projections_export_uniform_maps() {
        let model = model_with_zero_projections();
        let mut rng = SeededRng::new(2);
        let clip = Tensor::from_fn(&[4, 16, 16, 3], |_| rng.uniform(0.0, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention_maps(&model, &clip, 0, dir.path()).unwrap();
        assert!(!files.is_empty());

        let n = model.config.n_patches() as f64;
        let csv = std::fs::read_to_string(dir.path().join("spatial_block0_frame0.csv")).unwrap();
        for line in csv.lines() {
            let row: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            for v in row {
                assert!((v - 1.0 / n).abs() < 1e-12);
            }
        }
        let t = model.config.frames as f64;
        let csv = std::fs::read_to_string(dir.path().join("temporal_block0_patch0.csv")).unwrap();
        for line in csv.lines() {
            let row: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for v in row {
                assert!((v - 1.0 / t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_rows_sum_to_one_for_random_weights() {
        let config = EncoderConfig {
            frames: 3,
            height: 16,
            width: 16,
            patch_size: 8,
            embed_dim: 8,
            blocks: 2,
            spatial_heads: 2,
            head_dim: 4,
            head_scale: 0.5,
            projector_dim: 8,
            ..EncoderConfig::default()
        };
        let model = Model::new(config, 2, 9).unwrap();
        let mut rng = SeededRng::new(3);
        let clip = Tensor::from_fn(&[3, 16, 16, 3], |_| rng.uniform(0.0, 1.0));
        let dir = tempfile::tempdir().unwrap();
        export_attention_maps(&model, &clip, 1, dir.path()).unwrap();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "csv") {
                let content = std::fs::read_to_string(&path).unwrap();
                for line in content.lines() {
                    let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "{}: row sum {sum}", path.display());
                }
            }
        }
    }

    #[test]
    fn bad_block_index_is_rejected() {
        let model = model_with_zero_projections();
        let clip = Tensor::zeros(&[4, 16, 16, 3]);
        let dir = tempfile::tempdir().unwrap();
        assert!(export_attention_maps(&model, &clip, 5, dir.path()).is_err());
    }
}
