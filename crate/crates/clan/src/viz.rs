//! Attention-map export: per middle stage, the input image, the gate map
//! normalized to [0, 1] and upsampled to input size, and a 50/50 overlay.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::ppm::write_image_ppm;
use crate::data::{synth_generate, Sample, Split};
use crate::error::{ClanError, Result};
use crate::model::ClanModel;
use crate::tensor::{Element, ResampleMode, Tensor};

/// Min-max normalize to [0, 1]; a constant map collapses to all zeros.
fn min_max_normalize<E: Element>(values: &[E]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        let f = v.as_f64();
        if f < lo {
            lo = f;
        }
        if f > hi {
            hi = f;
        }
    }
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v.as_f64() - lo) / (hi - lo)).collect()
}

/// Files written for one sample.
pub struct VizOutput {
    pub input: PathBuf,
    /// (stage, attention map path, overlay path)
    pub stages: Vec<(usize, PathBuf, PathBuf)>,
}

pub fn run_viz<E: Element>(
    cfg: &RunConfig,
    checkpoint: &Path,
    sample_index: usize,
    out_dir: &Path,
) -> Result<VizOutput> {
    cfg.validate()?;
    let model: ClanModel<E> = ClanModel::new(cfg.model.clone(), cfg.seed)?;
    model.load(checkpoint)?;
    let test: Vec<Sample<E>> = synth_generate(&cfg.data, Split::Test)?;
    if sample_index >= test.len() {
        return Err(ClanError::usage(
            "viz",
            format!("sample {sample_index} out of range, test set has {}", test.len()),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let sample = &test[sample_index];
    let size = cfg.data.image_size;

    let batch = sample.image.reshape(&[1, 3, size, size])?;
    let trace = model.forward_trace(&batch)?;

    let input_path = out_dir.join(format!("sample{sample_index}_input.ppm"));
    write_image_ppm(&sample.image, &input_path)?;

    let image = sample.image.data_vec();
    let mut stages = Vec::new();
    for (stage, map) in &trace.attention_maps {
        let normalized = min_max_normalize(&map.data());
        let map_shape = map.shape();
        let small = Tensor::<f64>::from_vec(&[1, 1, map_shape[2], map_shape[3]], normalized)?;
        let up = small.resample(size, size, ResampleMode::Nearest)?;
        let up_gray = up.data_vec();

        // single channel replicated to RGB
        let mut rgb = Vec::with_capacity(3 * size * size);
        for _ in 0..3 {
            rgb.extend_from_slice(&up_gray);
        }
        let map_img = Tensor::<f64>::from_vec(&[3, size, size], rgb)?;
        let map_path = out_dir.join(format!("sample{sample_index}_s{stage}_attention.ppm"));
        write_image_ppm(&map_img, &map_path)?;

        let mut overlay = Vec::with_capacity(3 * size * size);
        for ch in 0..3 {
            for p in 0..size * size {
                overlay.push(0.5 * image[ch * size * size + p].as_f64() + 0.5 * up_gray[p]);
            }
        }
        let overlay_img = Tensor::<f64>::from_vec(&[3, size, size], overlay)?;
        let overlay_path = out_dir.join(format!("sample{sample_index}_s{stage}_overlay.ppm"));
        write_image_ppm(&overlay_img, &overlay_path)?;

        stages.push((*stage, map_path, overlay_path));
    }
    Ok(VizOutput {
        input: input_path,
        stages,
    })
}
