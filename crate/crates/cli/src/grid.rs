//! Side-by-side comparison panels with text labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use r2r_core::data_io::{load_image, save_image, Image};
use r2r_tensor::Tensor;

use crate::font;
use crate::{list_images, stem, usage};

pub const MAX_INPUTS: usize = 8;
const STRIP_PAD: usize = 2;
const STRIP_HEIGHT: usize = font::GLYPH_H + 2 * STRIP_PAD;

/// Writes `<stem>_grid.png` for every stem present in all `inputs`, panels
/// in input order, each under a label strip.
pub fn cmd_grid(inputs: &[PathBuf], labels: &[String], output: &Path) -> Result<()> {
    if inputs.len() > MAX_INPUTS {
        return Err(usage(format!(
            "at most {MAX_INPUTS} input directories, got {}",
            inputs.len()
        )));
    }
    if !labels.is_empty() && labels.len() != inputs.len() {
        return Err(usage(format!(
            "{} labels for {} inputs",
            labels.len(),
            inputs.len()
        )));
    }
    let labels: Vec<String> = if labels.is_empty() {
        inputs
            .iter()
            .map(|d| {
                d.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect()
    } else {
        labels.to_vec()
    };
    let dirs: Vec<BTreeMap<String, PathBuf>> = inputs
        .iter()
        .map(|d| Ok(list_images(d)?.into_iter().map(|p| (stem(&p), p)).collect()))
        .collect::<Result<_>>()?;
    let stems: Vec<&String> = dirs[0].keys().collect();
    for (d, files) in inputs.iter().zip(&dirs).skip(1) {
        if files.keys().collect::<Vec<_>>() != stems {
            return Err(usage(format!(
                "{} and {} hold different image names",
                inputs[0].display(),
                d.display()
            )));
        }
    }
    if stems.is_empty() {
        return Err(usage(format!("no images in {}", inputs[0].display())));
    }
    fs::create_dir_all(output)?;
    for s in stems {
        let panels: Vec<Image> = dirs
            .iter()
            .map(|files| load_image(&files[s]))
            .collect::<Result<_, _>>()?;
        if panels.iter().any(|p| p.shape() != panels[0].shape()) {
            return Err(usage(format!("images named {s} differ in size")));
        }
        save_image(
            &tile(&panels, &labels),
            &output.join(format!("{s}_grid.png")),
        )?;
    }
    Ok(())
}

/// Concatenates equally sized panels horizontally above a shared image row.
pub fn tile(panels: &[Image], labels: &[String]) -> Image {
    let (h, w) = (panels[0].shape()[1], panels[0].shape()[2]);
    let (gh, gw) = (h + STRIP_HEIGHT, w * panels.len());
    let mut out = Tensor::zeros(&[3, gh, gw]);
    let data = out.data_mut();
    for (k, (panel, label)) in panels.iter().zip(labels).enumerate() {
        let x0 = k * w;
        font::render(label, |x, y| {
            let (px, py) = (x0 + STRIP_PAD + x, STRIP_PAD + y);
            if px < x0 + w && py < STRIP_HEIGHT {
                for c in 0..3 {
                    data[(c * gh + py) * gw + px] = 1.0;
                }
            }
        });
        let src = panel.data();
        for c in 0..3 {
            for y in 0..h {
                let row = (c * gh + STRIP_HEIGHT + y) * gw + x0;
                data[row..row + w].copy_from_slice(&src[(c * h + y) * w..(c * h + y + 1) * w]);
            }
        }
    }
    out
}
