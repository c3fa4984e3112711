//! Default boxes and the offset encoding used by the detection head.

use serde::{Deserialize, Serialize};

use crate::geometry::Box;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Box sides as a fraction of the image size.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    /// Divisors applied to the centre and log-size offsets.
    pub variances: [f64; 2],
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![0.15, 0.3],
            aspect_ratios: vec![1.0, 2.0, 0.5],
            variances: [0.1, 0.2],
        }
    }
}

impl AnchorConfig {
    pub fn boxes_per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Tiles default boxes over a `grid x grid` map covering an
/// `image_size x image_size` image. Order: row, column, scale, ratio.
pub fn default_boxes(cfg: &AnchorConfig, grid: usize, image_size: usize) -> Vec<Box> {
    let step = image_size as f64 / grid as f64;
    let mut out = Vec::with_capacity(grid * grid * cfg.boxes_per_location());
    for gy in 0..grid {
        for gx in 0..grid {
            let cx = (gx as f64 + 0.5) * step;
            let cy = (gy as f64 + 0.5) * step;
            for &s in &cfg.scales {
                for &r in &cfg.aspect_ratios {
                    let side = s * image_size as f64;
                    out.push(Box {
                        cx,
                        cy,
                        w: side * r.sqrt(),
                        h: side / r.sqrt(),
                    });
                }
            }
        }
    }
    out
}

/// Regression target of `gt` relative to `anchor`.
pub fn encode(gt: &Box, anchor: &Box, variances: [f64; 2]) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / anchor.w / variances[0],
        (gt.cy - anchor.cy) / anchor.h / variances[0],
        (gt.w / anchor.w).ln() / variances[1],
        (gt.h / anchor.h).ln() / variances[1],
    ]
}

pub fn decode(offsets: &[f64], anchor: &Box, variances: [f64; 2]) -> Box {
    Box {
        cx: anchor.cx + offsets[0] * variances[0] * anchor.w,
        cy: anchor.cy + offsets[1] * variances[0] * anchor.h,
        w: anchor.w * (offsets[2] * variances[1]).exp(),
        h: anchor.h * (offsets[3] * variances[1]).exp(),
    }
}
