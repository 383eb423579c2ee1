//! Rendering of attack-matrix and mixing-experiment results as text/JSON
//! tables, plus side-by-side qualitative figure grids.

use crate::error::{Error, Result};
use crate::image_core::{save_image, Image};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// One cell of the surrogate-attack comparison table. `method` is one of
/// `ours`, `ours-no-stage`, `unified`, `unified-no-stage` (the `-no-stage`
/// variants skip the adversarial training stage).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Cell {
    pub method: String,
    pub with_da: bool,
    pub column: String,
    pub sr_percent: f64,
    pub fp_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Report {
    pub cells: Vec<Table1Cell>,
}

/// One row of the data-mixing experiment table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table2Row {
    pub mix: String,
    pub sr_percent: f64,
    pub sm_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table2Report {
    pub rows: Vec<Table2Row>,
}

fn pad(s: &str, w: usize) -> String {
    format!("{s:<w$}")
}

impl Table1Report {
    /// Text table: one row per (method, DA) pair, one column per sweep entry.
    pub fn render_text(&self) -> String {
        let mut columns: Vec<String> = Vec::new();
        for c in &self.cells {
            if !columns.contains(&c.column) {
                columns.push(c.column.clone());
            }
        }
        let mut rows: Vec<(String, bool)> = Vec::new();
        for c in &self.cells {
            let key = (c.method.clone(), c.with_da);
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        let label_w = rows
            .iter()
            .map(|(m, _)| m.len() + 9)
            .max()
            .unwrap_or(8)
            .max(18);
        let col_w = columns.iter().map(|c| c.len()).max().unwrap_or(6).max(8) + 2;
        let mut out = String::new();
        let _ = write!(out, "{}", pad("method", label_w));
        for c in &columns {
            let _ = write!(out, "{}", pad(c, col_w));
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_w + col_w * columns.len()));
        out.push('\n');
        for (method, da) in &rows {
            let label = format!("{} [{}]", method, if *da { "With DA" } else { "W/O DA" });
            let _ = write!(out, "{}", pad(&label, label_w));
            for col in &columns {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| &c.method == method && c.with_da == *da && &c.column == col);
                match cell {
                    Some(c) => {
                        let _ = write!(out, "{}", pad(&format!("{:.1}%", c.sr_percent), col_w));
                    }
                    None => {
                        let _ = write!(out, "{}", pad("-", col_w));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

impl Table2Report {
    pub fn render_text(&self) -> String {
        let mix_w = self.rows.iter().map(|r| r.mix.len()).max().unwrap_or(4).max(12) + 2;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}{}{}",
            pad("mix", mix_w),
            pad("SR", 10),
            pad("SM PSNR", 10)
        );
        out.push_str(&"-".repeat(mix_w + 20));
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}{}{}",
                pad(&r.mix, mix_w),
                pad(&format!("{:.1}%", r.sr_percent), 10),
                pad(&format!("{:.2} dB", r.sm_psnr), 10)
            );
        }
        out
    }
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

/// One qualitative figure row: cover, watermarked output, ground-truth
/// watermark, extracted watermark.
pub struct FigureRow<'a, S: Scalar> {
    pub cover: &'a Image<S>,
    pub watermarked: &'a Image<S>,
    pub watermark_truth: &'a Image<S>,
    pub extracted: &'a Image<S>,
}

/// Compose the rows into a single PNG grid with a 2-pixel white gutter.
pub fn figure_grid<S: Scalar>(rows: &[FigureRow<'_, S>], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidImage("figure grid needs at least one row".into()));
    }
    let (h, w) = (rows[0].cover.height(), rows[0].cover.width());
    for r in rows {
        for img in [r.cover, r.watermarked, r.watermark_truth, r.extracted] {
            if img.height() != h || img.width() != w {
                return Err(Error::DimensionMismatch(
                    "all figure panels must share one size".into(),
                ));
            }
        }
    }
    let gap = 2usize;
    let gh = rows.len() * h + (rows.len() - 1) * gap;
    let gw = 4 * w + 3 * gap;
    let mut grid = Image::<S>::constant(gh, gw, [255.0; 3]);
    for (ri, row) in rows.iter().enumerate() {
        let r0 = ri * (h + gap);
        for (ci, img) in [row.cover, row.watermarked, row.watermark_truth, row.extracted]
            .iter()
            .enumerate()
        {
            let c0 = ci * (w + gap);
            grid.pixels
                .slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w, ..])
                .assign(&img.pixels);
        }
    }
    save_image(&grid, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_core::load_image;
    use crate::Real;
    use tempfile::tempdir;

    #[test]
    fn table1_text_contains_all_row_labels() {
        let mut cells = Vec::new();
        for method in ["ours", "ours-no-stage", "unified", "unified-no-stage"] {
            for da in [false, true] {
                cells.push(Table1Cell {
                    method: method.into(),
                    with_da: da,
                    column: "unet-sm".into(),
                    sr_percent: 42.0,
                    fp_percent: 0.0,
                });
            }
        }
        let text = Table1Report { cells }.render_text();
        assert!(text.contains("ours [With DA]"));
        assert!(text.contains("ours [W/O DA]"));
        assert!(text.contains("unified-no-stage [With DA]"));
        assert!(text.contains("42.0%"));
        assert!(text.contains("unet-sm"));
    }

    #[test]
    fn table2_text_renders_rows() {
        let rep = Table2Report {
            rows: vec![
                Table2Row {
                    mix: "none".into(),
                    sr_percent: 97.0,
                    sm_psnr: 32.05,
                },
                Table2Row {
                    mix: "clean-10".into(),
                    sr_percent: 95.0,
                    sm_psnr: 32.67,
                },
            ],
        };
        let text = rep.render_text();
        assert!(text.contains("clean-10"));
        assert!(text.contains("32.67 dB"));
    }

    #[test]
    fn figure_grid_dimensions_and_content() {
        let dir = tempdir().unwrap();
        let a = Image::<Real>::constant(8, 10, [10.0, 20.0, 30.0]);
        let b = Image::<Real>::constant(8, 10, [200.0, 0.0, 0.0]);
        let path = dir.path().join("grid.png");
        figure_grid(
            &[FigureRow {
                cover: &a,
                watermarked: &b,
                watermark_truth: &a,
                extracted: &b,
            }],
            &path,
        )
        .unwrap();
        let g: Image<Real> = load_image(&path).unwrap();
        assert_eq!(g.height(), 8);
        assert_eq!(g.width(), 4 * 10 + 3 * 2);
        assert_eq!(g.pixels[[0, 0, 0]], 10.0);
        assert_eq!(g.pixels[[0, 12, 0]], 200.0);
        // Gutter stays white.
        assert_eq!(g.pixels[[0, 10, 0]], 255.0);
    }

    #[test]
    fn json_roundtrip_is_stable() {
        let dir = tempdir().unwrap();
        let rep = Table2Report {
            rows: vec![Table2Row {
                mix: "none".into(),
                sr_percent: 80.0,
                sm_psnr: 30.0,
            }],
        };
        let p = dir.path().join("t2.json");
        save_json(&rep, &p).unwrap();
        let back: Table2Report =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back.rows[0].mix, "none");
    }
}
