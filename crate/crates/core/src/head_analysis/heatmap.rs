use std::fmt::Write;
use std::path::Path;

use super::RunEnsemble;
use crate::error::{ensure, Error, Result};

/// A labelled layers × heads grid of scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Nine significant digits in scientific notation.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

impl Heatmap {
    pub fn from_ensemble(ensemble: &RunEnsemble) -> Self {
        Self {
            labels: ensemble.keys().iter().map(ToString::to_string).collect(),
            values: ensemble.mean.clone(),
        }
    }

    pub fn heads(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for h in 0..self.heads() {
            let _ = write!(out, ",head_{h}");
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(label);
            for &v in row {
                out.push(',');
                out.push_str(&sig9(v));
            }
            out.push('\n');
        }
        out
    }

    /// Grid of shaded cells, darker for larger values, one `rect` per head.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 40;
        const LEFT: usize = 90;
        const TOP: usize = 30;
        let max = self.values.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        let width = LEFT + CELL * self.heads() + 10;
        let height = TOP + CELL * self.values.len() + 10;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">\n"
        );
        for h in 0..self.heads() {
            let x = LEFT + CELL * h + CELL / 2;
            let _ = writeln!(
                out,
                "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">h{h}</text>",
                TOP - 8
            );
        }
        for (r, (label, row)) in self.labels.iter().zip(&self.values).enumerate() {
            let y = TOP + CELL * r;
            let _ = writeln!(
                out,
                "<text x=\"4\" y=\"{}\">{label}</text>",
                y + CELL / 2 + 4
            );
            for (h, &v) in row.iter().enumerate() {
                let t = if max > 0.0 { v / max } else { 0.0 };
                let shade = (255.0 * (1.0 - t)).round() as u8;
                let _ = writeln!(
                    out,
                    "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},255)\"><title>{label} head {h}: {}</title></rect>",
                    LEFT + CELL * h,
                    sig9(v)
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

pub fn render_heatmap_svg(ensemble: &RunEnsemble) -> String {
    Heatmap::from_ensemble(ensemble).to_svg()
}

/// Parses the CSV written by [`Heatmap::to_csv`].
pub fn parse_heatmap_csv(text: &str) -> Result<Heatmap> {
    let bad = |line: usize, message: String| Error::Parse {
        path: "<heatmap>".into(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty heatmap".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"layer") {
        return Err(bad(
            1,
            format!("header must start with `layer`, got {header:?}"),
        ));
    }
    for (h, c) in cols[1..].iter().enumerate() {
        if *c != format!("head_{h}") {
            return Err(bad(
                1,
                format!("column {} should be head_{h}, got {c:?}", h + 1),
            ));
        }
    }
    let heads = cols.len() - 1;
    let mut map = Heatmap {
        labels: Vec::new(),
        values: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or_default().to_string();
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| bad(i + 2, format!("{f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != heads {
            return Err(bad(
                i + 2,
                format!("{} values, expected {heads}", row.len()),
            ));
        }
        map.labels.push(label);
        map.values.push(row);
    }
    Ok(map)
}

/// Writes the ensemble-mean heatmap as CSV and, when `svg` is given, as SVG.
pub fn export_heatmap(ensemble: &RunEnsemble, csv: &Path, svg: Option<&Path>) -> Result<()> {
    let map = Heatmap::from_ensemble(ensemble);
    ensure!(!map.values.is_empty(), Contract, "ensemble has no layers");
    std::fs::write(csv, map.to_csv()).map_err(|e| Error::io(csv, e))?;
    if let Some(svg) = svg {
        std::fs::write(svg, map.to_svg()).map_err(|e| Error::io(svg, e))?;
    }
    Ok(())
}
