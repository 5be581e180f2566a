use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ill_features::{read_features_csv, FeatureRow, FEATURE_COUNT, FEATURE_LABELS, FEATURE_NAMES};
use crate::{Error, Label, Result};

const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
const WIDTH: f64 = 360.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 36.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHistogram {
    pub feature: usize,
    /// `counts[class][bin]` over min-max normalised values.
    pub counts: [Vec<usize>; 3],
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramOutput {
    pub panels: Vec<PathBuf>,
    pub bins_csv: PathBuf,
    pub histograms: Vec<FeatureHistogram>,
}

/// Per-class counts of each feature after min-max scaling over all rows.
pub fn feature_histograms(rows: &[FeatureRow], bins: usize) -> Result<Vec<FeatureHistogram>> {
    if rows.is_empty() {
        return Err(Error::Data("no feature rows to plot".into()));
    }
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let present = Label::ALL
        .iter()
        .filter(|c| rows.iter().any(|r| r.label == **c))
        .count();
    if present < 2 {
        return Err(Error::Data("histograms need at least two classes".into()));
    }
    let mut out = Vec::with_capacity(FEATURE_COUNT);
    for j in 0..FEATURE_COUNT {
        let values = rows.iter().map(|r| r.features.0[j]);
        let min = values.clone().fold(f64::INFINITY, f64::min);
        let max = values.fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let mut counts = [vec![0; bins], vec![0; bins], vec![0; bins]];
        for r in rows {
            let x = if span > 0.0 {
                (r.features.0[j] - min) / span
            } else {
                0.0
            };
            let bin = ((x * bins as f64) as usize).min(bins - 1);
            counts[r.label.index()][bin] += 1;
        }
        out.push(FeatureHistogram {
            feature: j,
            counts,
            min,
            max,
        });
    }
    Ok(out)
}

fn render_panel(h: &FeatureHistogram) -> String {
    let bins = h.counts[0].len();
    let totals: Vec<usize> = h.counts.iter().map(|c| c.iter().sum()).collect();
    // Densities so classes of different size overlay comparably.
    let density = |c: usize, b: usize| {
        if totals[c] == 0 {
            0.0
        } else {
            h.counts[c][b] as f64 / totals[c] as f64
        }
    };
    let peak = (0..3)
        .flat_map(|c| (0..bins).map(move |b| (c, b)))
        .map(|(c, b)| density(c, b))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / bins as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle" font-size="12">{} ({})</text>"#,
        WIDTH / 2.0,
        FEATURE_NAMES[h.feature],
        FEATURE_LABELS[h.feature]
    );
    for (c, color) in COLORS.iter().enumerate() {
        for b in 0..bins {
            let d = density(c, b);
            if d == 0.0 {
                continue;
            }
            let bh = d / peak * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                MARGIN + b as f64 * bar_w,
                MARGIN + plot_h - bh,
                bar_w,
                bh
            );
        }
    }
    let base = MARGIN + plot_h;
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        MARGIN + plot_w
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{base}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" text-anchor="middle">0</text>"#,
        base + 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">1</text>"#,
        MARGIN + plot_w,
        base + 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">normalised value (raw range {:.4} .. {:.4})</text>"#,
        WIDTH / 2.0,
        base + 26.0,
        h.min,
        h.max
    );
    for (c, label) in Label::ALL.iter().enumerate() {
        let y = MARGIN + 4.0 + 12.0 * c as f64;
        let x = WIDTH - MARGIN - 70.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="8" height="8" fill="{}" fill-opacity="0.6"/><text x="{}" y="{}">{label} ({})</text>"#,
            COLORS[c],
            x + 12.0,
            y + 8.0,
            totals[c]
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads a features CSV and writes one SVG panel per feature plus the
/// binned counts to `out_dir`.
pub fn emit_feature_histograms(features_csv: &Path, out_dir: &Path, bins: usize) -> Result<HistogramOutput> {
    let rows = read_features_csv(features_csv)?;
    let histograms = feature_histograms(&rows, bins)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let write =
        |p: &Path, text: &str| std::fs::write(p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e));

    let mut panels = Vec::with_capacity(FEATURE_COUNT);
    let mut csv = String::from("feature,name,label,bin,lower,upper,count\n");
    for h in &histograms {
        let path = out_dir.join(format!(
            "{}_{}.svg",
            FEATURE_NAMES[h.feature], FEATURE_LABELS[h.feature]
        ));
        write(&path, &render_panel(h))?;
        panels.push(path);
        let n = h.counts[0].len();
        for label in Label::ALL {
            for (b, count) in h.counts[label.index()].iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{},{},{label},{b},{},{},{count}",
                    FEATURE_NAMES[h.feature],
                    FEATURE_LABELS[h.feature],
                    b as f64 / n as f64,
                    (b + 1) as f64 / n as f64
                );
            }
        }
    }
    let bins_csv = out_dir.join("bins.csv");
    write(&bins_csv, &csv)?;
    Ok(HistogramOutput {
        panels,
        bins_csv,
        histograms,
    })
}
