//! File emitters for maps and reports: binary PGM heatmaps, CSV tables and
//! a small SVG bar chart. All output is deterministic byte-for-byte.

use crate::attribution::ImportanceMap;
use crate::error::Result;
use crate::evaluation::{MapEvalStats, PosBin};
use std::path::Path;

/// 8-bit binary PGM (P5) after affine min-max scaling to [0, 255]; a
/// constant map renders as all black.
pub fn pgm_bytes(map: &ImportanceMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    let min = map.scores.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    out.extend(map.scores.iter().map(|&v| {
        if span == 0.0 {
            0u8
        } else {
            (((v - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    }));
    out
}

pub fn write_pgm(map: &ImportanceMap, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_bytes(map))?;
    Ok(())
}

/// `method,mean,se,n,degenerate_count` rows.
pub fn correlation_csv(stats: &[MapEvalStats]) -> String {
    let mut out = String::from("method,mean,se,n,degenerate_count\n");
    for s in stats {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            s.method, s.mean, s.se, s.n, s.degenerate_count
        ));
    }
    out
}

/// `tag,probability,count` rows; count is the tag's token count.
pub fn pos_histogram_csv(bins: &[PosBin]) -> String {
    let mut out = String::from("tag,probability,count\n");
    for b in bins {
        out.push_str(&format!("{:?},{:.6},{}\n", b.tag, b.probability, b.count));
    }
    out
}

/// Bar chart of P(most important | tag).
pub fn pos_histogram_svg(bins: &[PosBin]) -> String {
    let bar_w = 64usize;
    let gap = 18usize;
    let chart_h = 200usize;
    let margin = 40usize;
    let width = margin * 2 + bins.len() * (bar_w + gap);
    let height = chart_h + 70;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    svg.push_str(&format!(
        "  <line x1=\"{margin}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#333\"/>\n",
        chart_h + 20,
        width - margin
    ));
    for (i, b) in bins.iter().enumerate() {
        let h = (b.probability * chart_h as f64).round() as usize;
        let x = margin + i * (bar_w + gap);
        let y = chart_h + 20 - h;
        svg.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{h}\" fill=\"#4878a8\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{:?}</text>\n",
            x + bar_w / 2,
            chart_h + 38,
            b.tag
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{:.3}</text>\n",
            x + bar_w / 2,
            y.saturating_sub(4).max(12),
            b.probability
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
