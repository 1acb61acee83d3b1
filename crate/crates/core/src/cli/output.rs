//! Plot-ready text outputs: the metrics CSV and grid heatmaps.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::MetricsRecord;

pub const METRICS_HEADER: &str = "step,positive_ratio,mean_reward,pos_top100,diversity,n_unique,grid_l1,loss_rtb,loss_aux";

/// Formats like C's `%.9g`: nine significant digits, trailing zeros
/// removed, scientific notation outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    const P: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..P).contains(&exp) {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig9).unwrap_or_default()
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step,
        format_sig9(r.positive_ratio),
        format_sig9(r.mean_reward),
        opt(r.pos_top100),
        format_sig9(r.diversity),
        r.n_unique,
        opt(r.grid_l1),
        opt(r.loss_rtb),
        opt(r.loss_aux),
    )
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

/// `side × side` probabilities indexed `y * side + x`, written top row first
/// (`y = side - 1`) so the file reads like the plot. Values use the shortest
/// representation that round-trips.
pub fn heatmap_csv(side: usize, probs: &[f64], what: &str) -> Result<String> {
    if probs.len() != side * side {
        return Err(Error::Shape(format!("heatmap needs {} values, got {}", side * side, probs.len())));
    }
    let mut out = format!(
        "# {what}; {side}x{side}; row r holds y = {} - r (top row first), column c holds x = c\n",
        side - 1
    );
    for y in (0..side).rev() {
        let row: Vec<String> = (0..side).map(|x| format!("{}", probs[y * side + x])).collect();
        writeln!(out, "{}", row.join(",")).expect("string write");
    }
    Ok(out)
}

pub fn write_heatmap(path: &Path, side: usize, probs: &[f64], what: &str) -> Result<()> {
    std::fs::write(path, heatmap_csv(side, probs, what)?).map_err(|e| Error::io(path, e))
}

/// Parses a heatmap written by [`heatmap_csv`] back to `y * side + x` order.
pub fn parse_heatmap(text: &str) -> Result<(usize, Vec<f64>)> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("heatmap value {v:?}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let side = rows.len();
    if side == 0 || rows.iter().any(|r| r.len() != side) {
        return Err(Error::Shape("heatmap must be square".into()));
    }
    let mut probs = vec![0.0; side * side];
    for (r, row) in rows.iter().enumerate() {
        let y = side - 1 - r;
        probs[y * side..(y + 1) * side].copy_from_slice(row);
    }
    Ok((side, probs))
}
