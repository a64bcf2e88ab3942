//! Run reports (JSON), metric tables and curves (CSV), and line plots
//! (SVG). Reports are deterministic functions of `(config, seed)`: no
//! timestamps, sorted keys, fixed float formatting in plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use flowlab_core::metrics::Histogram;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistogramOut {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl From<&Histogram> for HistogramOut {
    fn from(h: &Histogram) -> Self {
        HistogramOut { lo: h.lo, hi: h.hi, counts: h.counts.clone() }
    }
}

/// Named scalar metrics and histograms for one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub scalars: BTreeMap<String, f64>,
    pub histograms: BTreeMap<String, HistogramOut>,
    /// Verbatim run configuration text.
    pub config_echo: String,
}

impl MetricReport {
    pub fn new(label: &str, seeds: Vec<u64>, config_echo: &str) -> Self {
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in label.bytes().chain(config_echo.bytes()) {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        for s in &seeds {
            hash ^= s;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        MetricReport {
            run_id: format!("{label}-{hash:016x}"),
            seeds,
            scalars: BTreeMap::new(),
            histograms: BTreeMap::new(),
            config_echo: config_echo.to_string(),
        }
    }

    pub fn put(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            bail!("metric '{name}' is not finite: {value}");
        }
        self.scalars.insert(name.to_string(), value);
        Ok(())
    }

    pub fn put_histogram(&mut self, name: &str, histogram: &Histogram) {
        self.histograms.insert(name.to_string(), histogram.into());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).with_context(|| format!("writing report {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `(x, y)` rows under a header.
pub fn write_curve_csv(path: &Path, header: (&str, &str), rows: &[(f64, f64)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing csv {}", path.display()))?;
    w.write_record([header.0, header.1])?;
    for (x, y) in rows {
        w.write_record([format!("{x}"), format!("{y}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a general table with a header row.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing csv {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One named series for [`svg_line_chart`].
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal deterministic SVG line chart; identical inputs produce identical
/// bytes (fixed precision, no randomness, no timestamps).
pub fn svg_line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let (width, height, margin) = (640.0, 400.0, 60.0);
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (x, y) in &s.points {
            xs.push(*x);
            ys.push(*y);
        }
    }
    if xs.is_empty() {
        bail!("cannot plot empty series");
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let sx = |x: f64| margin + (x - x_min) / (x_max - x_min).max(1e-12) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - y_min) / (y_max - y_min).max(1e-12) * (height - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b:.1}\" stroke=\"black\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin,
        t = margin,
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        width / 2.0,
        height - 16.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        height / 2.0,
        height / 2.0,
        xml_escape(y_label)
    ));
    for (tick, value) in [(x_min, x_min), (x_max, x_max)] {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n",
            sx(tick),
            height - margin + 16.0,
            value
        ));
    }
    for (tick, value) in [(y_min, y_min), (y_max, y_max)] {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n",
            margin - 6.0,
            sy(tick) + 4.0,
            value
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let pts: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            width - margin + 6.0,
            margin + 14.0 * i as f64,
            xml_escape(s.label)
        ));
    }
    svg.push_str("</svg>\n");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, svg).with_context(|| format!("writing svg {}", path.display()))?;
    Ok(())
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
