//! Attention export (CSV) and heatmap rendering (SVG).
//!
//! Attention CSV: a header `token,0,1,…,T_x−1`, then one row per emitted
//! token holding its weights over frames.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::dataset::Segment;
use crate::error::{Error, Result};
use crate::model::argmax;

/// Allowed deviation of a row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Token-by-frame attention weights with row labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub tokens: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    pub fn new(tokens: Vec<String>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { tokens, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn from_map(tokens: &[String], map: &AttentionMap) -> Result<Self> {
        if tokens.len() != map.len() {
            return Err(Error::Config(format!(
                "{} token labels for {} attention rows",
                tokens.len(),
                map.len()
            )));
        }
        Self::new(tokens.to_vec(), map.beta.clone())
    }

    pub fn rows(&self) -> usize {
        self.weights.len()
    }

    pub fn frames(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Every row must be a distribution over the same frames.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.weights.len() {
            return Err(Error::Config("token labels and rows differ in number".into()));
        }
        let frames = self.frames();
        for (i, row) in self.weights.iter().enumerate() {
            if row.len() != frames || frames == 0 {
                return Err(Error::InvalidTensor(format!("attention row {i} has {} frames", row.len())));
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidTensor(format!("attention row {i} has a negative or non-finite weight")));
            }
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::InvalidTensor(format!(
                    "attention row {i} ({:?}) is all zero",
                    self.tokens[i]
                )));
            }
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidTensor(format!("attention row {i} sums to {s}, not 1")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["token".to_string()];
        header.extend((0..self.frames()).map(|j| j.to_string()));
        w.write_record(&header)?;
        for (tok, row) in self.tokens.iter().zip(&self.weights) {
            let mut rec = vec![tok.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("token") {
            return Err(Error::Config("attention CSV must start with a `token` column".into()));
        }
        for (j, h) in header.iter().skip(1).enumerate() {
            if h.parse::<usize>() != Ok(j) {
                return Err(Error::Config(format!("attention CSV header column {} should be {j}, found {h:?}", j + 1)));
            }
        }
        let mut tokens = Vec::new();
        let mut weights = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            tokens.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("attention CSV row {}: {e}", i + 1)))?;
            weights.push(row);
        }
        Self::new(tokens, weights)
    }

    /// Replaces each span of rows by its mean; rows outside every span are
    /// kept as they are.
    pub fn aggregate(&self, spans: &[RowSpan]) -> Result<Self> {
        let mut sorted = spans.to_vec();
        sorted.sort_by_key(|s| s.start);
        let mut tokens = Vec::new();
        let mut weights = Vec::new();
        let mut next = 0;
        for s in &sorted {
            if s.start > s.end || s.end >= self.rows() || s.start < next {
                return Err(Error::Config(format!(
                    "span [{}, {}] is out of range or overlaps another span",
                    s.start, s.end
                )));
            }
            for i in next..s.start {
                tokens.push(self.tokens[i].clone());
                weights.push(self.weights[i].clone());
            }
            let n = (s.end - s.start + 1) as f64;
            let mut mean = vec![0.0; self.frames()];
            for row in &self.weights[s.start..=s.end] {
                for (m, w) in mean.iter_mut().zip(row) {
                    *m += w / n;
                }
            }
            tokens.push(s.label.clone().unwrap_or_else(|| self.tokens[s.start..=s.end].join(" ")));
            weights.push(mean);
            next = s.end + 1;
        }
        for i in next..self.rows() {
            tokens.push(self.tokens[i].clone());
            weights.push(self.weights[i].clone());
        }
        Self::new(tokens, weights)
    }
}

/// Inclusive range of rows (emitted tokens) to merge into one phrase row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSpan {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub label: Option<String>,
}

/// Per-token centers: `step,token,center,window_start,window_end`.
pub fn write_centers_csv<W: Write>(tokens: &[String], map: &AttentionMap, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "token", "center", "window_start", "window_end"])?;
    for (t, tok) in tokens.iter().enumerate().take(map.len()) {
        w.write_record([
            t.to_string(),
            tok.clone(),
            map.centers[t].to_string(),
            map.windows[t][0].to_string(),
            map.windows[t][1].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSpec {
    /// A frame index label every `tick_stride` columns.
    pub tick_stride: usize,
    pub cell_width: f64,
    pub cell_height: f64,
    /// Color of the largest weight; zero maps to white, linearly between.
    pub color: [u8; 3],
    /// Ground-truth segments drawn as bands above the grid.
    pub segments: Vec<Segment>,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            tick_stride: 10,
            cell_width: 8.0,
            cell_height: 18.0,
            color: [0x1f, 0x3a, 0x93],
            segments: Vec::new(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the matrix as an SVG grid: one `cell` rect per weight, colored
/// relative to the matrix maximum, and an `argmax` outline per row.
pub fn render_svg(m: &AttentionMatrix, spec: &HeatmapSpec) -> Result<String> {
    m.validate()?;
    let (rows, cols) = (m.rows(), m.frames());
    let (cw, ch) = (spec.cell_width, spec.cell_height);
    let left = 12.0 + 7.0 * m.tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1) as f64;
    let band_h = if spec.segments.is_empty() { 0.0 } else { 16.0 };
    let top = 8.0 + band_h;
    let width = left + cw * cols as f64 + 8.0;
    let height = top + ch * rows as f64 + 24.0;
    let max = m.weights.iter().flatten().copied().fold(0.0, f64::max);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    for seg in &spec.segments {
        let [a, b] = seg.frame_span;
        if b >= cols {
            return Err(Error::Config(format!("segment {:?} ends past frame {}", seg.label, cols - 1)));
        }
        let x = left + cw * a as f64;
        let w = cw * (b - a + 1) as f64;
        writeln!(
            s,
            r##"<rect class="segment" x="{x}" y="4" width="{w}" height="{}" fill="#f2c14e" fill-opacity="0.5" stroke="#b8860b"/>"##,
            band_h - 4.0
        )
        .unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 2.0, band_h - 3.0, escape(&seg.label)).unwrap();
    }
    for (i, (tok, row)) in m.tokens.iter().zip(&m.weights).enumerate() {
        let y = top + ch * i as f64;
        writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y + ch * 0.7, escape(tok)).unwrap();
        for (j, &w) in row.iter().enumerate() {
            let t = if max > 0.0 { w / max } else { 0.0 };
            let [r, g, b] = spec.color.map(|c| (255.0 + (c as f64 - 255.0) * t).round() as u8);
            writeln!(
                s,
                r##"<rect class="cell" x="{}" y="{y}" width="{cw}" height="{ch}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
                left + cw * j as f64
            )
            .unwrap();
        }
    }
    for (i, row) in m.weights.iter().enumerate() {
        let j = argmax(row);
        writeln!(
            s,
            r##"<rect class="argmax" x="{}" y="{}" width="{cw}" height="{ch}" fill="none" stroke="#8a2be2" stroke-width="2"/>"##,
            left + cw * j as f64,
            top + ch * i as f64
        )
        .unwrap();
    }
    let stride = spec.tick_stride.max(1);
    for j in (0..cols).step_by(stride) {
        writeln!(
            s,
            r#"<text class="tick" x="{}" y="{}">{j}</text>"#,
            left + cw * j as f64,
            top + ch * rows as f64 + 14.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> AttentionMatrix {
        AttentionMatrix::new(
            vec!["a".into(), "b".into(), "<eos>".into()],
            vec![
                vec![0.7, 0.3, 0.0, 0.0, 0.0],
                vec![0.0, 0.2, 0.6, 0.2, 0.0],
                vec![0.0, 0.0, 0.0, 0.1, 0.9],
            ],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("token,0,1,2,3,4\n"));
        assert_eq!(AttentionMatrix::read_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn svg_has_one_cell_per_weight_and_one_outline_per_row() {
        let svg = render_svg(&matrix(), &HeatmapSpec::default()).unwrap();
        assert_eq!(svg.matches(r#"class="cell""#).count(), 15);
        assert_eq!(svg.matches(r#"class="argmax""#).count(), 3);
        assert!(svg.contains("&lt;eos&gt;"));
    }

    #[test]
    fn zero_row_rejected() {
        let text = "token,0,1\na,0.5,0.5\nb,0,0\n";
        let err = AttentionMatrix::read_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("all zero"), "{err}");
    }

    #[test]
    fn aggregation_averages_spans() {
        let m = matrix();
        let agg = m
            .aggregate(&[RowSpan {
                start: 0,
                end: 1,
                label: None,
            }])
            .unwrap();
        assert_eq!(agg.tokens, vec!["a b", "<eos>"]);
        assert_eq!(agg.weights[0], vec![0.35, 0.25, 0.3, 0.1, 0.0]);
        assert!(m
            .aggregate(&[RowSpan {
                start: 1,
                end: 3,
                label: None
            }])
            .is_err());
    }

    #[test]
    fn segment_bands_drawn() {
        let spec = HeatmapSpec {
            segments: vec![Segment {
                label: "walk".into(),
                word_span: [0, 0],
                frame_span: [0, 2],
            }],
            ..Default::default()
        };
        let svg = render_svg(&matrix(), &spec).unwrap();
        assert_eq!(svg.matches(r#"class="segment""#).count(), 1);
    }
}
