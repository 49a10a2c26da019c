//! Report generation: the colored-token HTML view and the CSV schemas used
//! by the CLI.
//!
//! CSV schemas (headers included, floats written with 6 decimal places):
//!
//! - sweep:     `tau,size,tv,nucleus`
//! - density:   `index,rho_hat,n_tokens`
//! - tokens:    `position,token_id,token_text,rho_hat,entropy,is_generated`
//! - words:     `word,word_index,max_rho,frequency_count,first_token_position,last_token_position`
//! - baseline:  `input,tau,size,tv_magnitude,tv_random`
//! - necessity: `input,tau,ablated,tv_ablate_trace,tv_ablate_random`

use std::io::{Read, Write};

use crate::density::{SweepPoint, TokenDensityRecord, WordRecord};
use crate::error::{Error, Result};

/// A color scale given by evenly spaced RGB stops, interpolated linearly.
#[derive(Debug, Clone)]
pub struct Palette {
    stops: Vec<[u8; 3]>,
}

impl Default for Palette {
    /// Cold-to-warm five-stop scale (dark violet through teal and green to
    /// yellow).
    fn default() -> Self {
        Self {
            stops: vec![
                [68, 1, 84],
                [59, 82, 139],
                [33, 145, 140],
                [94, 201, 98],
                [253, 231, 37],
            ],
        }
    }
}

impl Palette {
    pub fn new(stops: Vec<[u8; 3]>) -> Self {
        assert!(stops.len() >= 2, "a palette needs at least two stops");
        Self { stops }
    }

    /// Color at `t` in [0, 1].
    pub fn color(&self, t: f64) -> [u8; 3] {
        let t = t.clamp(0.0, 1.0);
        let segments = (self.stops.len() - 1) as f64;
        let scaled = t * segments;
        let low = (scaled.floor() as usize).min(self.stops.len() - 2);
        let frac = scaled - low as f64;
        let a = self.stops[low];
        let b = self.stops[low + 1];
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * frac).round() as u8;
        }
        out
    }

    fn css_gradient(&self) -> String {
        let parts: Vec<String> = self
            .stops
            .iter()
            .map(|s| format!("rgb({},{},{})", s[0], s[1], s[2]))
            .collect();
        format!("linear-gradient(to right, {})", parts.join(", "))
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            '\n' => out.push_str("&#10;"),
            _ => out.push(c),
        }
    }
    out
}

/// Render token records as a static, self-contained HTML page. Generated
/// tokens are colored by density, min/max-normalized over the document (all
/// equal densities land mid-palette); prompt context renders uncolored. The
/// numeric density appears as hover text.
pub fn render_html_report(records: &[TokenDensityRecord], palette: &Palette) -> String {
    assert!(!records.is_empty(), "nothing to render");
    let generated: Vec<&TokenDensityRecord> = records.iter().filter(|r| r.is_generated).collect();
    let (min, max) = generated.iter().fold((f64::MAX, f64::MIN), |(lo, hi), r| {
        (lo.min(r.rho_hat), hi.max(r.rho_hat))
    });
    let normalize = |rho: f64| {
        if generated.is_empty() || max == min {
            0.5
        } else {
            (rho - min) / (max - min)
        }
    };

    let mut spans = String::new();
    for r in records {
        let text = escape_html(&r.token_text);
        if r.is_generated {
            let [red, green, blue] = palette.color(normalize(r.rho_hat));
            // Keep the label readable on dark palette ends.
            let luma = 0.299 * red as f64 + 0.587 * green as f64 + 0.114 * blue as f64;
            let fg = if luma < 140.0 { "#ffffff" } else { "#111111" };
            spans.push_str(&format!(
                "<span class=\"tok\" style=\"background-color:rgb({red},{green},{blue});color:{fg}\" \
                 title=\"rho={:.4} entropy={:.4} pos={}\">{text}</span>",
                r.rho_hat, r.entropy, r.position
            ));
        } else {
            spans.push_str(&format!("<span class=\"ctx\">{text}</span>"));
        }
    }

    let legend_lo = if generated.is_empty() { 0.0 } else { min };
    let legend_hi = if generated.is_empty() { 0.0 } else { max };
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"/>\n\
         <title>Computation density profile</title>\n<style>\n\
         body {{ font-family: Georgia, serif; max-width: 46em; margin: 2em auto; line-height: 1.8; }}\n\
         .tok {{ padding: 0.08em 0.05em; border-radius: 0.15em; }}\n\
         .ctx {{ color: #444444; }}\n\
         .bar {{ display: inline-block; width: 12em; height: 0.8em; background: {gradient}; \
         vertical-align: middle; border: 1px solid #999999; }}\n\
         .legend {{ color: #333333; font-size: 0.9em; }}\n\
         </style>\n</head>\n<body>\n<h1>Computation density profile</h1>\n\
         <p class=\"legend\">density {lo:.4} <span class=\"bar\"></span> {hi:.4} \
         (hover a token for its exact value)</p>\n\
         <p class=\"text\">{spans}</p>\n</body>\n</html>\n",
        gradient = palette.css_gradient(),
        lo = legend_lo,
        hi = legend_hi,
        spans = spans,
    )
}

/// `tau,size,tv,nucleus` rows, one per sweep point.
pub fn write_sweep_csv(out: impl Write, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "size", "tv", "nucleus"])?;
    for p in points {
        w.write_record([
            format_float(p.tau),
            format!("{:.6}", p.size),
            format!("{:.6}", p.tv_error),
            p.nucleus.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One density row per corpus input.
#[derive(Debug, Clone)]
pub struct DensityRow {
    pub index: usize,
    pub rho_hat: f64,
    pub n_tokens: usize,
}

pub fn write_density_csv(out: impl Write, rows: &[DensityRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "rho_hat", "n_tokens"])?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            format!("{:.6}", r.rho_hat),
            r.n_tokens.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a density CSV back as (index, rho_hat) pairs.
pub fn read_density_csv(input: impl Read) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::ParseError {
            line: i + 2,
            msg: e.to_string(),
        })?;
        let parse = |field: usize, name: &str| -> Result<String> {
            record
                .get(field)
                .map(str::to_string)
                .ok_or_else(|| Error::ParseError {
                    line: i + 2,
                    msg: format!("missing column `{name}`"),
                })
        };
        let index: usize = parse(0, "index")?.parse().map_err(|e| Error::ParseError {
            line: i + 2,
            msg: format!("bad index: {e}"),
        })?;
        let rho: f64 = parse(1, "rho_hat")?.parse().map_err(|e| Error::ParseError {
            line: i + 2,
            msg: format!("bad rho_hat: {e}"),
        })?;
        out.push((index, rho));
    }
    Ok(out)
}

pub fn write_token_records_csv(out: impl Write, records: &[TokenDensityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "position",
        "token_id",
        "token_text",
        "rho_hat",
        "entropy",
        "is_generated",
    ])?;
    for r in records {
        w.write_record([
            r.position.to_string(),
            r.token_id.to_string(),
            r.token_text.clone(),
            format!("{:.6}", r.rho_hat),
            format!("{:.6}", r.entropy),
            r.is_generated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_records_csv(input: impl Read) -> Result<Vec<TokenDensityRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::ParseError {
            line: i + 2,
            msg: e.to_string(),
        })?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let err = |msg: String| Error::ParseError { line: i + 2, msg };
        out.push(TokenDensityRecord {
            position: field(0).parse().map_err(|e| err(format!("position: {e}")))?,
            token_id: field(1).parse().map_err(|e| err(format!("token_id: {e}")))?,
            token_text: field(2).to_string(),
            rho_hat: field(3).parse().map_err(|e| err(format!("rho_hat: {e}")))?,
            entropy: field(4).parse().map_err(|e| err(format!("entropy: {e}")))?,
            is_generated: field(5)
                .parse()
                .map_err(|e| err(format!("is_generated: {e}")))?,
        });
    }
    Ok(out)
}

pub fn write_word_records_csv(out: impl Write, words: &[WordRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "word",
        "word_index",
        "max_rho",
        "frequency_count",
        "first_token_position",
        "last_token_position",
    ])?;
    for r in words {
        w.write_record([
            r.word.clone(),
            r.word_index.to_string(),
            format!("{:.6}", r.max_rho),
            r.frequency_count.to_string(),
            r.first_token_position.to_string(),
            r.last_token_position.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One magnitude-vs-random comparison at a single threshold.
#[derive(Debug, Clone)]
pub struct BaselineRow {
    pub input: usize,
    pub tau: f64,
    pub size: f64,
    pub tv_magnitude: f64,
    pub tv_random: f64,
}

pub fn write_baseline_csv(out: impl Write, rows: &[BaselineRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["input", "tau", "size", "tv_magnitude", "tv_random"])?;
    for r in rows {
        w.write_record([
            r.input.to_string(),
            format_float(r.tau),
            format!("{:.6}", r.size),
            format!("{:.6}", r.tv_magnitude),
            format!("{:.6}", r.tv_random),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One necessity comparison: ablating the trace's non-residual edges versus
/// ablating a random size-matched set.
#[derive(Debug, Clone)]
pub struct NecessityRow {
    pub input: usize,
    pub tau: f64,
    pub ablated: usize,
    pub tv_ablate_trace: f64,
    pub tv_ablate_random: f64,
}

pub fn write_necessity_csv(out: impl Write, rows: &[NecessityRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["input", "tau", "ablated", "tv_ablate_trace", "tv_ablate_random"])?;
    for r in rows {
        w.write_record([
            r.input.to_string(),
            format_float(r.tau),
            r.ablated.to_string(),
            format!("{:.6}", r.tv_ablate_trace),
            format!("{:.6}", r.tv_ablate_random),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// Thresholds span 1e-7..1, so scientific notation keeps them exact while
// plain formatting covers the human-scale values.
fn format_float(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}
