//! HTML heatmaps of per-token susceptibilities and tabular exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{PerTokenEstimate, TokenKey, TokenSusceptibility};
use crate::patterns::{PatternError, TokenDecoder};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("chi_max must be positive and finite, got {0}")]
    ChiMax(f64),
    #[error("|chi| = {chi} exceeds chi_max = {chi_max}")]
    OutOfRange { chi: f64, chi_max: f64 },
    #[error("non-finite susceptibility {0}")]
    NonFinite(f64),
    #[error("no per-token estimate for component {0}")]
    MissingComponent(String),
    #[error("component {0} supplied more than once")]
    DuplicateComponent(String),
    #[error("component {component} has no value for context {context} position {position}")]
    Coverage { component: String, context: usize, position: usize },
    #[error("per-token estimate is empty")]
    Empty,
    #[error("top_k = {k} must lie in 1..={available}")]
    TopK { k: usize, available: usize },
    #[error("token refers to context {0}, which was not supplied")]
    UnknownContext(usize),
    #[error(transparent)]
    Decode(#[from] PatternError),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

/// Opacity law and green shade of a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    Quadratic,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColorSpec {
    pub r: u8,
    pub g: u8,
    pub b: u8,
    pub alpha: f64,
}

impl ColorSpec {
    pub const CLEAR: ColorSpec = ColorSpec {
        r: 0,
        g: 255,
        b: 0,
        alpha: 0.0,
    };

    pub fn css(&self) -> String {
        format!("rgba({},{},{},{:.4})", self.r, self.g, self.b, self.alpha)
    }
}

/// Green for positive, red for negative, opacity from `|chi| / chi_max`.
/// Zero takes the green branch at opacity 0.
pub fn color_for_susceptibility(chi: f64, chi_max: f64, scheme: Scheme) -> Result<ColorSpec> {
    if !(chi_max.is_finite() && chi_max > 0.0) {
        return Err(ReportError::ChiMax(chi_max));
    }
    if !chi.is_finite() {
        return Err(ReportError::NonFinite(chi));
    }
    if chi.abs() > chi_max {
        return Err(ReportError::OutOfRange { chi, chi_max });
    }
    let t = chi.abs() / chi_max;
    let (green, alpha) = match scheme {
        Scheme::Quadratic => (255, t * t),
        Scheme::Linear => (128, t),
    };
    Ok(if chi >= 0.0 {
        ColorSpec {
            r: 0,
            g: green,
            b: 0,
            alpha,
        }
    } else {
        ColorSpec {
            r: 255,
            g: 0,
            b: 0,
            alpha,
        }
    })
}

fn color_or_clear(chi: f64, chi_max: f64, scheme: Scheme) -> Result<ColorSpec> {
    if chi_max == 0.0 {
        if !chi.is_finite() {
            return Err(ReportError::NonFinite(chi));
        }
        return Ok(ColorSpec::CLEAR);
    }
    color_for_susceptibility(chi, chi_max, scheme)
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            '\n' => out.push('\u{21b5}'),
            _ => out.push(ch),
        }
    }
    out
}

const STYLE: &str = "body{font-family:monospace;line-height:1.9;margin:1em}\
.t{display:inline-block;position:relative;margin:0 1px 2px 0}\
.bars{position:absolute;top:0;left:0;right:0;bottom:0;display:flex;flex-direction:column}\
.b{flex:1 1 0}\
.s{position:relative;white-space:pre;padding:0 1px}\
.f{outline:2px solid #333}\
.ctx{margin-bottom:1.2em}\
.legend{margin-bottom:1em}";

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n{body}</body>\n</html>\n",
        escape_html(title)
    )
}

/// One token with a bar per value, stacked top to bottom.
fn token_span(text: &str, bars: &[ColorSpec], title: &str, featured: Option<f64>) -> String {
    let mut out = String::new();
    match featured {
        Some(v) => {
            let _ = write!(out, "<span class=\"t f\" data-value=\"{v}\" title=\"{}\">", escape_html(title));
        }
        None => {
            let _ = write!(out, "<span class=\"t\" title=\"{}\">", escape_html(title));
        }
    }
    if !bars.is_empty() {
        out.push_str("<span class=\"bars\">");
        for c in bars {
            let _ = write!(out, "<span class=\"b\" style=\"background:{}\"></span>", c.css());
        }
        out.push_str("</span>");
    }
    let _ = write!(out, "<span class=\"s\">{}</span></span>", escape_html(text));
    out
}

fn index(estimate: &PerTokenEstimate) -> BTreeMap<(usize, usize), &TokenSusceptibility> {
    estimate.tokens.iter().map(|t| ((t.key.context, t.key.position), t)).collect()
}

fn chi_max<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<f64> {
    let mut m = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(ReportError::NonFinite(v));
        }
        m = m.max(v.abs());
    }
    Ok(m)
}

/// Every context rendered in full, each predicted token carrying one bar per
/// component in the given order. Opacity is relative to the largest `|chi|`
/// over everything rendered.
pub fn render_context_html(
    contexts: &[Vec<u32>],
    per_token: &[PerTokenEstimate],
    components: &[String],
    scheme: Scheme,
    decoder: &TokenDecoder,
) -> Result<String> {
    let mut maps = Vec::with_capacity(components.len());
    for c in components {
        let mut found = per_token.iter().filter(|e| e.component == *c);
        let e = found.next().ok_or_else(|| ReportError::MissingComponent(c.clone()))?;
        if found.next().is_some() {
            return Err(ReportError::DuplicateComponent(c.clone()));
        }
        maps.push(index(e));
    }
    let mut grid: Vec<Vec<Vec<f64>>> = Vec::with_capacity(contexts.len());
    for (ci, ctx) in contexts.iter().enumerate() {
        let mut rows = Vec::with_capacity(ctx.len());
        for p in 1..ctx.len() {
            let vals = components
                .iter()
                .zip(&maps)
                .map(|(c, m)| {
                    m.get(&(ci, p)).map(|t| t.value).ok_or_else(|| ReportError::Coverage {
                        component: c.clone(),
                        context: ci,
                        position: p,
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(vals);
        }
        grid.push(rows);
    }
    let max = chi_max(grid.iter().flatten().flatten())?;

    let mut body = String::from("<div class=\"legend\">bars top to bottom: ");
    body.push_str(&escape_html(&components.join(", ")));
    let _ = writeln!(body, "; max |chi| = {max}</div>");
    for (ci, ctx) in contexts.iter().enumerate() {
        let _ = write!(body, "<div class=\"ctx\" id=\"ctx{ci}\">");
        for (p, &tok) in ctx.iter().enumerate() {
            let text = decoder.decode(tok)?;
            if p == 0 {
                body.push_str(&token_span(text, &[], &format!("context {ci} position 0"), None));
                continue;
            }
            let vals = &grid[ci][p - 1];
            let bars = vals.iter().map(|&v| color_or_clear(v, max, scheme)).collect::<Result<Vec<_>>>()?;
            let mut title = format!("context {ci} position {p}");
            for (c, v) in components.iter().zip(vals) {
                let _ = write!(title, "; {c} = {v}");
            }
            body.push_str(&token_span(text, &bars, &title, None));
        }
        body.push_str("</div>\n");
    }
    Ok(page("per-token susceptibilities", &body))
}

/// The `top_k` largest values in descending order and the `top_k` smallest in
/// ascending order. Ties keep token order.
pub fn select_extremes(per_token: &PerTokenEstimate, top_k: usize) -> Result<(Vec<&TokenSusceptibility>, Vec<&TokenSusceptibility>)> {
    let n = per_token.tokens.len();
    if n == 0 {
        return Err(ReportError::Empty);
    }
    if top_k == 0 || top_k > n {
        return Err(ReportError::TopK { k: top_k, available: n });
    }
    chi_max(per_token.tokens.iter().map(|t| &t.value))?;
    let mut order: Vec<&TokenSusceptibility> = per_token.tokens.iter().collect();
    order.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.key.cmp(&b.key)));
    let top = order[..top_k].to_vec();
    order.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.key.cmp(&b.key)));
    let bottom = order[..top_k].to_vec();
    Ok((top, bottom))
}

/// Positions shown around a featured token, clamped to the context.
pub fn window_bounds(len: usize, position: usize, window: usize) -> (usize, usize) {
    (position.saturating_sub(window), (position + window).min(len.saturating_sub(1)))
}

/// Windows of `±window` tokens around the `top_k` highest and lowest
/// susceptibility tokens of one component, highest first.
pub fn render_top_contexts(
    per_token: &PerTokenEstimate,
    contexts: &[Vec<u32>],
    decoder: &TokenDecoder,
    scheme: Scheme,
    window: usize,
    top_k: usize,
) -> Result<String> {
    let (top, bottom) = select_extremes(per_token, top_k)?;
    let max = chi_max(per_token.tokens.iter().map(|t| &t.value))?;
    let values = index(per_token);

    let section = |title: &str, picks: &[&TokenSusceptibility]| -> Result<String> {
        let mut out = format!("<h2>{}</h2>\n", escape_html(title));
        for t in picks {
            let TokenKey { context, position, .. } = t.key;
            let ctx = contexts.get(context).ok_or(ReportError::UnknownContext(context))?;
            let (lo, hi) = window_bounds(ctx.len(), position, window);
            let _ = write!(
                out,
                "<div class=\"ctx\"><div>chi = {} (context {context}, position {position})</div>",
                t.value
            );
            for p in lo..=hi {
                let text = decoder.decode(ctx[p])?;
                let v = values.get(&(context, p)).map(|s| s.value);
                let bars = match v {
                    Some(v) => vec![color_or_clear(v, max, scheme)?],
                    None => vec![],
                };
                let title = match v {
                    Some(v) => format!("context {context} position {p}; chi = {v}"),
                    None => format!("context {context} position {p}"),
                };
                let featured = (p == position).then_some(t.value);
                out.push_str(&token_span(text, &bars, &title, featured));
            }
            out.push_str("</div>\n");
        }
        Ok(out)
    };

    let mut body = format!(
        "<div class=\"legend\">component {} on {}; max |chi| = {max}</div>\n",
        escape_html(&per_token.component),
        escape_html(&per_token.dataset)
    );
    body.push_str(&section("highest", &top)?);
    body.push_str(&section("lowest", &bottom)?);
    Ok(page(&format!("{} top tokens", per_token.component), &body))
}

/// One row per (token, component), keyed by dataset, context, position and token.
pub fn per_token_csv(estimates: &[PerTokenEstimate]) -> String {
    let mut out = String::from("dataset,context,position,token,component,chi\n");
    for e in estimates {
        for t in &e.tokens {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.dataset, t.key.context, t.key.position, t.key.token, e.component, t.value
            );
        }
    }
    out
}
