//! Forest plots: inverse-variance weights, a fixed-effect pooled estimate
//! and a deterministic SVG rendering.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::outcome::{EffectEstimate, Scale};

pub const ROW_HEIGHT: f64 = 40.0;
pub const DEFAULT_WIDTH: u32 = 800;
/// Relative padding added beyond the extreme values on each axis end.
pub const AXIS_PADDING: f64 = 0.05;
/// Ratio axes never extend beyond this range; intervals past it get arrows.
pub const RATIO_AXIS_LIMITS: (f64, f64) = (1e-3, 1e3);
/// Side of the square for a study carrying all the weight.
pub const MAX_SQUARE: f64 = 24.0;

const TOP: f64 = 30.0;
const LABEL_X: f64 = 10.0;
const PLOT_LEFT: f64 = 260.0;
const RIGHT_COLUMN: f64 = 140.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub label: String,
    pub estimate: EffectEstimate,
    pub weight: f64,
}

impl PlotRow {
    pub fn new(label: impl Into<String>, estimate: EffectEstimate) -> Self {
        Self {
            label: label.into(),
            estimate,
            weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub rows: Vec<PlotRow>,
    pub scale: Scale,
    pub null_line: f64,
    pub axis_min: f64,
    pub axis_max: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub pooled: Option<EffectEstimate>,
}

/// Inverse-variance weights on the analysis scale, summing to 1 over the
/// estimable rows. Rows that are not estimable get weight 0. Rows with a
/// zero standard error have unbounded precision and share all the weight.
pub fn normalize_weights(rows: &mut [PlotRow]) {
    let precisions = precisions(rows);
    let total: f64 = precisions.iter().sum();
    for (row, p) in rows.iter_mut().zip(precisions) {
        row.weight = if total > 0.0 { p / total } else { 0.0 };
    }
}

/// Relative precision per row: `1/SE^2`, or an indicator when some row has
/// zero standard error.
fn precisions(rows: &[PlotRow]) -> Vec<f64> {
    let usable = |r: &PlotRow| r.estimate.estimable && r.estimate.std_error.is_finite();
    let exact = rows
        .iter()
        .any(|r| usable(r) && r.estimate.std_error == 0.0);
    rows.iter()
        .map(|r| match (usable(r), exact) {
            (false, _) => 0.0,
            (true, true) => f64::from(u8::from(r.estimate.std_error == 0.0)),
            (true, false) => 1.0 / r.estimate.std_error.powi(2),
        })
        .collect()
}

fn common_scale(rows: &[PlotRow]) -> Result<Scale> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Validation("a forest plot needs at least one row".into()))?;
    let scale = first.estimate.scale;
    if let Some(other) = rows.iter().find(|r| r.estimate.scale != scale) {
        return Err(Error::Validation(format!(
            "row `{}` is on a {:?} scale, expected {:?}",
            other.label, other.estimate.scale, scale
        )));
    }
    Ok(scale)
}

/// Inverse-variance fixed-effect pooling, on the log scale for ratios.
pub fn pool_fixed_effect(rows: &[PlotRow]) -> Result<EffectEstimate> {
    let scale = common_scale(rows)?;
    let weights = precisions(rows);
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Ok(EffectEstimate::not_estimable(scale));
    }
    let centre = rows
        .iter()
        .zip(&weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(r, w)| w * scale.to_analysis(r.estimate.point))
        .sum::<f64>()
        / total;
    let exact = rows
        .iter()
        .any(|r| r.estimate.estimable && r.estimate.std_error == 0.0);
    let std_error = if exact { 0.0 } else { total.sqrt().recip() };
    Ok(EffectEstimate::from_analysis(scale, centre, std_error))
}

impl PlotSpec {
    /// Spec with normalised weights, optional pooled diamond, an axis that
    /// covers every finite bound (ratio axes capped at
    /// [`RATIO_AXIS_LIMITS`]) and the default canvas.
    pub fn build(mut rows: Vec<PlotRow>, with_pooled: bool) -> Result<Self> {
        let scale = common_scale(&rows)?;
        normalize_weights(&mut rows);
        let pooled = if with_pooled {
            Some(pool_fixed_effect(&rows)?)
        } else {
            None
        };
        let null_line = scale.null_value();
        let mut values = vec![null_line];
        for est in rows.iter().map(|r| &r.estimate).chain(pooled.iter()) {
            if est.estimable {
                values.extend([est.point, est.ci_low, est.ci_high]);
            }
        }
        let (axis_min, axis_max) = auto_axis(scale, &values, &rows, pooled.as_ref());
        let n_lines = rows.len() + usize::from(pooled.is_some());
        Ok(Self {
            height_px: (ROW_HEIGHT as usize * n_lines + 80) as u32,
            rows,
            scale,
            null_line,
            axis_min,
            axis_max,
            width_px: DEFAULT_WIDTH,
            pooled,
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.rows.is_empty() {
            return bad("a forest plot needs at least one row".into());
        }
        if let Some(r) = self.rows.iter().find(|r| r.estimate.scale != self.scale) {
            return bad(format!("row `{}` does not match the plot scale", r.label));
        }
        if let Some(p) = &self.pooled {
            if p.scale != self.scale {
                return bad("pooled estimate does not match the plot scale".into());
            }
        }
        if self.null_line != self.scale.null_value() {
            return bad(format!(
                "null line {} does not match the scale",
                self.null_line
            ));
        }
        if !(self.axis_min.is_finite()
            && self.axis_max.is_finite()
            && self.axis_min < self.axis_max)
        {
            return bad(format!(
                "bad axis range [{}, {}]",
                self.axis_min, self.axis_max
            ));
        }
        if self.scale == Scale::Ratio && self.axis_min <= 0.0 {
            return bad("ratio axis must be positive".into());
        }
        let inside = |v: f64| v >= self.axis_min && v <= self.axis_max;
        if !inside(self.null_line) {
            return bad("axis does not include the null line".into());
        }
        for r in &self.rows {
            if !(r.weight.is_finite() && (0.0..=1.0).contains(&r.weight)) {
                return bad(format!("row `{}` has weight {}", r.label, r.weight));
            }
            if r.estimate.estimable && !inside(r.estimate.point) {
                return bad(format!("row `{}` point lies outside the axis", r.label));
            }
        }
        if self.width_px <= (PLOT_LEFT + RIGHT_COLUMN) as u32 || self.height_px == 0 {
            return bad("canvas too small".into());
        }
        Ok(())
    }

    /// Horizontal pixel position of a value, affine in the analysis scale.
    /// Not clamped to the axis.
    pub fn x_position(&self, value: f64) -> f64 {
        let left = PLOT_LEFT;
        let right = self.plot_right();
        let lo = self.scale.to_analysis(self.axis_min);
        let hi = self.scale.to_analysis(self.axis_max);
        left + (self.scale.to_analysis(value) - lo) / (hi - lo) * (right - left)
    }

    fn plot_right(&self) -> f64 {
        f64::from(self.width_px) - RIGHT_COLUMN
    }

    fn row_y(&self, index: usize) -> f64 {
        TOP + ROW_HEIGHT * index as f64 + ROW_HEIGHT / 2.0
    }
}

fn auto_axis(
    scale: Scale,
    values: &[f64],
    rows: &[PlotRow],
    pooled: Option<&EffectEstimate>,
) -> (f64, f64) {
    let finite: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| v.is_finite() && (scale == Scale::Difference || *v > 0.0))
        .map(|v| scale.to_analysis(v))
        .collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pad = if span > 0.0 { span * AXIS_PADDING } else { 1.0 };
    let (mut lo, mut hi) = (lo - pad, hi + pad);
    if scale == Scale::Ratio {
        // Cap the range, but never cut off a point estimate.
        let points = rows
            .iter()
            .map(|r| &r.estimate)
            .chain(pooled)
            .filter(|e| e.estimable)
            .map(|e| e.point.ln());
        let (cap_lo, cap_hi) = (RATIO_AXIS_LIMITS.0.ln(), RATIO_AXIS_LIMITS.1.ln());
        let (mut p_lo, mut p_hi) = (cap_lo, cap_hi);
        for p in points {
            p_lo = p_lo.min(p - pad);
            p_hi = p_hi.max(p + pad);
        }
        lo = lo.max(p_lo);
        hi = hi.min(p_hi);
    }
    (scale.from_analysis(lo), scale.from_analysis(hi))
}

/// Two decimals, without a negative zero.
fn fmt2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Tick values with their labels.
pub fn axis_ticks(spec: &PlotSpec) -> Vec<(f64, String)> {
    match spec.scale {
        Scale::Ratio => ratio_ticks(spec.axis_min, spec.axis_max),
        Scale::Difference => linear_ticks(spec.axis_min, spec.axis_max),
    }
}

fn ratio_ticks(min: f64, max: f64) -> Vec<(f64, String)> {
    let decade = |v: f64| v.log10().floor() as i32;
    let collect = |mantissas: &[u32]| {
        let mut ticks = Vec::new();
        for k in decade(min)..=decade(max) {
            for &m in mantissas {
                let label = decimal_label(m, k);
                let v: f64 = label.parse().expect("tick label parses");
                if v >= min && v <= max {
                    ticks.push((v, label));
                }
            }
        }
        ticks
    };
    let ticks = collect(&[1, 2, 5]);
    if ticks.len() > 9 {
        collect(&[1])
    } else {
        ticks
    }
}

/// `m * 10^k` written out in plain decimal notation.
fn decimal_label(m: u32, k: i32) -> String {
    if k >= 0 {
        format!("{m}{}", "0".repeat(k as usize))
    } else {
        format!("0.{}{m}", "0".repeat((-k - 1) as usize))
    }
}

fn linear_ticks(min: f64, max: f64) -> Vec<(f64, String)> {
    let raw = (max - min) / 6.0;
    let magnitude = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * magnitude)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * magnitude);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (min / step).ceil() as i64;
    let last = (max / step).floor() as i64;
    (first..=last)
        .map(|i| {
            let v = i as f64 * step;
            let label = format!("{v:.decimals$}");
            let label = if label
                .trim_start_matches('-')
                .chars()
                .all(|c| c == '0' || c == '.')
            {
                label.trim_start_matches('-').to_string()
            } else {
                label
            };
            (v, label)
        })
        .collect()
}

/// Render the plot as an SVG 1.1 document. Coordinates are rounded to two
/// decimals so identical specs give identical bytes.
pub fn render_svg(spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let w = spec.width_px;
    let h = spec.height_px;
    let left = PLOT_LEFT;
    let right = spec.plot_right();
    let n_lines = spec.rows.len() + usize::from(spec.pooled.is_some());
    let axis_y = TOP + ROW_HEIGHT * n_lines as f64 + 5.0;
    let clamp = |v: f64| v.clamp(spec.axis_min, spec.axis_max);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );

    let null_x = fmt2(spec.x_position(spec.null_line));
    let _ = writeln!(
        svg,
        r#"<line class="null-line" x1="{null_x}" y1="{}" x2="{null_x}" y2="{}" stroke="black" stroke-width="1"/>"#,
        fmt2(TOP),
        fmt2(axis_y)
    );

    for (i, row) in spec.rows.iter().enumerate() {
        let y = spec.row_y(i);
        let est = &row.estimate;
        let _ = writeln!(svg, r#"<g class="study">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="start">{}</text>"#,
            fmt2(LABEL_X),
            fmt2(y + 4.0),
            escape(&row.label)
        );
        if est.estimable {
            let x_lo = spec.x_position(clamp(est.ci_low));
            let x_hi = spec.x_position(clamp(est.ci_high));
            let _ = writeln!(
                svg,
                r#"<line class="ci" x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1.5"/>"#,
                fmt2(x_lo),
                fmt2(y),
                fmt2(x_hi),
                fmt2(y)
            );
            if est.ci_low < spec.axis_min {
                write_arrow(&mut svg, x_lo, y, -1.0);
            }
            if est.ci_high > spec.axis_max {
                write_arrow(&mut svg, x_hi, y, 1.0);
            }
            if row.weight > 0.0 {
                let side = MAX_SQUARE * row.weight.sqrt();
                let x = spec.x_position(est.point);
                let _ = writeln!(
                    svg,
                    r#"<rect class="weight" x="{}" y="{}" width="{}" height="{}" fill="black"/>"#,
                    fmt2(x - side / 2.0),
                    fmt2(y - side / 2.0),
                    fmt2(side),
                    fmt2(side)
                );
            }
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="start">{} [{}, {}]</text>"#,
                fmt2(right + 10.0),
                fmt2(y + 4.0),
                fmt2(est.point),
                fmt2(est.ci_low),
                fmt2(est.ci_high)
            );
        } else {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="start">Not estimable</text>"#,
                fmt2(right + 10.0),
                fmt2(y + 4.0)
            );
        }
        let _ = writeln!(svg, "</g>");
    }

    if let Some(pooled) = &spec.pooled {
        let y = spec.row_y(spec.rows.len());
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="start" font-weight="bold">Total (fixed effect)</text>"#,
            fmt2(LABEL_X),
            fmt2(y + 4.0)
        );
        if pooled.estimable {
            let xl = spec.x_position(clamp(pooled.ci_low));
            let xp = spec.x_position(clamp(pooled.point));
            let xh = spec.x_position(clamp(pooled.ci_high));
            let _ = writeln!(
                svg,
                r#"<polygon class="pooled" points="{},{} {},{} {},{} {},{}" fill="black"/>"#,
                fmt2(xl),
                fmt2(y),
                fmt2(xp),
                fmt2(y - 8.0),
                fmt2(xh),
                fmt2(y),
                fmt2(xp),
                fmt2(y + 8.0)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="start" font-weight="bold">{} [{}, {}]</text>"#,
                fmt2(right + 10.0),
                fmt2(y + 4.0),
                fmt2(pooled.point),
                fmt2(pooled.ci_low),
                fmt2(pooled.ci_high)
            );
        } else {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="start">Not estimable</text>"#,
                fmt2(right + 10.0),
                fmt2(y + 4.0)
            );
        }
    }

    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
        fmt2(left),
        fmt2(axis_y),
        fmt2(right),
        fmt2(axis_y)
    );
    for (value, label) in axis_ticks(spec) {
        let x = fmt2(spec.x_position(value));
        let _ = writeln!(
            svg,
            r#"<line class="tick" x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black" stroke-width="1"/>"#,
            fmt2(axis_y),
            fmt2(axis_y + 4.0)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{label}</text>"#,
            fmt2(axis_y + 16.0)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="10">Favours comparator</text>"#,
        null_x,
        fmt2(axis_y + 32.0)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="start" font-size="10">Favours intervention</text>"#,
        null_x,
        fmt2(axis_y + 32.0)
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn write_arrow(svg: &mut String, x: f64, y: f64, direction: f64) {
    let tip = x + 6.0 * direction;
    let _ = writeln!(
        svg,
        r#"<polygon class="arrow" points="{},{} {},{} {},{}" fill="black"/>"#,
        fmt2(tip),
        fmt2(y),
        fmt2(x),
        fmt2(y - 4.0),
        fmt2(x),
        fmt2(y + 4.0)
    );
}

#[derive(Serialize)]
struct SidecarRow<'a> {
    label: &'a str,
    point: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    weight: f64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    scale: Scale,
    rows: Vec<SidecarRow<'a>>,
    pooled: Option<SidecarRow<'a>>,
}

fn sidecar_row<'a>(label: &'a str, est: &EffectEstimate, weight: f64) -> SidecarRow<'a> {
    let keep = |v: f64| est.estimable.then_some(v);
    SidecarRow {
        label,
        point: keep(est.point),
        ci_low: keep(est.ci_low),
        ci_high: keep(est.ci_high),
        weight,
    }
}

/// The numbers behind the plot, unrounded.
pub fn sidecar_json(spec: &PlotSpec) -> String {
    let sidecar = Sidecar {
        scale: spec.scale,
        rows: spec
            .rows
            .iter()
            .map(|r| sidecar_row(&r.label, &r.estimate, r.weight))
            .collect(),
        pooled: spec
            .pooled
            .as_ref()
            .map(|p| sidecar_row("Total (fixed effect)", p, 1.0)),
    };
    serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")
}
