//! Static SVG figures rendered from reports.
//!
//! Rendering is a pure function of its input: coordinates are printed with
//! a fixed number of decimals and no timestamps or ids are emitted, so the
//! same report always yields the same bytes.

use std::fmt::Write as _;

use crate::evaluation::{Report, SweepCell};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const SELECTOR_COLOUR: &str = "#1f77b4";
const SBS_COLOUR: &str = "#d62728";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut s = Self {
            body: String::new(),
            width,
            height,
        };
        s.text(width / 2.0, 24.0, title, "middle", 16.0);
        s
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}" fill-opacity="{opacity:.2}"/>"#,
            w.max(0.0),
            h.max(0.0)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"/>"#,
            pts.join(" ")
        );
    }

    fn text(&mut self, x: f64, y: f64, s: &str, anchor: &str, size: f64) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="{size:.0}">{}</text>"#,
            escape(s)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Plot area `[x0, x1] x [y0, y1]` in pixels (y grows downwards).
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn standard() -> Self {
        Self {
            x0: LEFT,
            x1: WIDTH - RIGHT,
            y0: TOP,
            y1: HEIGHT - BOTTOM,
        }
    }

    fn axes(&self, svg: &mut Svg, xlabel: &str, ylabel: &str) {
        svg.line(self.x0, self.y1, self.x1, self.y1, "black");
        svg.line(self.x0, self.y0, self.x0, self.y1, "black");
        svg.text((self.x0 + self.x1) / 2.0, self.y1 + 40.0, xlabel, "middle", 12.0);
        svg.text(14.0, (self.y0 + self.y1) / 2.0, ylabel, "start", 12.0);
    }

    fn y_ticks(&self, svg: &mut Svg, max: f64, format: impl Fn(f64) -> String) {
        for i in 0..=4 {
            let v = max * i as f64 / 4.0;
            let y = self.y1 - (self.y1 - self.y0) * i as f64 / 4.0;
            svg.line(self.x0 - 4.0, y, self.x0, y, "black");
            svg.text(self.x0 - 6.0, y + 4.0, &format(v), "end", 10.0);
        }
    }

    /// Decade ticks for a log10 x axis spanning `[lo, hi]`.
    fn log_x_ticks(&self, svg: &mut Svg, lo: f64, hi: f64) {
        for e in lo.floor() as i32..=hi.ceil() as i32 {
            let e = e as f64;
            if e < lo - 1e-12 || e > hi + 1e-12 {
                continue;
            }
            let x = self.x0 + (self.x1 - self.x0) * (e - lo) / (hi - lo);
            svg.line(x, self.y1, x, self.y1 + 4.0, "black");
            svg.text(x, self.y1 + 16.0, &format!("1e{}", e as i32), "middle", 10.0);
        }
    }
}

fn legend(svg: &mut Svg, x: f64, y: f64, entries: &[(&str, &str)]) {
    for (i, (label, colour)) in entries.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        svg.rect(x, yy - 9.0, 12.0, 10.0, colour, 0.8);
        svg.text(x + 18.0, yy, label, "start", 11.0);
    }
}

fn log_extent(values: &[f64]) -> (f64, f64) {
    let hi = values.iter().fold(1.0_f64, |m, &v| m.max(v)).log10();
    (0.0, if hi > 0.0 { hi } else { 1.0 })
}

/// Counts of `values` in `bins` equal-width bins of `log10(v)` over `[lo, hi]`.
pub fn log_histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let t = ((v.log10() - lo) / (hi - lo) * bins as f64).floor();
        let b = (t.max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Step points `(t, P(X > t))` of the empirical survival function at every
/// distinct value of `values`, starting from `t = 1`.
pub fn survival_curve(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out = vec![(1.0, sorted.iter().filter(|&&v| v > 1.0).count() as f64 / n)];
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i];
        while i < sorted.len() && sorted[i] == t {
            i += 1;
        }
        if t > 1.0 {
            out.push((t, (sorted.len() - i) as f64 / n));
        }
    }
    out
}

fn relert_columns(report: &Report) -> (Vec<f64>, Vec<f64>) {
    (
        report.records.iter().map(|r| r.selector_relert).collect(),
        report.records.iter().map(|r| r.sbs_relert).collect(),
    )
}

/// Overlaid histograms of selector and SBS relERT on a log10 axis.
pub fn relert_histogram(report: &Report) -> String {
    const BINS: usize = 30;
    let (sel, sbs) = relert_columns(report);
    let all: Vec<f64> = sel.iter().chain(&sbs).copied().collect();
    let (lo, hi) = log_extent(&all);
    let hs = log_histogram(&sel, lo, hi, BINS);
    let hb = log_histogram(&sbs, lo, hi, BINS);
    let max = hs.iter().chain(&hb).copied().max().unwrap_or(1).max(1) as f64;
    let f = Frame::standard();
    let mut svg = Svg::new(WIDTH, HEIGHT, &format!("relERT distribution ({}, {})", report.protocol, report.mode.name()));
    let bw = (f.x1 - f.x0) / BINS as f64;
    for (counts, colour) in [(&hb, SBS_COLOUR), (&hs, SELECTOR_COLOUR)] {
        for (b, &c) in counts.iter().enumerate() {
            let h = (f.y1 - f.y0) * c as f64 / max;
            svg.rect(f.x0 + b as f64 * bw, f.y1 - h, bw, h, colour, 0.5);
        }
    }
    f.axes(&mut svg, "relERT (log scale)", "count");
    f.log_x_ticks(&mut svg, lo, hi);
    f.y_ticks(&mut svg, max, |v| format!("{v:.0}"));
    legend(&mut svg, f.x1 - 140.0, f.y0 + 10.0, &[("selector", SELECTOR_COLOUR), ("SBS", SBS_COLOUR)]);
    svg.finish()
}

/// Empirical `P(relERT > t)` of selector and SBS against log10 t.
pub fn survival_plot(report: &Report) -> String {
    let (sel, sbs) = relert_columns(report);
    let all: Vec<f64> = sel.iter().chain(&sbs).copied().collect();
    let (lo, hi) = log_extent(&all);
    let f = Frame::standard();
    let map = |(t, p): (f64, f64)| {
        (
            f.x0 + (f.x1 - f.x0) * (t.log10() - lo) / (hi - lo),
            f.y1 - (f.y1 - f.y0) * p,
        )
    };
    let mut svg = Svg::new(WIDTH, HEIGHT, &format!("Survival of relERT ({}, {})", report.protocol, report.mode.name()));
    for (values, colour) in [(&sbs, SBS_COLOUR), (&sel, SELECTOR_COLOUR)] {
        let curve = survival_curve(values);
        let mut pts = Vec::with_capacity(2 * curve.len() + 1);
        for w in curve.windows(2) {
            pts.push(map(w[0]));
            pts.push(map((w[1].0, w[0].1)));
        }
        let last = *curve.last().expect("non-empty curve");
        pts.push(map(last));
        pts.push(map((10f64.powf(hi), last.1)));
        svg.polyline(&pts, colour);
    }
    f.axes(&mut svg, "t (log scale)", "P(relERT > t)");
    f.log_x_ticks(&mut svg, lo, hi);
    f.y_ticks(&mut svg, 1.0, |v| format!("{v:.2}"));
    legend(&mut svg, f.x1 - 140.0, f.y0 + 10.0, &[("selector", SELECTOR_COLOUR), ("SBS", SBS_COLOUR)]);
    svg.finish()
}

/// How often each algorithm was chosen, next to how often it is the VBS.
pub fn selection_bars(report: &Report) -> String {
    let n = report.algorithms.len();
    let mut vbs = vec![0usize; n];
    for r in &report.records {
        vbs[r.vbs] += 1;
    }
    let max = report.selection_counts.iter().chain(&vbs).copied().max().unwrap_or(1).max(1) as f64;
    let height = HEIGHT + 40.0;
    let f = Frame {
        x0: LEFT,
        x1: WIDTH - RIGHT,
        y0: TOP,
        y1: height - BOTTOM - 40.0,
    };
    let mut svg = Svg::new(WIDTH, height, &format!("Selection frequency ({}, {})", report.protocol, report.mode.name()));
    let slot = (f.x1 - f.x0) / n.max(1) as f64;
    let bw = slot * 0.38;
    for a in 0..n {
        let x = f.x0 + a as f64 * slot + slot * 0.1;
        let hs = (f.y1 - f.y0) * report.selection_counts[a] as f64 / max;
        let hv = (f.y1 - f.y0) * vbs[a] as f64 / max;
        svg.rect(x, f.y1 - hs, bw, hs, SELECTOR_COLOUR, 0.9);
        svg.rect(x + bw, f.y1 - hv, bw, hv, "#7f7f7f", 0.9);
        let cx = x + bw;
        let _ = writeln!(
            svg.body,
            r#"<text x="{cx:.2}" y="{y:.2}" text-anchor="end" font-family="sans-serif" font-size="10" transform="rotate(-45 {cx:.2} {y:.2})">{}</text>"#,
            escape(&report.algorithms[a]),
            y = f.y1 + 12.0
        );
    }
    f.axes(&mut svg, "", "datapoints");
    f.y_ticks(&mut svg, max, |v| format!("{v:.0}"));
    legend(&mut svg, f.x1 - 140.0, f.y0 + 10.0, &[("selected", SELECTOR_COLOUR), ("VBS", "#7f7f7f")]);
    svg.finish()
}

/// Diverging colour for a value in `[-1, 1]`: red below 0, blue above.
fn diverging(v: f64) -> String {
    let t = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let (r, g, b) = if t >= 0.0 {
        (255.0 * (1.0 - t), 255.0 * (1.0 - 0.6 * t), 255.0)
    } else {
        (255.0, 255.0 * (1.0 + 0.6 * t), 255.0 * (1.0 + t))
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Sequential colour for `t` in `[0, 1]`: white to dark blue.
fn sequential(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let c = |hi: f64, lo: f64| (hi + (lo - hi) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(247.0, 8.0), c(251.0, 48.0), c(255.0, 107.0))
}

fn heatmap(
    title: &str,
    rows: &[String],
    cols: &[String],
    values: &[Vec<f64>],
    colour: impl Fn(f64) -> String,
    label: impl Fn(f64) -> String,
) -> String {
    let cell_w = 90.0;
    let cell_h = 36.0;
    let x0 = 110.0;
    let y0 = 60.0;
    let width = x0 + cell_w * cols.len() as f64 + 20.0;
    let height = y0 + cell_h * rows.len() as f64 + 30.0;
    let mut svg = Svg::new(width.max(300.0), height, title);
    for (j, c) in cols.iter().enumerate() {
        svg.text(x0 + cell_w * (j as f64 + 0.5), y0 - 8.0, c, "middle", 11.0);
    }
    for (i, r) in rows.iter().enumerate() {
        let y = y0 + cell_h * i as f64;
        svg.text(x0 - 8.0, y + cell_h / 2.0 + 4.0, r, "end", 11.0);
        for (j, &v) in values[i].iter().enumerate() {
            let x = x0 + cell_w * j as f64;
            svg.rect(x, y, cell_w, cell_h, &colour(v), 1.0);
            svg.text(x + cell_w / 2.0, y + cell_h / 2.0 + 4.0, &label(v), "middle", 11.0);
        }
    }
    svg.finish()
}

/// Mean gap closure per function group (rows) and dimension (columns).
pub fn gap_closure_heatmap(report: &Report) -> String {
    let mut groups: Vec<String> = Vec::new();
    let mut dims: Vec<Option<u32>> = Vec::new();
    for c in &report.cells {
        if !groups.contains(&c.group) {
            groups.push(c.group.clone());
        }
        if !dims.contains(&c.dimension) {
            dims.push(c.dimension);
        }
    }
    let values: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            dims.iter()
                .map(|&d| report.cell(g, d).map_or(f64::NAN, |c| c.closure.mean))
                .collect()
        })
        .collect();
    let cols: Vec<String> = dims.iter().map(|d| d.map_or_else(|| "all".into(), |d| format!("d={d}"))).collect();
    heatmap(
        &format!("Gap closure of mean relERT ({}, {})", report.protocol, report.mode.name()),
        &groups,
        &cols,
        &values,
        diverging,
        |v| if v.is_finite() { format!("{v:.2}") } else { "-".into() },
    )
}

/// Heatmap of one sweep statistic over `k` (rows) and `r` (columns).
pub fn budget_heatmap(cells: &[SweepCell], metric: BudgetMetric) -> String {
    let mut ks: Vec<usize> = cells.iter().map(|c| c.slices).collect();
    let mut rs: Vec<usize> = cells.iter().map(|c| c.resolution).collect();
    ks.sort_unstable();
    ks.dedup();
    rs.sort_unstable();
    rs.dedup();
    let value = |c: &SweepCell| match metric {
        BudgetMetric::MedianRelert => c.summary.median,
        BudgetMetric::MeanRelert => c.summary.mean,
        BudgetMetric::Accuracy => c.accuracy,
    };
    let values: Vec<Vec<f64>> = ks
        .iter()
        .map(|&k| {
            rs.iter()
                .map(|&r| cells.iter().find(|c| c.slices == k && c.resolution == r).map_or(f64::NAN, value))
                .collect()
        })
        .collect();
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    // Darker is better: low relERT, high accuracy.
    let better_high = matches!(metric, BudgetMetric::Accuracy);
    heatmap(
        &format!("{} over slices k and resolution r", metric.title()),
        &ks.iter().map(|k| format!("k={k}")).collect::<Vec<_>>(),
        &rs.iter().map(|r| format!("r={r}")).collect::<Vec<_>>(),
        &values,
        |v| {
            let t = (v - lo) / span;
            sequential(if better_high { t } else { 1.0 - t })
        },
        |v| if v.is_finite() { format!("{v:.3}") } else { "-".into() },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMetric {
    MedianRelert,
    MeanRelert,
    Accuracy,
}

impl BudgetMetric {
    pub const ALL: [BudgetMetric; 3] = [BudgetMetric::MedianRelert, BudgetMetric::MeanRelert, BudgetMetric::Accuracy];

    pub fn title(self) -> &'static str {
        match self {
            BudgetMetric::MedianRelert => "Median relERT",
            BudgetMetric::MeanRelert => "Mean relERT",
            BudgetMetric::Accuracy => "Selection accuracy",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            BudgetMetric::MedianRelert => "budget_median",
            BudgetMetric::MeanRelert => "budget_mean",
            BudgetMetric::Accuracy => "budget_accuracy",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_starts_at_fraction_above_one_and_falls_to_zero() {
        let v = [1.0, 1.0, 2.0, 5.0, 5.0, 30.0];
        let c = survival_curve(&v);
        assert_eq!(c[0], (1.0, 4.0 / 6.0));
        assert_eq!(c[1], (2.0, 3.0 / 6.0));
        assert_eq!(c[2], (5.0, 1.0 / 6.0));
        assert_eq!(*c.last().unwrap(), (30.0, 0.0));
    }

    #[test]
    fn histogram_conserves_counts() {
        let v = [1.0, 3.0, 10.0, 99.0, 1000.0];
        let h = log_histogram(&v, 0.0, 3.0, 3);
        assert_eq!(h, vec![2, 2, 1]);
    }

    #[test]
    fn colours_are_hex() {
        assert_eq!(diverging(0.0), "#ffffff");
        assert_eq!(diverging(1.0), "#0066ff");
        assert_eq!(sequential(0.0), "#f7fbff");
        assert_eq!(escape("a<b&c"), "a&lt;b&amp;c");
    }
}
