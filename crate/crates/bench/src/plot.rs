//! Minimal SVG figures: boxplots of per-episode indices and sweep curves.

use std::fmt::Write;

/// Five-number summary with Tukey whiskers (1.5 IQR).
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    /// `None` when no finite values are present.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v
            .iter()
            .copied()
            .filter(|x| (lo_fence..=hi_fence).contains(x))
            .collect();
        Some(Self {
            median,
            q1,
            q3,
            whisker_lo: inside.first().copied().unwrap_or(q1),
            whisker_hi: inside.last().copied().unwrap_or(q3),
            outliers: v.into_iter().filter(|x| !(lo_fence..=hi_fence).contains(x)).collect(),
        })
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Map data values to pixel rows; log scale when all values are positive
/// and span more than two decades.
struct YAxis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl YAxis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self {
                lo: 0.0,
                hi: 1.0,
                log: false,
            };
        }
        let log = lo > 0.0 && hi / lo > 100.0;
        let (lo, hi) = if log { (lo.log10(), hi.log10()) } else { (lo, hi) };
        let pad = if hi > lo {
            0.05 * (hi - lo)
        } else {
            0.5_f64.max(lo.abs() * 0.1)
        };
        Self {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    fn px(&self, v: f64) -> f64 {
        let v = if self.log { v.max(f64::MIN_POSITIVE).log10() } else { v };
        TOP + (H - TOP - BOTTOM) * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self, s: &mut String) {
        for i in 0..=4 {
            let f = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let v = if self.log { 10f64.powf(f) } else { f };
            let y = self.px(v);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
                W - RIGHT
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                y + 4.0,
                fmt_num(v)
            );
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// One box per `(label, values)` group.
pub fn boxplot_svg(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let stats: Vec<(String, Option<BoxStats>)> = groups
        .iter()
        .map(|(l, v)| (l.clone(), BoxStats::from_values(v)))
        .collect();
    let axis = YAxis::fit(stats.iter().flat_map(|(_, b)| {
        b.iter()
            .flat_map(|b| {
                [b.whisker_lo, b.whisker_hi]
                    .into_iter()
                    .chain(b.outliers.iter().copied())
            })
            .collect::<Vec<_>>()
    }));
    let mut s = header(title);
    axis.ticks(&mut s);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let slot = (W - LEFT - RIGHT) / stats.len().max(1) as f64;
    for (i, (label, b)) in stats.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let half = (slot * 0.25).min(40.0);
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 20.0,
            escape(label)
        );
        let Some(b) = b else { continue };
        let (y1, y3, ym) = (axis.px(b.q1), axis.px(b.q3), axis.px(b.median));
        let (wl, wh) = (axis.px(b.whisker_lo), axis.px(b.whisker_hi));
        let _ = writeln!(
            s,
            r#"<line class="whisker" x1="{cx:.1}" x2="{cx:.1}" y1="{wl:.1}" y2="{y1:.1}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<line class="whisker" x1="{cx:.1}" x2="{cx:.1}" y1="{y3:.1}" y2="{wh:.1}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r##"<rect class="box" x="{:.1}" y="{y3:.1}" width="{:.1}" height="{:.1}" fill="#cfe0f3" stroke="black"/>"##,
            cx - half,
            2.0 * half,
            (y1 - y3).max(0.5)
        );
        let _ = writeln!(
            s,
            r##"<line class="median" data-value="{}" x1="{:.1}" x2="{:.1}" y1="{ym:.1}" y2="{ym:.1}" stroke="#c00" stroke-width="2"/>"##,
            b.median,
            cx - half,
            cx + half
        );
        for o in &b.outliers {
            let _ = writeln!(
                s,
                r#"<circle class="outlier" data-value="{o}" cx="{cx:.1}" cy="{:.1}" r="3" fill="none" stroke="black"/>"#,
                axis.px(*o)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// `y` against log-scaled `x`, with the minimizer marked.
pub fn curve_svg(title: &str, x_label: &str, y_label: &str, xs: &[f64], ys: &[f64], mark: Option<f64>) -> String {
    let axis = YAxis::fit(ys.iter().copied());
    let lx: Vec<f64> = xs.iter().map(|x| x.log10()).collect();
    let (x0, x1) = lx
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |lv: f64| LEFT + (W - LEFT - RIGHT) * (lv - x0) / span;
    let mut s = header(title);
    axis.ticks(&mut s);
    for d in (x0.ceil() as i64)..=(x1.floor() as i64) {
        let x = px(d as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{d}</text>"#,
            H - BOTTOM + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let pts: Vec<String> = lx
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(x, y)| format!("{:.1},{:.1}", px(*x), axis.px(*y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f5fa8" stroke-width="2"/>"##,
        pts.join(" ")
    );
    if let Some(m) = mark {
        if let Some(i) = xs.iter().position(|x| *x == m) {
            let _ = writeln!(
                s,
                r##"<circle class="minimizer" cx="{:.1}" cy="{:.1}" r="5" fill="#c00"/>"##,
                px(lx[i]),
                axis.px(ys[i])
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxplot_arithmetic() {
        let b = BoxStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.median, 3.0);
        assert_eq!((b.q1, b.q3), (2.0, 4.0));
        assert_eq!(b.whisker_hi, 4.0);
        assert_eq!(b.whisker_lo, 1.0);
        assert_eq!(b.outliers, vec![100.0]);
    }

    #[test]
    fn non_finite_values_are_ignored() {
        assert!(BoxStats::from_values(&[f64::NAN]).is_none());
        assert_eq!(BoxStats::from_values(&[f64::INFINITY, 2.0]).unwrap().median, 2.0);
    }

    #[test]
    fn svg_contains_marks() {
        let svg = boxplot_svg("J", "J", &[("a".into(), vec![1.0, 2.0, 3.0, 4.0, 100.0])]);
        assert!(svg.contains(r#"data-value="3""#));
        assert!(svg.contains(r#"class="outlier" data-value="100""#));
        let c = curve_svg("sweep", "beta", "J", &[1.0, 10.0, 100.0], &[3.0, 1.0, 2.0], Some(10.0));
        assert!(c.contains("minimizer"));
    }
}
