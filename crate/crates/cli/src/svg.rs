//! Minimal SVG 1.1 plots: grouped scatter, per-metric violin summaries and
//! overlaid histograms.

use std::fmt::Write as _;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const MISSING: &str = "#c8c8c8";

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(width: f64, height: f64, title: &str, comment: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, "{comment}");
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, width / 2.0, escape(title));
    s
}

/// Linear map from a data range onto a pixel range; a flat range maps to
/// the middle.
#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn new(values: impl Iterator<Item = f64>, a: f64, b: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        Self { lo, hi, a, b }
    }

    fn map(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }
}

/// Points colored by group; `None` groups are drawn grey. Legend entries
/// follow `names`.
pub fn scatter(points: &[(f64, f64)], groups: &[Option<usize>], names: &[String], title: &str, axes: (&str, &str), comment: &str) -> String {
    let (w, h, legend) = (640.0, 520.0, 150.0);
    let (left, top, right, bottom) = (50.0, 35.0, w - legend, h - 45.0);
    let xs = Scale::new(points.iter().map(|p| p.0), left, right);
    let ys = Scale::new(points.iter().map(|p| p.1), bottom, top);
    let mut s = open(w, h, title, comment);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#, right - left, bottom - top);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, (left + right) / 2.0, h - 15.0, escape(axes.0));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(axes.1)
    );
    let r = if points.len() > 2000 { 1.5 } else { 2.5 };
    for (p, g) in points.iter().zip(groups) {
        let fill = g.map_or(MISSING, color);
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}" fill-opacity="0.7"/>"#, xs.map(p.0), ys.map(p.1));
    }
    for (i, name) in names.iter().enumerate() {
        let y = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{y}" r="5" fill="{}"/>"#, right + 20.0, color(i));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, right + 32.0, y + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// One panel per metric: a mirrored density outline (histogram smoothed
/// over neighbouring bins) with the interquartile box and median.
pub fn violins(panels: &[(&str, Vec<f64>)], title: &str, comment: &str) -> String {
    const BINS: usize = 24;
    let pw = 170.0;
    let (w, h) = (pw * panels.len().max(1) as f64, 360.0);
    let (top, bottom) = (40.0, h - 50.0);
    let mut s = open(w, h, title, comment);
    for (p, (name, values)) in panels.iter().enumerate() {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let cx = pw * p as f64 + pw / 2.0;
        let ys = Scale::new(v.iter().copied(), bottom, top);
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, h - 28.0, escape(name));
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" font-size="10" text-anchor="middle">n={}</text>"#, h - 12.0, v.len());
        let _ = writeln!(s, r#"<text x="{}" y="{top}" font-size="10">{:.3}</text>"#, cx - pw / 2.0 + 4.0, ys.hi);
        let _ = writeln!(s, r#"<text x="{}" y="{bottom}" font-size="10">{:.3}</text>"#, cx - pw / 2.0 + 4.0, ys.lo);
        if v.is_empty() {
            continue;
        }
        let mut counts = [0.0f64; BINS];
        for &x in &v {
            let b = ((x - ys.lo) / (ys.hi - ys.lo) * BINS as f64).floor() as isize;
            counts[b.clamp(0, BINS as isize - 1) as usize] += 1.0;
        }
        let smooth: Vec<f64> = (0..BINS)
            .map(|i| {
                let prev = if i > 0 { counts[i - 1] } else { 0.0 };
                let next = if i + 1 < BINS { counts[i + 1] } else { 0.0 };
                0.25 * prev + 0.5 * counts[i] + 0.25 * next
            })
            .collect();
        let peak = smooth.iter().copied().fold(0.0, f64::max).max(1e-12);
        let half = pw * 0.35;
        let y_of = |i: usize| ys.map(ys.lo + (i as f64 + 0.5) / BINS as f64 * (ys.hi - ys.lo));
        let mut path = String::new();
        for (i, c) in smooth.iter().enumerate() {
            let _ = write!(path, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, cx + half * c / peak, y_of(i));
        }
        for (i, c) in smooth.iter().enumerate().rev() {
            let _ = write!(path, "L{:.2},{:.2} ", cx - half * c / peak, y_of(i));
        }
        path.push('Z');
        let _ = writeln!(s, r#"<path d="{path}" fill="{}" fill-opacity="0.35" stroke="{}"/>"#, color(p), color(p));
        let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{:.2}" width="12" height="{:.2}" fill="white" stroke="black"/>"#,
            cx - 6.0,
            ys.map(q3),
            (ys.map(q1) - ys.map(q3)).max(0.5)
        );
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#, cx - 6.0, cx + 6.0, ys.map(med), ys.map(med));
    }
    s.push_str("</svg>\n");
    s
}

/// Overlaid normalized histograms on a shared axis with an optional
/// vertical threshold marker.
pub fn histograms(series: &[(&str, &[f64])], bins: usize, threshold: Option<f64>, title: &str, axis: &str, comment: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, top, right, bottom) = (50.0, 35.0, w - 150.0, h - 45.0);
    let xs = Scale::new(series.iter().flat_map(|(_, v)| v.iter().copied()).chain(threshold), left, right);
    let hist: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0.0; bins];
            for &x in v.iter().filter(|x| x.is_finite()) {
                let b = ((x - xs.lo) / (xs.hi - xs.lo) * bins as f64).floor() as isize;
                c[b.clamp(0, bins as isize - 1) as usize] += 1.0;
            }
            let n = v.len().max(1) as f64;
            c.iter().map(|x| x / n).collect()
        })
        .collect();
    let peak = hist.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
    let ys = Scale::new([0.0, peak].into_iter(), bottom, top);
    let mut s = open(w, h, title, comment);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#, right - left, bottom - top);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, (left + right) / 2.0, h - 15.0, escape(axis));
    let _ = writeln!(s, r#"<text x="{left}" y="{}" font-size="10">{:.3}</text>"#, bottom + 14.0, xs.lo);
    let _ = writeln!(s, r#"<text x="{right}" y="{}" font-size="10" text-anchor="end">{:.3}</text>"#, bottom + 14.0, xs.hi);
    let bw = (right - left) / bins as f64;
    for (k, (c, (name, _))) in hist.iter().zip(series).enumerate() {
        let mut path = format!("M{left},{bottom} ");
        for (i, f) in c.iter().enumerate() {
            let x0 = left + bw * i as f64;
            let _ = write!(path, "L{x0:.2},{:.2} L{:.2},{:.2} ", ys.map(*f), x0 + bw, ys.map(*f));
        }
        let _ = write!(path, "L{right},{bottom} Z");
        let _ = writeln!(s, r#"<path d="{path}" fill="{}" fill-opacity="0.3" stroke="{}"/>"#, color(k), color(k));
        let y = top + 10.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, right + 15.0, y - 5.0, color(k));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, right + 32.0, y + 4.0, escape(name));
    }
    if let Some(t) = threshold {
        let x = xs.map(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" x2="{x:.2}" y1="{top}" y2="{bottom}" stroke="black" stroke-dasharray="4 3"/>"#);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" font-size="10" text-anchor="middle">threshold {t:.3}</text>"#, top - 3.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_draws_every_point() {
        let pts = [(0.0, 0.0), (1.0, 2.0), (3.0, -1.0)];
        let svg = scatter(&pts, &[Some(0), Some(1), None], &["a".into(), "b<".into()], "t", ("x", "y"), "<!-- c -->");
        assert_eq!(svg.matches("<circle").count(), 3 + 2);
        assert!(svg.contains("b&lt;"));
        assert!(svg.contains(MISSING));
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<!-- c -->"));
    }

    #[test]
    fn flat_values_do_not_divide_by_zero() {
        let svg = violins(&[("flat", vec![2.0; 5]), ("empty", vec![])], "t", "");
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let svg = histograms(&[("a", &[1.0, 1.0])], 10, Some(1.0), "t", "x", "");
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
