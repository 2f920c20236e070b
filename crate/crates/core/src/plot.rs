//! Minimal hand-rendered SVG charts for CSV series.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str, y: (f64, f64)) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 16.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
        PAD - 4.0,
        H - PAD,
        y.0,
        PAD - 4.0,
        PAD + 4.0,
        y.1,
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let x = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let y = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |v: f64| PAD + (v - x.0) / (x.1 - x.0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y.0) / (y.1 - y.0) * (H - 2.0 * PAD);
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label, y);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(a, b)| format!("{:.2},{:.2}", sx(a), sy(b)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            W - PAD,
            PAD + 16.0 * i as f64,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn bar_chart(title: &str, y_label: &str, bars: &[(&str, f64)]) -> String {
    let y = bounds(bars.iter().map(|b| b.1).chain([0.0]));
    let sy = |v: f64| H - PAD - (v - y.0) / (y.1 - y.0) * (H - 2.0 * PAD);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let mut out = String::new();
    frame(&mut out, title, "", y_label, y);
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.15;
        let top = sy(*v).min(sy(0.0));
        let height = (sy(*v) - sy(0.0)).abs();
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{height:.2}\" fill=\"{}\"/>\n\
             <text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            slot * 0.7,
            COLORS[i % COLORS.len()],
            x + slot * 0.35,
            H - PAD + 16.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Overlaid histograms over `[0, 1]`.
pub fn histogram(title: &str, x_label: &str, groups: &[(&str, &[f64])], bins: usize) -> String {
    let series: Vec<Series<'_>> = groups
        .iter()
        .map(|(name, values)| {
            let mut counts = vec![0usize; bins];
            for v in values.iter() {
                let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let n = values.len().max(1) as f64;
            Series {
                name,
                points: counts
                    .iter()
                    .enumerate()
                    .map(|(i, c)| ((i as f64 + 0.5) / bins as f64, *c as f64 / n))
                    .collect(),
            }
        })
        .collect();
    line_chart(title, x_label, "fraction", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart(
            "a<b",
            "x",
            "y",
            &[Series {
                name: "s",
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        assert!(s.contains("<polyline"));
        let b = bar_chart("t", "v", &[("x", 0.5), ("y", 0.0)]);
        assert_eq!(b.matches("<rect").count(), 3);
        let h = histogram("h", "p", &[("t", &[0.1, 0.9, 1.0])], 10);
        assert!(h.contains("<polyline"));
    }

    #[test]
    fn flat_series_do_not_divide_by_zero() {
        let s = line_chart(
            "flat",
            "x",
            "y",
            &[Series {
                name: "s",
                points: vec![(0.0, 1.0), (0.0, 1.0)],
            }],
        );
        assert!(!s.contains("NaN"));
    }
}
