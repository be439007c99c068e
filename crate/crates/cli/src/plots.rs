//! Minimal static SVG charts.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>", W / 2.0, escape(title)).unwrap();
    writeln!(s, "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - PAD, W - PAD / 2.0, H - PAD).unwrap();
    writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD).unwrap();
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn y_axis(s: &mut String, lo: f64, hi: f64) {
    for (v, y) in [(lo, H - PAD), (hi, PAD)] {
        writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.3}</text>", PAD - 4.0, y + 4.0).unwrap();
    }
}

/// One polyline per series over shared integer x values.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = header(title);
    let (x0, x1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 1.5 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    y_axis(&mut s, y0, y1);
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(x_label)).unwrap();
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> =
            pts.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" ")).unwrap();
        writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", W - PAD * 2.5, PAD + 14.0 * i as f64, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let (_, hi) = range(bars.iter().map(|b| b.1).chain([0.0]));
    let lo = 0.0_f64.min(range(bars.iter().map(|b| b.1)).0);
    y_axis(&mut s, lo, hi);
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    let py = |y: f64| H - PAD - (y - lo) / (hi - lo) * (H - 2.0 * PAD);
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.15;
        let top = py(v.max(lo));
        let c = COLORS[i % COLORS.len()];
        writeln!(s, "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{c}\"/>", slot * 0.7, (H - PAD - top).max(0.0)).unwrap();
        writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x + slot * 0.35, H - PAD + 14.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let l = line_chart("psnr", "severity", &[("a<b".into(), vec![(1.0, 20.0), (3.0, f64::NAN), (5.0, 15.0)])]);
        assert!(l.starts_with("<svg") && l.trim_end().ends_with("</svg>"));
        assert!(l.contains("a&lt;b"));
        let b = bar_chart("acc", &[("full".into(), 0.8), ("base".into(), 0.7)]);
        assert_eq!(b.matches("<rect").count(), 3);
    }
}
