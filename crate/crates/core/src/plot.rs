//! Schedule tables and small SVG line charts.

use std::fmt::Write as _;

use crate::schedule::{log_snr, shift_timestep, TimestepDistribution};

/// CSV with columns `mu,sigma,t,lambda,t_shifted` over `points` evenly
/// spaced `t` in `[0, 1]` for each distribution. Endpoint log-SNR values
/// print as `inf` / `-inf`.
pub fn schedule_csv(dists: &[TimestepDistribution], points: usize) -> String {
    let mut s = String::from("mu,sigma,t,lambda,t_shifted\n");
    let n = points.max(2);
    for d in dists {
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", d.mu(), d.sigma(), t, log_snr(t), shift_timestep(t, d));
        }
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of named series over x = 1, 2, ..., with the y axis fixed to
/// `[y_min, y_max]`.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[f64])], y_min: f64, y_max: f64) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (56.0, 130.0, 36.0, 44.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let y = |v: f64| top + ph * (1.0 - (v.clamp(y_min, y_max) - y_min) / span);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, left + pw / 2.0, escape(title));
    for k in 0..=4 {
        let v = y_min + span * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, yy + 4.0);
    }
    for i in 0..n {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x(i), top + ph + 16.0, i + 1);
    }
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &pts {
            let (px, py) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 12.0 + 18.0 * k as f64;
        let lx = left + pw + 10.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 20.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Identity-over-turns chart.
pub fn drift_svg(series: &[(&str, &[f64])]) -> String {
    line_svg("Identity preservation over edit turns", "turn", "identity", series, 0.0, 1.0)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_csv_midpoint() {
        let d = TimestepDistribution::logit_normal(1.0986, 1.0).unwrap();
        let csv = schedule_csv(&[d], 101);
        assert_eq!(csv.lines().count(), 102);
        let row = csv.lines().find(|l| l.split(',').nth(2) == Some("0.500000")).unwrap();
        let t_shift: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!((t_shift - 0.75).abs() < 1e-4);
        assert!(csv.lines().nth(1).unwrap().contains(",inf,"));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let a = [1.0, 0.9, 0.8];
        let b = [0.5, 0.2, 0.1];
        let svg = drift_svg(&[("model", &a), ("baseline <ctx-free>", &b)]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("&lt;ctx-free&gt;"));
    }
}
