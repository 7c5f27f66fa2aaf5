//! Minimal SVG charts: line plots for training curves and scatter plots for
//! embeddings.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn open(&self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(xv),
                y1 + 16.0,
                tick(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                self.py(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 14.0,
            escape(x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 4.0 + i as f64 * 16.0;
        let x = WIDTH - MARGIN - 120.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            COLORS[i % COLORS.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let frame = Frame {
        x: bounds(all().map(|p| p.0)),
        y: bounds(all().map(|p| p.1)),
    };
    let mut s = frame.open(title, x_label, y_label);
    for (i, ser) in series.iter().enumerate() {
        let d: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .enumerate()
            .map(|(k, &(x, y))| {
                format!("{}{:.2},{:.2}", if k == 0 { "M" } else { "L" }, frame.px(x), frame.py(y))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.join(" "),
            COLORS[i % COLORS.len()]
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.name).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Scatter of `n x dims` points colored by label. Three-dimensional points
/// are drawn with a fixed oblique projection.
pub fn scatter(title: &str, points: &[f64], dims: usize, labels: &[usize], names: &[&str]) -> String {
    let projected: Vec<(f64, f64)> = points
        .chunks(dims)
        .map(|p| match p {
            [x, y] => (*x, *y),
            [x, y, z, ..] => (x + 0.5 * z, y + 0.35 * z),
            _ => (p.first().copied().unwrap_or(0.0), 0.0),
        })
        .collect();
    let frame = Frame {
        x: bounds(projected.iter().map(|p| p.0)),
        y: bounds(projected.iter().map(|p| p.1)),
    };
    let (xl, yl) = if dims == 3 { ("x + z/2", "y + 0.35 z") } else { ("x", "y") };
    let mut s = frame.open(title, xl, yl);
    for (i, &(x, y)) in projected.iter().enumerate() {
        let label = labels.get(i).copied().unwrap_or(0);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            frame.px(x),
            frame.py(y),
            COLORS[label % COLORS.len()]
        );
    }
    legend(&mut s, names);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_well_formed() {
        let svg = line_chart(
            "loss",
            "epoch",
            "loss",
            &[Series {
                name: "train_loss",
                points: vec![(1.0, 0.7), (2.0, 0.5), (3.0, f64::NAN)],
            }],
        );
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("train_loss"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn scatter_handles_degenerate_input() {
        let svg = scatter("t", &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3, &[0, 1], &["a", "b"]);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(!svg.contains("NaN"));
    }
}
