//! Static SVG scatter plots of spots.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const MARGIN: f64 = 20.0;
const LEGEND_WIDTH: f64 = 160.0;

/// Categorical palette; labels beyond its length wrap around.
const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#393b79", "#637939",
];

/// Stops of a perceptually ordered dark-to-bright ramp.
const RAMP: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

pub enum Coloring<'a> {
    /// One category name per spot.
    Labels(&'a [String]),
    /// One value per spot, with the column name for the legend.
    Values(&'a [f64], &'a str),
}

struct Frame {
    min_x: f64,
    min_y: f64,
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit(coords: &[(f64, f64)]) -> Self {
        let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in coords {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        if coords.is_empty() {
            (min_x, max_x, min_y, max_y) = (0.0, 1.0, 0.0, 1.0);
        }
        let span_x = (max_x - min_x).max(f64::MIN_POSITIVE);
        let span_y = (max_y - min_y).max(f64::MIN_POSITIVE);
        let plot = WIDTH - 2.0 * MARGIN;
        let scale = if max_x > min_x || max_y > min_y { plot / span_x.max(span_y) } else { 1.0 };
        Self {
            min_x,
            min_y,
            scale,
            height: (span_y * scale).min(plot).max(1.0) + 2.0 * MARGIN,
        }
    }

    /// Image coordinates; y grows downwards in tissue images too.
    fn place(&self, x: f64, y: f64) -> (f64, f64) {
        (MARGIN + (x - self.min_x) * self.scale, MARGIN + (y - self.min_y) * self.scale)
    }
}

fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |u: f64, v: f64| (u + (v - u) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the scatter. Identical inputs give identical bytes.
pub fn scatter(coords: &[(f64, f64)], coloring: &Coloring<'_>, title: &str) -> String {
    let frame = Frame::fit(coords);
    let radius = (frame.scale * 0.45).clamp(1.0, 8.0);
    let total_width = WIDTH + LEGEND_WIDTH;
    let height = frame.height.max(200.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_width}" height="{height:.0}" viewBox="0 0 {total_width} {height:.0}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);

    let colors: Vec<String> = match coloring {
        Coloring::Labels(labels) => {
            let mut order: Vec<&String> = Vec::new();
            for l in labels.iter() {
                if !order.contains(&l) {
                    order.push(l);
                }
            }
            order.sort();
            let legend_rows = order.len().min(20);
            for (i, name) in order.iter().take(legend_rows).enumerate() {
                let y = MARGIN + 18.0 * i as f64;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
                    WIDTH,
                    y,
                    PALETTE[i % PALETTE.len()],
                    WIDTH + 18.0,
                    y + 10.0,
                    escape(name)
                );
            }
            labels
                .iter()
                .map(|l| {
                    let i = order.iter().position(|o| *o == l).unwrap_or(0);
                    PALETTE[i % PALETTE.len()].to_owned()
                })
                .collect()
        }
        Coloring::Values(values, name) => {
            let finite = values.iter().filter(|v| v.is_finite());
            let lo = finite.clone().fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = finite.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let span = if hi > lo { hi - lo } else { 1.0 };
            for step in 0..=10 {
                let t = 1.0 - step as f64 / 10.0;
                let _ = writeln!(
                    out,
                    r#"<rect x="{WIDTH:.1}" y="{:.1}" width="16" height="10" fill="{}"/>"#,
                    MARGIN + 10.0 * step as f64,
                    ramp(t)
                );
            }
            let label = |v: f64| if v.is_finite() { format!("{v:.3}") } else { "n/a".into() };
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text><text x="{WIDTH:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
                WIDTH + 22.0,
                MARGIN + 9.0,
                label(hi),
                WIDTH + 22.0,
                MARGIN + 110.0,
                label(lo),
                MARGIN + 132.0,
                escape(name)
            );
            values.iter().map(|&v| ramp((v - lo) / span)).collect()
        }
    };

    for (&(x, y), color) in coords.iter().zip(&colors) {
        let (px, py) = frame.place(x, y);
        let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="{radius:.2}" fill="{color}"/>"#);
    }
    out.push_str("</svg>\n");
    out
}
