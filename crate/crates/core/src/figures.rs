//! Static SVG figures: state scatter snapshots with optional contour layers,
//! and convergence curves.

use std::fmt::Write as _;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    /// Smallest box around `points`, padded by 5% (and at least a unit box).
    pub fn around(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut b = Bounds {
            x: (f64::INFINITY, f64::NEG_INFINITY),
            y: (f64::INFINITY, f64::NEG_INFINITY),
        };
        for (x, y) in points {
            if x.is_finite() && y.is_finite() {
                b.x = (b.x.0.min(x), b.x.1.max(x));
                b.y = (b.y.0.min(y), b.y.1.max(y));
            }
        }
        if !b.x.0.is_finite() {
            return Bounds {
                x: (-1.0, 1.0),
                y: (-1.0, 1.0),
            };
        }
        let pad = |(lo, hi): (f64, f64)| {
            let w = (hi - lo).max(1.0);
            (lo - 0.05 * w, hi + 0.05 * w)
        };
        Bounds {
            x: pad(b.x),
            y: pad(b.y),
        }
    }

    pub fn union(self, other: Bounds) -> Bounds {
        Bounds {
            x: (self.x.0.min(other.x.0), self.x.1.max(other.x.1)),
            y: (self.y.0.min(other.y.0), self.y.1.max(other.y.1)),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

pub type Segment = ((f64, f64), (f64, f64));

/// Marching-squares iso-lines of `f` at `level` on an `nx x ny` grid.
pub fn contour(
    f: impl Fn(f64, f64) -> f64,
    bounds: &Bounds,
    nx: usize,
    ny: usize,
    level: f64,
) -> Vec<Segment> {
    let xs: Vec<f64> = (0..=nx)
        .map(|i| bounds.x.0 + (bounds.x.1 - bounds.x.0) * i as f64 / nx as f64)
        .collect();
    let ys: Vec<f64> = (0..=ny)
        .map(|j| bounds.y.0 + (bounds.y.1 - bounds.y.0) * j as f64 / ny as f64)
        .collect();
    let vals: Vec<Vec<f64>> = ys.iter().map(|&y| xs.iter().map(|&x| f(x, y)).collect()).collect();
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            // corners counter-clockwise from bottom-left
            let c = [
                (xs[i], ys[j], vals[j][i]),
                (xs[i + 1], ys[j], vals[j][i + 1]),
                (xs[i + 1], ys[j + 1], vals[j + 1][i + 1]),
                (xs[i], ys[j + 1], vals[j + 1][i]),
            ];
            let mut cuts = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (c[e], c[(e + 1) % 4]);
                if (a.2 >= level) != (b.2 >= level) {
                    let t = (level - a.2) / (b.2 - a.2);
                    cuts.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
                }
            }
            if cuts.len() == 2 {
                out.push((cuts[0], cuts[1]));
            } else if cuts.len() == 4 {
                out.push((cuts[0], cuts[1]));
                out.push((cuts[2], cuts[3]));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ContourLayer {
    pub color: String,
    pub segments: Vec<Segment>,
}

fn header(s: &mut String, title: &str) {
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .ok();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).ok();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .ok();
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, b: &Bounds, xlabel: &str, ylabel: &str) {
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    )
    .ok();
    for t in 0..=4 {
        let fx = b.x.0 + (b.x.1 - b.x.0) * t as f64 / 4.0;
        let fy = b.y.0 + (b.y.1 - b.y.0) * t as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            b.px(fx),
            HEIGHT - MARGIN + 14.0,
            tick(fx)
        )
        .ok();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            b.py(fy) + 3.0,
            tick(fy)
        )
        .ok();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0,
        escape(xlabel)
    )
    .ok();
    writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    )
    .ok();
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn inside(b: &Bounds, (x, y): (f64, f64)) -> bool {
    x >= b.x.0 && x <= b.x.1 && y >= b.y.0 && y <= b.y.1
}

/// Scatter of `points` over optional contour layers.
pub fn scatter(
    title: &str,
    labels: (&str, &str),
    points: &[(f64, f64)],
    bounds: &Bounds,
    layers: &[ContourLayer],
) -> String {
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, bounds, labels.0, labels.1);
    for layer in layers {
        writeln!(s, r#"<g stroke="{}" stroke-width="1" fill="none">"#, layer.color).ok();
        for &(a, b) in &layer.segments {
            writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
                bounds.px(a.0),
                bounds.py(a.1),
                bounds.px(b.0),
                bounds.py(b.1)
            )
            .ok();
        }
        writeln!(s, "</g>").ok();
    }
    writeln!(s, r#"<g fill="steelblue" fill-opacity="0.5">"#).ok();
    for &p in points.iter().filter(|&&p| inside(bounds, p)) {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#,
            bounds.px(p.0),
            bounds.py(p.1)
        )
        .ok();
    }
    writeln!(s, "</g>").ok();
    writeln!(s, "</svg>").ok();
    s
}

/// Loss curve against iteration, with an optional horizontal reference line.
pub fn convergence(title: &str, series: &[(f64, f64)], reference: Option<(f64, &str)>) -> String {
    // the first record (untrained policy) usually dwarfs the rest
    let tail: Vec<(f64, f64)> = if series.len() > 2 {
        series[1..].to_vec()
    } else {
        series.to_vec()
    };
    let mut ys: Vec<f64> = tail.iter().map(|p| p.1).collect();
    if let Some((r, _)) = reference {
        ys.push(r);
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9 * hi.abs().max(1.0));
    let x_hi = series.last().map_or(1.0, |p| p.0).max(1.0);
    let bounds = Bounds {
        x: (0.0, x_hi),
        y: (lo - 0.05 * span, hi + 0.05 * span),
    };
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, &bounds, "iteration", "cost");
    let clamp = |y: f64| y.clamp(bounds.y.0, bounds.y.1);
    let path: Vec<String> = series
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", bounds.px(x), bounds.py(clamp(y))))
        .collect();
    writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        path.join(" ")
    )
    .ok();
    if let Some((r, label)) = reference {
        writeln!(
            s,
            r#"<line x1="{MARGIN}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick" stroke-dasharray="6 4"/>"#,
            bounds.py(r),
            WIDTH - MARGIN,
            bounds.py(r)
        )
        .ok();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="firebrick" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN - 4.0,
            bounds.py(r) - 4.0,
            escape(label)
        )
        .ok();
    }
    writeln!(s, "</svg>").ok();
    s
}
