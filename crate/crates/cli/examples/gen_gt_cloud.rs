//! Writes the "GT" point cloud used as the sample-only source of
//! `presets/example3.cfg`.
//!
//!     cargo run -p flowsteer-cli --example gen_gt_cloud -- presets/gt_cloud.csv
//!
//! Points are spread uniformly by arc length over the strokes of the two
//! letters, jittered, and shifted up by `OFFSET`; velocities are small
//! Gaussian noise. The output is deterministic.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const COUNT: usize = 4000;
const OFFSET: (f64, f64) = (0.0, 8.0);
const JITTER: f64 = 0.15;
const VELOCITY_SD: f64 = 0.2;

enum Stroke {
    Line((f64, f64), (f64, f64)),
    /// center, radius, start and end angle (radians, counter-clockwise)
    Arc((f64, f64), f64, f64, f64),
}

impl Stroke {
    fn length(&self) -> f64 {
        match *self {
            Stroke::Line(a, b) => (b.0 - a.0).hypot(b.1 - a.1),
            Stroke::Arc(_, r, t0, t1) => r * (t1 - t0),
        }
    }

    fn at(&self, s: f64) -> (f64, f64) {
        match *self {
            Stroke::Line(a, b) => (a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1)),
            Stroke::Arc(c, r, t0, t1) => {
                let t = t0 + s * (t1 - t0);
                (c.0 + r * t.cos(), c.1 + r * t.sin())
            }
        }
    }
}

fn strokes() -> Vec<Stroke> {
    vec![
        // G
        Stroke::Arc((-2.5, 0.0), 2.0, PI / 4.0, 2.0 * PI),
        Stroke::Line((-0.5, 0.0), (-2.0, 0.0)),
        // T
        Stroke::Line((0.8, 2.0), (4.8, 2.0)),
        Stroke::Line((2.8, 2.0), (2.8, -2.0)),
    ]
}

fn main() -> std::io::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "presets/gt_cloud.csv".into());
    let strokes = strokes();
    let lengths: Vec<f64> = strokes.iter().map(Stroke::length).collect();
    let total: f64 = lengths.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(out, "# GT point cloud: x_1,x_2 (position), x_3,x_4 (velocity)")?;
    for _ in 0..COUNT {
        let mut s = rng.random_range(0.0..total);
        let mut i = 0;
        while s > lengths[i] && i + 1 < lengths.len() {
            s -= lengths[i];
            i += 1;
        }
        let (x, y) = strokes[i].at((s / lengths[i]).clamp(0.0, 1.0));
        let mut noise = || rng.sample::<f64, _>(StandardNormal);
        let px = x + OFFSET.0 + JITTER * noise();
        let py = y + OFFSET.1 + JITTER * noise();
        let vx = VELOCITY_SD * noise();
        let vy = VELOCITY_SD * noise();
        writeln!(out, "{px:.6},{py:.6},{vx:.6},{vy:.6}")?;
    }
    out.flush()?;
    eprintln!("wrote {COUNT} samples to {path}");
    Ok(())
}
