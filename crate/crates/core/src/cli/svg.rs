//! Minimal SVG scatter/line plot.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

const SIZE: f64 = 640.0;
const MARGIN: f64 = 24.0;

/// Viridis-like stops, interpolated linearly.
const STOPS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

/// Colour for `u` in `[0, 1]`.
pub fn colour(u: f64) -> String {
    let x = u.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// A point cloud drawn as markers, coloured by its time.
pub struct Layer {
    pub time: f64,
    pub points: Array2<f64>,
}

/// One trajectory sampled on a time grid.
pub struct Path {
    pub times: Vec<f64>,
    pub points: Array2<f64>,
}

pub struct Plot {
    pub background: Vec<Layer>,
    pub paths: Vec<Path>,
    /// Time range used for colouring.
    pub t_range: (f64, f64),
}

struct Frame {
    lo: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit<'a>(clouds: impl Iterator<Item = ArrayView2<'a, f64>>) -> Frame {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in clouds {
            for row in c.rows() {
                for k in 0..2 {
                    lo[k] = lo[k].min(row[k]);
                    hi[k] = hi[k].max(row[k]);
                }
            }
        }
        if !lo[0].is_finite() {
            return Frame { lo: [0.0, 0.0], scale: 1.0 };
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        Frame { lo, scale: (SIZE - 2.0 * MARGIN) / span }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN + (x - self.lo[0]) * self.scale,
            SIZE - MARGIN - (y - self.lo[1]) * self.scale,
        )
    }
}

impl Plot {
    pub fn render(&self) -> String {
        let frame = Frame::fit(
            self.background
                .iter()
                .map(|l| l.points.view())
                .chain(self.paths.iter().map(|p| p.points.view())),
        );
        let (t0, t1) = self.t_range;
        let span = if t1 > t0 { t1 - t0 } else { 1.0 };
        let u = |t: f64| (t - t0) / span;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<g id="data" fill-opacity="0.35" stroke="none">"#);
        for layer in &self.background {
            let c = colour(u(layer.time));
            for row in layer.points.rows() {
                let (x, y) = frame.map(row[0], row[1]);
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{c}"/>"#);
            }
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(s, r#"<g id="trajectories" fill="none" stroke-width="1.2">"#);
        for path in &self.paths {
            // one polyline per unit interval so colour follows time
            let mut start = 0;
            while start + 1 < path.times.len() {
                let seg = path.times[start].floor();
                let mut end = start + 1;
                while end + 1 < path.times.len() && path.times[end] < seg + 1.0 - 1e-9 {
                    end += 1;
                }
                let pts: Vec<String> = (start..=end)
                    .map(|i| {
                        let (x, y) = frame.map(path.points[[i, 0]], path.points[[i, 1]]);
                        format!("{x:.2},{y:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" stroke="{}"/>"#,
                    pts.join(" "),
                    colour(u(path.times[start]))
                );
                start = end;
            }
        }
        let _ = writeln!(s, "</g>");
        s.push_str("</svg>\n");
        s
    }
}
