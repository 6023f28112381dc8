//! Minimal SVG rendering for trajectory plots.
//!
//! Everything here draws in world meters with a shared equal-aspect
//! mapping: x grows right, y grows up, the content is centered with a
//! margin. Output is a plain string; no external renderer is involved.

use std::fmt::Write as _;

/// Stroke style for one series.
#[derive(Debug, Clone)]
pub struct Style {
    pub color: String,
    pub width: f64,
    pub dashed: bool,
    /// Draw a dot at every point in addition to the line.
    pub markers: bool,
}

impl Style {
    pub fn line(color: &str) -> Self {
        Style { color: color.into(), width: 1.5, dashed: false, markers: false }
    }

    pub fn dashed(color: &str) -> Self {
        Style { dashed: true, ..Style::line(color) }
    }

    pub fn dotted(color: &str) -> Self {
        Style { markers: true, ..Style::line(color) }
    }

    /// Fixed palette keyed by index, for series without a natural color.
    pub fn auto(i: usize) -> Self {
        const PALETTE: [&str; 6] =
            ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
        Style::line(PALETTE[i % PALETTE.len()])
    }
}

struct Series {
    label: String,
    points: Vec<[f64; 2]>,
    style: Style,
}

/// A 2D line plot assembled series by series, rendered on `render`.
pub struct SvgPlot {
    title: String,
    series: Vec<Series>,
}

impl SvgPlot {
    pub fn new(title: &str) -> Self {
        SvgPlot { title: title.into(), series: Vec::new() }
    }

    pub fn add(&mut self, label: &str, points: &[[f64; 2]], style: Style) -> &mut Self {
        self.series.push(Series { label: label.into(), points: points.to_vec(), style });
        self
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for s in &self.series {
            for p in &s.points {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        if !lo[0].is_finite() {
            return ([-1.0, -1.0], [1.0, 1.0]);
        }
        // keep degenerate extents drawable
        for a in 0..2 {
            if hi[a] - lo[a] < 1e-9 {
                lo[a] -= 1.0;
                hi[a] += 1.0;
            }
        }
        (lo, hi)
    }

    /// Render at the given pixel size. World y points up, so the vertical
    /// axis is flipped into SVG's y-down space; both axes share one scale.
    pub fn render(&self, width: f64, height: f64) -> String {
        let margin = 34.0;
        let (lo, hi) = self.bounds();
        let span = [hi[0] - lo[0], hi[1] - lo[1]];
        let scale =
            ((width - 2.0 * margin) / span[0]).min((height - 2.0 * margin) / span[1]);
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let to_px = |p: [f64; 2]| -> [f64; 2] {
            [
                width / 2.0 + (p[0] - center[0]) * scale,
                height / 2.0 - (p[1] - center[1]) * scale,
            ]
        };

        let mut out = String::new();
        let _ = write!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
             viewBox=\"0 0 {width} {height}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" \
             text-anchor=\"middle\">{}</text>\n",
            width / 2.0,
            escape(&self.title)
        );

        // light origin cross for orientation
        let o = to_px([0.0, 0.0]);
        let _ = write!(
            out,
            "<line x1=\"{:.1}\" y1=\"0\" x2=\"{:.1}\" y2=\"{height}\" stroke=\"#eee\"/>\n\
             <line x1=\"0\" y1=\"{:.1}\" x2=\"{width}\" y2=\"{:.1}\" stroke=\"#eee\"/>\n",
            o[0], o[0], o[1], o[1]
        );

        for s in &self.series {
            if s.points.is_empty() {
                continue;
            }
            let mut path = String::new();
            for p in &s.points {
                let px = to_px(*p);
                let _ = write!(path, "{:.2},{:.2} ", px[0], px[1]);
            }
            let dash = if s.style.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
            let _ = write!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\"{}/>\n",
                path.trim_end(),
                s.style.color,
                s.style.width,
                dash
            );
            if s.style.markers {
                for p in &s.points {
                    let px = to_px(*p);
                    let _ = write!(
                        out,
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.2\" fill=\"{}\"/>\n",
                        px[0], px[1], s.style.color
                    );
                }
            }
        }

        for (i, s) in self.series.iter().enumerate() {
            let y = 40.0 + 16.0 * i as f64;
            let _ = write!(
                out,
                "<line x1=\"10\" y1=\"{y}\" x2=\"34\" y2=\"{y}\" stroke=\"{}\" \
                 stroke-width=\"2\"/>\n\
                 <text x=\"40\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                s.style.color,
                y + 4.0,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Several sampled trajectories over a ground-truth overlay.
pub fn plot_fanout(title: &str, samples: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> String {
    let mut plot = SvgPlot::new(title);
    for (i, s) in samples.iter().enumerate() {
        plot.add(&format!("sample {i}"), s, Style::auto(i));
    }
    plot.add("ground truth", gt, Style { width: 2.5, ..Style::dashed("#000") });
    plot.render(640.0, 640.0)
}

/// Intermediate integration states, one labeled series per snapshot plus
/// the final trajectory.
pub fn plot_denoise(title: &str, snapshots: &[(f64, Vec<[f64; 2]>)], x0: &[[f64; 2]]) -> String {
    let mut plot = SvgPlot::new(title);
    for (i, (t, pts)) in snapshots.iter().enumerate() {
        plot.add(&format!("t = {t:.2}"), pts, Style::auto(i));
    }
    plot.add("final", x0, Style { width: 2.5, markers: true, ..Style::line("#000") });
    plot.render(640.0, 640.0)
}

/// Overlapping clips plus the chained trajectory they register into.
pub fn plot_chain(title: &str, clips: &[Vec<[f64; 2]>], stitched: &[[f64; 2]]) -> String {
    let mut plot = SvgPlot::new(title);
    for (i, c) in clips.iter().enumerate() {
        plot.add(&format!("clip {i}"), c, Style::auto(i));
    }
    plot.add("stitched", stitched, Style { width: 2.5, ..Style::dashed("#000") });
    plot.render(800.0, 640.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_world_to_pixels_with_flipped_y() {
        let mut plot = SvgPlot::new("map");
        plot.add("a", &[[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]], Style::line("#123456"));
        let svg = plot.render(640.0, 640.0);
        // equal-aspect square content: the higher world point sits higher
        // on screen, which is a smaller pixel y
        let first = svg.split("polyline points=\"").nth(1).unwrap();
        let pts: Vec<[f64; 2]> = first
            .split('"')
            .next()
            .unwrap()
            .split_whitespace()
            .map(|pair| {
                let mut it = pair.split(',').map(|v| v.parse::<f64>().unwrap());
                [it.next().unwrap(), it.next().unwrap()]
            })
            .collect();
        assert_eq!(pts.len(), 3);
        assert!((pts[1][0] - pts[0][0]).abs() > 100.0, "x span should fill the canvas");
        assert_eq!(pts[0][1], pts[1][1], "level points stay level");
        assert!(pts[2][1] < pts[1][1], "larger world y must render higher (smaller pixel y)");
        // equal aspect: 10m right equals 10m up in pixels
        let dx = pts[1][0] - pts[0][0];
        let dy = pts[1][1] - pts[2][1];
        assert!((dx - dy).abs() < 1e-9);
    }

    #[test]
    fn handles_degenerate_and_empty_input() {
        let svg = SvgPlot::new("empty").render(300.0, 200.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(!svg.contains("NaN"));

        let mut single = SvgPlot::new("dot");
        single.add("p", &[[3.0, 4.0]], Style::dotted("#000"));
        let svg = single.render(300.0, 200.0);
        assert!(svg.contains("circle"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn escapes_markup_in_labels() {
        let mut plot = SvgPlot::new("a < b & c");
        plot.add("x<y", &[[0.0, 0.0], [1.0, 1.0]], Style::line("#000"));
        let svg = plot.render(300.0, 200.0);
        assert!(svg.contains("a &lt; b &amp; c"));
        assert!(svg.contains("x&lt;y"));
    }

    #[test]
    fn presets_produce_expected_series() {
        let gt = vec![[0.0, 0.0], [1.0, 0.1], [2.0, 0.3]];
        let samples = vec![gt.clone(); 3];
        let svg = plot_fanout("fan", &samples, &gt);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("ground truth"));

        let snaps = vec![(1.0, gt.clone()), (0.5, gt.clone())];
        let svg = plot_denoise("steps", &snaps, &gt);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("t = 1.00"));

        let svg = plot_chain("chain", &samples, &gt);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("stitched"));
    }
}
