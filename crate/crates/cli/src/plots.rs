//! Hand-written SVG figures, each drawn from the same rows its CSV holds.
//!
//! Stroke conventions for trajectory figures: observed history is a solid
//! black line, ground truth a dashed green line, generated samples thin
//! translucent blue lines and the sample mean a thick red line. Axes are in
//! meters with equal aspect.

use std::fmt::Write as _;

use scan_core::autodiff::Tensor;
use scan_core::geometry::{BinSpec, Point};
use scan_core::spatial_attention::domain_csv;

const OBSERVED: &str = "#000000";
const TRUTH: &str = "#2e8b57";
const SAMPLE: &str = "#1f5fbf";
const MEAN: &str = "#d62728";

struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        let mut s = Svg {
            width,
            height,
            body: String::new(),
        };
        s.rect(0.0, 0.0, width, height, "#ffffff", None);
        s
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: Option<&str>) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" stroke="{}"/>"#,
            stroke.unwrap_or("none")
        );
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="{width}"/>"#,
            a.0, a.1, b.0, b.1
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dash: bool, opacity: f64) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" stroke-opacity="{opacity}"{}/>"#,
            coords.join(" "),
            if dash { r#" stroke-dasharray="5,3""# } else { "" }
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn path(&mut self, d: &str, fill: &str, stroke: &str) {
        let _ = writeln!(self.body, r#"<path d="{d}" fill="{fill}" stroke="{stroke}" stroke-width="0.5"/>"#);
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Data-to-pixel mapping with equal aspect and a y axis pointing up.
struct Frame {
    origin: (f64, f64),
    size: f64,
    lo: Point,
    span: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = Point>, origin: (f64, f64), size: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !lo[0].is_finite() {
            lo = [-1.0, -1.0];
            hi = [1.0, 1.0];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-3) * 1.1;
        let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        Frame {
            origin,
            size,
            lo: [centre[0] - span / 2.0, centre[1] - span / 2.0],
            span,
        }
    }

    fn map(&self, p: Point) -> (f64, f64) {
        (
            self.origin.0 + (p[0] - self.lo[0]) / self.span * self.size,
            self.origin.1 + self.size - (p[1] - self.lo[1]) / self.span * self.size,
        )
    }

    fn axes(&self, svg: &mut Svg, ticks: bool) {
        let (x0, y0) = self.origin;
        svg.rect(x0, y0, self.size, self.size, "none", Some("#888888"));
        if !ticks {
            return;
        }
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let vx = self.lo[0] + f * self.span;
            let vy = self.lo[1] + f * self.span;
            let px = x0 + f * self.size;
            let py = y0 + self.size - f * self.size;
            svg.line((px, y0 + self.size), (px, y0 + self.size + 4.0), "#444444", 1.0);
            svg.text(px, y0 + self.size + 16.0, 10.0, "middle", &format!("{vx:.1}"));
            svg.line((x0 - 4.0, py), (x0, py), "#444444", 1.0);
            svg.text(x0 - 6.0, py + 3.0, 10.0, "end", &format!("{vy:.1}"));
        }
        svg.text(x0 + self.size / 2.0, y0 + self.size + 32.0, 11.0, "middle", "x [m]");
        svg.text(x0 - 36.0, y0 + self.size / 2.0, 11.0, "middle", "y [m]");
    }
}

type Polyline<'a> = ((&'a str, u64, usize), Vec<(f64, f64)>);

/// One row of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajRow {
    pub ped_id: u64,
    pub kind: &'static str,
    pub sample: usize,
    pub step: usize,
    pub point: Point,
}

/// A scene with its generated futures.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlot {
    pub title: String,
    pub ped_ids: Vec<u64>,
    /// `[ped][step]`.
    pub observed: Vec<Vec<Point>>,
    /// `[ped][step]`, only steps where `truth_mask` holds are drawn.
    pub truth: Vec<Vec<Point>>,
    pub truth_mask: Vec<Vec<bool>>,
    /// `[sample][ped][step]`.
    pub samples: Vec<Vec<Vec<Point>>>,
}

impl ScenePlot {
    /// Per-pedestrian, per-step mean over samples.
    pub fn mean(&self) -> Vec<Vec<Point>> {
        let Some(first) = self.samples.first() else {
            return Vec::new();
        };
        let k = self.samples.len() as f64;
        first
            .iter()
            .enumerate()
            .map(|(p, steps)| {
                (0..steps.len())
                    .map(|t| {
                        let s = self.samples.iter().fold([0.0, 0.0], |a, s| [a[0] + s[p][t][0], a[1] + s[p][t][1]]);
                        [s[0] / k, s[1] / k]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn rows(&self) -> Vec<TrajRow> {
        let mut rows = Vec::new();
        let mut push = |ped: usize, kind, sample, steps: &[Point], mask: Option<&[bool]>| {
            for (t, &pt) in steps.iter().enumerate() {
                if mask.is_none_or(|m| m[t]) {
                    rows.push(TrajRow {
                        ped_id: self.ped_ids[ped],
                        kind,
                        sample,
                        step: t,
                        point: pt,
                    });
                }
            }
        };
        for (p, o) in self.observed.iter().enumerate() {
            push(p, "observed", 0, o, None);
        }
        for (p, t) in self.truth.iter().enumerate() {
            push(p, "truth", 0, t, Some(&self.truth_mask[p]));
        }
        for (i, s) in self.samples.iter().enumerate() {
            for (p, steps) in s.iter().enumerate() {
                push(p, "sample", i, steps, None);
            }
        }
        if self.samples.len() > 1 {
            for (p, steps) in self.mean().iter().enumerate() {
                push(p, "mean", 0, steps, None);
            }
        }
        rows
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("ped_id,kind,sample,step,x,y\n");
        for r in self.rows() {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.ped_id, r.kind, r.sample, r.step, r.point[0], r.point[1]);
        }
        out
    }

    fn draw(&self, svg: &mut Svg, origin: (f64, f64), size: f64, ticks: bool) {
        let rows = self.rows();
        let frame = Frame::fit(rows.iter().map(|r| r.point), origin, size);
        frame.axes(svg, ticks);
        let mut groups: Vec<Polyline> = Vec::new();
        for r in &rows {
            let key = (r.kind, r.ped_id, r.sample);
            match groups.last_mut() {
                Some((k, pts)) if *k == key => pts.push(frame.map(r.point)),
                _ => groups.push((key, vec![frame.map(r.point)])),
            }
        }
        for ((kind, _, _), pts) in &groups {
            match *kind {
                "observed" => svg.polyline(pts, OBSERVED, 2.0, false, 1.0),
                "truth" => svg.polyline(pts, TRUTH, 2.0, true, 1.0),
                "sample" => svg.polyline(pts, SAMPLE, 1.0, false, 0.35),
                _ => svg.polyline(pts, MEAN, 2.5, false, 1.0),
            }
        }
        svg.text(origin.0 + size / 2.0, origin.1 - 8.0, 13.0, "middle", &self.title);
    }

    pub fn svg(&self) -> String {
        let mut svg = Svg::new(520.0, 560.0);
        self.draw(&mut svg, (60.0, 40.0), 420.0, true);
        legend(&mut svg, 60.0, 530.0);
        svg.finish()
    }
}

fn legend(svg: &mut Svg, x: f64, y: f64) {
    let items = [
        ("observed", OBSERVED, false),
        ("ground truth", TRUTH, true),
        ("samples", SAMPLE, false),
        ("mean", MEAN, false),
    ];
    for (i, (label, color, dash)) in items.iter().enumerate() {
        let x = x + i as f64 * 110.0;
        svg.polyline(&[(x, y), (x + 24.0, y)], color, 2.0, *dash, 1.0);
        svg.text(x + 30.0, y + 4.0, 11.0, "start", label);
    }
}

/// Title of one diversity cell: `{k}V-{λ}`.
pub fn fan_title(k: usize, lambda: f64) -> String {
    format!("{k}V-{lambda}")
}

/// Grid of scene plots over `(k, λ)`: rows are distinct `k`, columns
/// distinct `λ`, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct FanGrid {
    pub cells: Vec<(usize, f64, ScenePlot)>,
}

impl FanGrid {
    pub fn csv(&self) -> String {
        let mut out = String::from("k,lambda,ped_id,kind,sample,step,x,y\n");
        for (k, lambda, plot) in &self.cells {
            for r in plot.rows() {
                let _ = writeln!(
                    out,
                    "{k},{lambda},{},{},{},{},{},{}",
                    r.ped_id, r.kind, r.sample, r.step, r.point[0], r.point[1]
                );
            }
        }
        out
    }

    pub fn svg(&self) -> String {
        let mut ks: Vec<usize> = Vec::new();
        let mut ls: Vec<f64> = Vec::new();
        for (k, l, _) in &self.cells {
            if !ks.contains(k) {
                ks.push(*k);
            }
            if !ls.contains(l) {
                ls.push(*l);
            }
        }
        let cell = 220.0;
        let pad = 30.0;
        let mut svg = Svg::new(ls.len().max(1) as f64 * (cell + pad) + pad, ks.len().max(1) as f64 * (cell + pad) + 2.0 * pad + 20.0);
        for (k, l, plot) in &self.cells {
            let row = ks.iter().position(|x| x == k).unwrap_or(0) as f64;
            let col = ls.iter().position(|x| x == l).unwrap_or(0) as f64;
            let mut titled = plot.clone();
            titled.title = fan_title(*k, *l);
            titled.draw(&mut svg, (pad + col * (cell + pad), 2.0 * pad + row * (cell + pad)), cell, false);
        }
        let y = svg.height - 10.0;
        legend(&mut svg, pad, y);
        svg.finish()
    }
}

fn heat_color(f: f64) -> String {
    let f = f.clamp(0.0, 1.0);
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = f * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let t = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let c = |u: f64, v: f64| (u + (v - u) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

/// The domain grid as a polar heatmap: bearing bins are angular sectors
/// (0° pointing right, counterclockwise), heading bins concentric rings
/// from the centre outwards.
pub fn domain_svg(grid: &Tensor, spec: &BinSpec) -> String {
    let (m, n) = (spec.m, spec.n);
    let (lo, hi) = grid
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let size = 520.0;
    let centre = (260.0, 280.0);
    let (r0, r1) = (30.0, 220.0);
    let ring = (r1 - r0) / n as f64;
    let mut svg = Svg::new(size + 120.0, size + 40.0);
    let pt = |r: f64, deg: f64| {
        let a = deg.to_radians();
        (centre.0 + r * a.cos(), centre.1 - r * a.sin())
    };
    for i in 0..m {
        let a0 = i as f64 * spec.delta_theta;
        let a1 = a0 + spec.delta_theta;
        for j in 0..n {
            let v = grid.values[i * n + j];
            let (ri, ro) = (r0 + j as f64 * ring, r0 + (j + 1) as f64 * ring);
            let p = [pt(ro, a0), pt(ro, a1), pt(ri, a1), pt(ri, a0)];
            let large = if spec.delta_theta > 180.0 { 1 } else { 0 };
            let d = format!(
                "M {:.2} {:.2} A {ro:.2} {ro:.2} 0 {large} 0 {:.2} {:.2} L {:.2} {:.2} A {ri:.2} {ri:.2} 0 {large} 1 {:.2} {:.2} Z",
                p[0].0, p[0].1, p[1].0, p[1].1, p[2].0, p[2].1, p[3].0, p[3].1
            );
            svg.path(&d, &heat_color((v - lo) / range), "#ffffff");
        }
        let (lx, ly) = pt(r1 + 16.0, a0);
        svg.text(lx, ly + 4.0, 10.0, "middle", &format!("{a0}°"));
    }
    svg.text(centre.0, 20.0, 13.0, "middle", "pedestrian domain S [m]: sector = relative bearing, ring = relative heading");
    let bar_x = size + 40.0;
    for s in 0..50 {
        let f = s as f64 / 49.0;
        svg.rect(bar_x, 460.0 - f * 360.0, 20.0, 360.0 / 49.0 + 0.5, &heat_color(f), None);
    }
    svg.text(bar_x + 10.0, 486.0, 10.0, "middle", &format!("{lo:.3}"));
    svg.text(bar_x + 10.0, 90.0, 10.0, "middle", &format!("{hi:.3}"));
    svg.finish()
}

/// `m` rows by `n` columns of domain values.
pub fn domain_table(grid: &Tensor) -> String {
    domain_csv(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use scan_core::autodiff::Shape;

    fn plot() -> ScenePlot {
        ScenePlot {
            title: "t".into(),
            ped_ids: vec![7],
            observed: vec![vec![[0.0, 0.0], [1.0, 0.0]]],
            truth: vec![vec![[2.0, 0.0], [3.0, 0.0]]],
            truth_mask: vec![vec![true, false]],
            samples: vec![vec![vec![[2.0, 1.0], [3.0, 1.0]]], vec![vec![[2.0, -1.0], [3.0, -3.0]]]],
        }
    }

    #[test]
    fn csv_rows_and_mean() {
        let p = plot();
        let csv = p.csv();
        assert!(csv.starts_with("ped_id,kind,sample,step,x,y\n"));
        assert_eq!(csv.lines().filter(|l| l.contains(",truth,")).count(), 1);
        assert!(csv.contains("7,mean,0,1,3,-1\n"));
        assert!(p.svg().contains("<polyline"));
    }

    #[test]
    fn fan_titles() {
        assert_eq!(fan_title(4, 1.0), "4V-1");
        assert_eq!(fan_title(20, 0.5), "20V-0.5");
        let grid = FanGrid {
            cells: vec![(1, 0.0, plot()), (4, 1.0, plot())],
        };
        let svg = grid.svg();
        assert!(svg.contains(">1V-0<") && svg.contains(">4V-1<"));
        assert!(grid.csv().lines().nth(1).unwrap().starts_with("1,0,7,observed"));
    }

    #[test]
    fn domain_grid_renders_every_cell() {
        let spec = BinSpec::default();
        let t = Tensor::new(Shape::matrix(12, 12), (0..144).map(|i| i as f64).collect()).unwrap();
        assert_eq!(domain_svg(&t, &spec).matches("<path").count(), 144);
        assert_eq!(domain_table(&t).lines().count(), 12);
    }
}
