//! Hand-written SVG figures.
//!
//! Output depends only on the input rows, so the same CSV always renders to
//! the same bytes. Numbers are written with fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use tlab_core::theory::{
    finetune_transferability, linear_transferability, negative_transfer_region, ridge_transfer_ge,
    ridge_transferability,
};

use crate::error::{CliError, CliResult};
use crate::output::MetricsRow;
use crate::runner::Row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Panel {
    /// Theory mesh of T over (γ, θ) beside a sign-shaded top view of the data.
    Surface,
    /// T against γ, one series per θ.
    Slices,
    /// Transfer error against λ.
    Ridge,
    /// Normalized T over (μ, n) with predicted boundaries.
    Heatmap,
    /// T against the KL divergence of the task pair.
    ScatterKl,
    /// T against the empirical Wasserstein-1 distance.
    ScatterW1,
}

impl Panel {
    pub fn name(self) -> &'static str {
        match self {
            Panel::Surface => "surface",
            Panel::Slices => "slices",
            Panel::Ridge => "ridge",
            Panel::Heatmap => "heatmap",
            Panel::ScatterKl => "scatter_kl",
            Panel::ScatterW1 => "scatter_w1",
        }
    }

    pub fn needs_metrics(self) -> bool {
        matches!(self, Panel::ScatterKl | Panel::ScatterW1)
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;

struct Svg {
    buf: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        let mut buf = String::new();
        let _ = writeln!(
            buf,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(buf, r#"<rect width="100%" height="100%" fill="white"/>"#);
        Self { buf }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.buf,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="{width}"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.buf,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.buf,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}" stroke="{stroke}"/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64) {
        if pts.len() < 2 {
            return;
        }
        let mut p = String::new();
        for (x, y) in pts {
            let _ = write!(p, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            self.buf,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#,
            p.trim_end()
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(self.buf, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{s}</text>"#);
    }

    fn finish(mut self) -> String {
        self.buf.push_str("</svg>\n");
        self.buf
    }
}

/// Data-to-pixel map of one plotting area.
#[derive(Debug, Clone, Copy)]
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
    log_x: bool,
}

impl Frame {
    fn new(left: f64, top: f64, width: f64, height: f64, x: (f64, f64), y: (f64, f64)) -> Self {
        Self {
            left,
            top,
            width,
            height,
            x: widen(x),
            y: widen(y),
            log_x: false,
        }
    }

    fn tx(&self, v: f64) -> f64 {
        let (a, b, v) = if self.log_x {
            (self.x.0.ln(), self.x.1.ln(), v.ln())
        } else {
            (self.x.0, self.x.1, v)
        };
        self.left + (v - a) / (b - a) * self.width
    }

    fn ty(&self, v: f64) -> f64 {
        let v = v.clamp(self.y.0, self.y.1);
        self.top + self.height - (v - self.y.0) / (self.y.1 - self.y.0) * self.height
    }

    fn axes(&self, svg: &mut Svg, title: &str, xlabel: &str, ylabel: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        svg.line(l, t + h, l + w, t + h, "black", 1.0);
        svg.line(l, t, l, t + h, "black", 1.0);
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = if self.log_x {
                (self.x.0.ln() + f * (self.x.1.ln() - self.x.0.ln())).exp()
            } else {
                self.x.0 + f * (self.x.1 - self.x.0)
            };
            let px = self.tx(xv);
            svg.line(px, t + h, px, t + h + 4.0, "black", 1.0);
            svg.text(px, t + h + 16.0, "middle", &tick(xv));
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let py = self.ty(yv);
            svg.line(l - 4.0, py, l, py, "black", 1.0);
            svg.text(l - 6.0, py + 4.0, "end", &tick(yv));
        }
        svg.text(l + w / 2.0, t - 8.0, "middle", title);
        svg.text(l + w / 2.0, t + h + 32.0, "middle", xlabel);
        svg.text(l - 44.0, t + h / 2.0, "middle", ylabel);
    }

    fn zero_line(&self, svg: &mut Svg) {
        if self.y.0 < 0.0 && self.y.1 > 0.0 {
            let py = self.ty(0.0);
            svg.line(self.left, py, self.left + self.width, py, "#999999", 0.5);
        }
    }
}

fn widen((a, b): (f64, f64)) -> (f64, f64) {
    if !(a.is_finite() && b.is_finite()) {
        return (0.0, 1.0);
    }
    if (b - a).abs() < 1e-12 {
        let pad = if a == 0.0 { 1.0 } else { a.abs() * 0.1 };
        (a - pad, b + pad)
    } else {
        (a, b)
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn finite_range(vals: impl IntoIterator<Item = f64>) -> (f64, f64) {
    vals.into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Blue for positive, red for negative, black for a divergent value.
fn diverging(v: f64) -> String {
    if v.is_nan() {
        return "#dddddd".into();
    }
    if v.is_infinite() {
        return "#000000".into();
    }
    let s = v.abs() / (v.abs() + 0.1);
    let fade = (255.0 * (1.0 - s)).round() as u8;
    if v >= 0.0 {
        format!("#{fade:02x}{fade:02x}ff")
    } else {
        format!("#ff{fade:02x}{fade:02x}")
    }
}

/// Per-cell mean and standard deviation of a column over good rows.
struct CellStats {
    mean: f64,
    std: f64,
}

fn stats(vals: &[f64]) -> CellStats {
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    CellStats { mean, std }
}

/// Totally ordered wrapper so float coordinates can key a `BTreeMap`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn require(rows: &[Row], what: &str, f: impl Fn(&Row) -> bool) -> CliResult<()> {
    if rows.is_empty() || !rows.iter().all(f) {
        return Err(CliError::Usage(format!("panel needs rows with {what}")));
    }
    Ok(())
}

fn first_sigma(rows: &[Row]) -> f64 {
    rows.iter().find_map(|r| r.sigma).unwrap_or(0.0)
}

fn good(rows: &[Row]) -> impl Iterator<Item = &Row> {
    rows.iter().filter(|r| r.status.is_good())
}

/// Closed-form limit transferability for the row's method at `(gamma, theta)`.
fn limit_t(method: &str, gamma: f64, theta: f64, sigma: f64, lambda: f64) -> f64 {
    match method {
        "finetune" => finetune_transferability(gamma, theta),
        "ridge" => ridge_transferability(gamma, theta, sigma, lambda).to_f64(),
        _ => linear_transferability(gamma, theta, sigma).to_f64(),
    }
}

/// Sign changes of `values` along the increasing grid `xs`, located by linear
/// interpolation. Pairs across a divergence are skipped.
pub fn sign_changes(xs: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 1..xs.len() {
        let (a, b) = (values[k - 1], values[k]);
        if !(a.is_finite() && b.is_finite()) {
            continue;
        }
        if a == 0.0 {
            continue;
        }
        if (a < 0.0) != (b < 0.0) || b == 0.0 {
            out.push(xs[k - 1] + (xs[k] - xs[k - 1]) * a / (a - b));
        }
    }
    out
}

/// Mean transferability over the (γ, θ) grid at the first σ.
fn surface_grid(rows: &[Row]) -> (Vec<f64>, Vec<f64>, BTreeMap<(Key, Key), f64>) {
    let sigma = first_sigma(rows);
    let mut acc: BTreeMap<(Key, Key), Vec<f64>> = BTreeMap::new();
    for r in good(rows).filter(|r| r.sigma == Some(sigma) && r.lambda.unwrap_or(0.0) == 0.0) {
        acc.entry((Key(r.gamma.unwrap()), Key(r.theta.unwrap())))
            .or_default()
            .push(r.transferability);
    }
    let mut gammas: Vec<f64> = acc.keys().map(|k| k.0 .0).collect();
    let mut thetas: Vec<f64> = acc.keys().map(|k| k.1 .0).collect();
    gammas.dedup();
    thetas.sort_by(f64::total_cmp);
    thetas.dedup();
    let means = acc.into_iter().map(|(k, v)| (k, stats(&v).mean)).collect();
    (gammas, thetas, means)
}

fn surface(rows: &[Row]) -> CliResult<String> {
    require(rows, "gamma and theta", |r| r.gamma.is_some() && r.theta.is_some())?;
    let sigma = first_sigma(rows);
    let method = rows[0].method.clone();
    let (gammas, thetas, means) = surface_grid(rows);
    let mut svg = Svg::new(2.0 * WIDTH, HEIGHT);

    // left: oblique wireframe of the closed form, T clipped to [-1, 1]
    let (g0, g1) = widen((gammas[0], *gammas.last().unwrap()));
    let (t0, t1) = widen((thetas[0], *thetas.last().unwrap()));
    let project = |g: f64, t: f64, z: f64| {
        let u = (g - g0) / (g1 - g0);
        let v = (t - t0) / (t1 - t0);
        let z = z.clamp(-1.0, 1.0);
        (90.0 + 380.0 * u + 120.0 * v, 300.0 - 90.0 * v - 110.0 * z)
    };
    let steps = 24;
    let dense = |k: usize, lo: f64, hi: f64| lo + (hi - lo) * k as f64 / steps as f64;
    let theory = |g: f64, t: f64| limit_t(&method, g, t, sigma, 0.0);
    for i in 0..=steps {
        let t = dense(i, t0, t1);
        let pts: Vec<_> = (0..=steps).map(|j| {
            let g = dense(j, g0, g1);
            project(g, t, theory(g, t))
        }).collect();
        svg.polyline(&pts, "#7788aa", 0.6);
        let g = dense(i, g0, g1);
        let pts: Vec<_> = (0..=steps).map(|j| {
            let t = dense(j, t0, t1);
            project(g, t, theory(g, t))
        }).collect();
        svg.polyline(&pts, "#7788aa", 0.6);
    }
    for (&(Key(g), Key(t)), &m) in &means {
        let (x, y) = project(g, t, m);
        svg.circle(x, y, 2.5, &diverging(m), "black");
    }
    let base: Vec<_> = [(g0, t0), (g1, t0), (g1, t1), (g0, t1), (g0, t0)]
        .iter()
        .map(|&(g, t)| project(g, t, 0.0))
        .collect();
    svg.polyline(&base, "black", 0.8);
    svg.text(WIDTH / 2.0, 30.0, "middle", &format!("{method} transferability, theory mesh (sigma = {sigma})"));
    svg.text(WIDTH / 2.0, HEIGHT - 20.0, "middle", "gamma (right), theta (depth), T clipped to [-1, 1]");

    // right: top view, cells shaded by the sign of the mean, boundary of the closed form
    let frame = Frame::new(WIDTH + 80.0, 50.0, WIDTH - 130.0, HEIGHT - 120.0, (g0, g1), (t0, t1));
    let half = |v: &[f64], k: usize| -> (f64, f64) {
        let lo = if k == 0 { v[0] } else { 0.5 * (v[k - 1] + v[k]) };
        let hi = if k + 1 == v.len() { v[k] } else { 0.5 * (v[k] + v[k + 1]) };
        (lo, hi)
    };
    for (i, &g) in gammas.iter().enumerate() {
        for (j, &t) in thetas.iter().enumerate() {
            if let Some(&m) = means.get(&(Key(g), Key(t))) {
                let (ga, gb) = half(&gammas, i);
                let (ta, tb) = half(&thetas, j);
                let (x0, x1) = (frame.tx(ga), frame.tx(gb));
                let (y0, y1) = (frame.ty(tb), frame.ty(ta));
                svg.rect(x0, y0, (x1 - x0).max(1.0), (y1 - y0).max(1.0), &diverging(m));
            }
        }
    }
    if method == "linear" {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut ray = Vec::new();
        for k in 0..=60 {
            let t = t0 + (t1 - t0) * k as f64 / 60.0;
            for iv in negative_transfer_region(t, sigma) {
                if iv.hi.is_infinite() {
                    if iv.lo <= g1 {
                        ray.push((frame.tx(iv.lo.max(g0)), frame.ty(t)));
                    }
                } else {
                    lower.push((frame.tx(iv.lo.max(g0)), frame.ty(t)));
                    upper.push((frame.tx(iv.hi.min(g1)), frame.ty(t)));
                }
            }
        }
        for pts in [&lower, &upper, &ray] {
            svg.polyline(pts, "black", 1.5);
        }
    }
    frame.axes(&mut svg, "sign of mean T (blue > 0, red < 0)", "gamma", "theta");
    Ok(svg.finish())
}

fn series_colour(k: usize) -> &'static str {
    const PALETTE: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
    ];
    PALETTE[k % PALETTE.len()]
}

fn slices(rows: &[Row]) -> CliResult<String> {
    require(rows, "gamma and theta", |r| r.gamma.is_some() && r.theta.is_some())?;
    let sigma = first_sigma(rows);
    let method = rows[0].method.clone();
    let mut by_theta: BTreeMap<Key, BTreeMap<Key, Vec<f64>>> = BTreeMap::new();
    for r in good(rows).filter(|r| r.sigma == Some(sigma) && r.lambda.unwrap_or(0.0) == 0.0) {
        by_theta
            .entry(Key(r.theta.unwrap()))
            .or_default()
            .entry(Key(r.gamma.unwrap()))
            .or_default()
            .push(r.transferability);
    }
    let gammas = finite_range(by_theta.values().flat_map(|m| m.keys().map(|k| k.0)));
    let mut ys: Vec<f64> = Vec::new();
    for m in by_theta.values() {
        for v in m.values() {
            let s = stats(v);
            ys.extend([s.mean - s.std, s.mean + s.std]);
        }
    }
    let (ylo, yhi) = finite_range(ys);
    let (ylo, yhi) = (ylo.max(-2.0), yhi.min(2.0));
    let frame = Frame::new(80.0, 40.0, WIDTH - 200.0, HEIGHT - 100.0, gammas, (ylo.min(0.0), yhi.max(0.0)));
    let mut svg = Svg::new(WIDTH, HEIGHT);
    frame.zero_line(&mut svg);
    for (k, (Key(theta), cells)) in by_theta.iter().enumerate() {
        let colour = series_colour(k);
        // theory line on a dense grid, broken at the pole
        let mut seg = Vec::new();
        for i in 0..=200 {
            let g = frame.x.0 + (frame.x.1 - frame.x.0) * i as f64 / 200.0;
            let t = limit_t(&method, g, *theta, sigma, 0.0);
            if (g - 1.0).abs() < 0.02 || !t.is_finite() {
                svg.polyline(&seg, colour, 1.0);
                seg.clear();
                continue;
            }
            seg.push((frame.tx(g), frame.ty(t)));
        }
        svg.polyline(&seg, colour, 1.0);
        for (Key(g), vals) in cells {
            let s = stats(vals);
            if !s.mean.is_finite() {
                continue;
            }
            let x = frame.tx(*g);
            svg.line(x, frame.ty(s.mean - s.std), x, frame.ty(s.mean + s.std), colour, 1.0);
            svg.circle(x, frame.ty(s.mean), 3.0, colour, "black");
        }
        let ly = 50.0 + 16.0 * k as f64;
        svg.line(WIDTH - 110.0, ly - 4.0, WIDTH - 95.0, ly - 4.0, colour, 2.0);
        svg.text(WIDTH - 90.0, ly, "start", &format!("theta = {theta:.3}"));
    }
    frame.axes(
        &mut svg,
        &format!("{method} transferability, mean and std over seeds (sigma = {sigma})"),
        "gamma",
        "T",
    );
    Ok(svg.finish())
}

fn ridge(rows: &[Row]) -> CliResult<String> {
    require(rows, "lambda", |r| r.lambda.is_some() && r.theta.is_some() && r.gamma.is_some())?;
    let mut series: BTreeMap<(Key, Key), BTreeMap<Key, Vec<f64>>> = BTreeMap::new();
    for r in good(rows) {
        series
            .entry((Key(r.gamma.unwrap()), Key(r.theta.unwrap())))
            .or_default()
            .entry(Key(r.lambda.unwrap()))
            .or_default()
            .push(r.ge_transfer);
    }
    let lambdas = finite_range(series.values().flat_map(|m| m.keys().map(|k| k.0)));
    let mut ys = Vec::new();
    for m in series.values() {
        for v in m.values() {
            let s = stats(v);
            ys.extend([s.mean - s.std, s.mean + s.std]);
        }
    }
    for &(_, Key(theta)) in series.keys() {
        ys.extend([ridge_transfer_ge(theta, lambdas.0), ridge_transfer_ge(theta, lambdas.1)]);
    }
    let frame = Frame::new(80.0, 40.0, WIDTH - 220.0, HEIGHT - 100.0, lambdas, finite_range(ys));
    let mut svg = Svg::new(WIDTH, HEIGHT);
    for (k, ((Key(gamma), Key(theta)), cells)) in series.iter().enumerate() {
        let colour = series_colour(k);
        let pts: Vec<_> = (0..=100)
            .map(|i| {
                let l = frame.x.0 + (frame.x.1 - frame.x.0) * i as f64 / 100.0;
                (frame.tx(l), frame.ty(ridge_transfer_ge(*theta, l)))
            })
            .collect();
        svg.polyline(&pts, colour, 1.0);
        for (Key(l), vals) in cells {
            let s = stats(vals);
            let x = frame.tx(*l);
            svg.line(x, frame.ty(s.mean - s.std), x, frame.ty(s.mean + s.std), colour, 1.0);
            svg.circle(x, frame.ty(s.mean), 3.0, colour, "black");
        }
        let ly = 50.0 + 16.0 * k as f64;
        svg.line(WIDTH - 130.0, ly - 4.0, WIDTH - 115.0, ly - 4.0, colour, 2.0);
        svg.text(WIDTH - 110.0, ly, "start", &format!("g={gamma:.2} th={theta:.2}"));
    }
    frame.axes(&mut svg, "ridge linear transfer error, mean and std over seeds", "lambda", "ge");
    Ok(svg.finish())
}

/// `n*` where the scratch power law in `theory_scratch` meets `theory_transfer`.
fn predicted_boundary(rows: &[&Row]) -> Option<f64> {
    let perp = rows.first()?.theory_transfer;
    let mut pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.n? as f64, r.theory_scratch)))
        .filter(|(n, s)| *n > 0.0 && *s > 0.0 && s.is_finite())
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);
    let (&(n1, s1), &(n2, s2)) = (pts.first()?, pts.last()?);
    if n1 == n2 || !(perp > 0.0) {
        return None;
    }
    let nu = -(s2.ln() - s1.ln()) / (n2.ln() - n1.ln());
    let amplitude = s1 * n1.powf(nu);
    Some((amplitude / perp).powf(1.0 / nu))
}

fn heatmap(rows: &[Row]) -> CliResult<String> {
    require(rows, "mu and n", |r| r.mu.is_some() && r.n.is_some())?;
    let mut cells: BTreeMap<(Key, usize), Vec<f64>> = BTreeMap::new();
    for r in good(rows) {
        cells.entry((Key(r.mu.unwrap()), r.n.unwrap())).or_default().push(r.transferability);
    }
    let mut mus: Vec<f64> = cells.keys().map(|k| k.0 .0).collect();
    mus.dedup();
    let mut ns: Vec<usize> = cells.keys().map(|k| k.1).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut frame = Frame::new(
        80.0,
        40.0,
        WIDTH - 140.0,
        HEIGHT - 100.0,
        (ns[0] as f64 / 1.5, *ns.last().unwrap() as f64 * 1.5),
        (mus[0] - 0.05, mus.last().unwrap() + 0.05),
    );
    frame.log_x = true;
    let mut svg = Svg::new(WIDTH, HEIGHT);
    let dmu = if mus.len() > 1 { (mus[1] - mus[0]).abs() / 2.0 } else { 0.05 };
    for ((Key(mu), n), vals) in &cells {
        let m = stats(vals).mean;
        let x0 = frame.tx(*n as f64 / 1.2);
        let x1 = frame.tx(*n as f64 * 1.2);
        let y0 = frame.ty(mu + dmu);
        let y1 = frame.ty(mu - dmu);
        svg.rect(x0, y0, x1 - x0, y1 - y0, &diverging(m));
    }
    for &mu in &mus {
        let rows_mu: Vec<&Row> = rows.iter().filter(|r| r.mu == Some(mu)).collect();
        if let Some(nstar) = predicted_boundary(&rows_mu) {
            if nstar >= frame.x.0 && nstar <= frame.x.1 {
                svg.circle(frame.tx(nstar), frame.ty(mu), 6.0, "#888888", "#444444");
            }
        }
    }
    frame.axes(
        &mut svg,
        "normalized T over (mu, n); gray circles: predicted boundary",
        "n (log scale)",
        "mu",
    );
    Ok(svg.finish())
}

fn scatter(rows: &[Row], metrics: &[MetricsRow], use_kl: bool) -> CliResult<String> {
    let mut t_by_cell: BTreeMap<(Key, Key, Key), Vec<f64>> = BTreeMap::new();
    for r in good(rows) {
        if let (Some(g), Some(t), Some(s)) = (r.gamma, r.theta, r.sigma) {
            t_by_cell.entry((Key(g), Key(t), Key(s))).or_default().push(r.transferability);
        }
    }
    let pts: Vec<(f64, f64)> = metrics
        .iter()
        .filter_map(|m| {
            let vals = t_by_cell.get(&(Key(m.gamma), Key(m.theta), Key(m.sigma)))?;
            Some((if use_kl { m.kl } else { m.w1 }, stats(vals).mean))
        })
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(CliError::Usage("no cells shared between results and metrics".into()));
    }
    let (ylo, yhi) = finite_range(pts.iter().map(|p| p.1));
    let frame = Frame::new(
        80.0,
        40.0,
        WIDTH - 140.0,
        HEIGHT - 100.0,
        finite_range(pts.iter().map(|p| p.0)),
        (ylo.min(0.0), yhi.max(0.0)),
    );
    let mut svg = Svg::new(WIDTH, HEIGHT);
    frame.zero_line(&mut svg);
    for (x, y) in &pts {
        svg.circle(frame.tx(*x), frame.ty(*y), 3.0, &diverging(*y), "black");
    }
    let label = if use_kl { "KL divergence" } else { "empirical W1" };
    frame.axes(&mut svg, &format!("mean T against {label}"), label, "T");
    Ok(svg.finish())
}

/// Renders `panel` from result rows; scatter panels also need `metrics`.
pub fn render(panel: Panel, rows: &[Row], metrics: Option<&[MetricsRow]>) -> CliResult<String> {
    match panel {
        Panel::Surface => surface(rows),
        Panel::Slices => slices(rows),
        Panel::Ridge => ridge(rows),
        Panel::Heatmap => heatmap(rows),
        Panel::ScatterKl | Panel::ScatterW1 => {
            let metrics = metrics.ok_or_else(|| CliError::Usage("scatter panels need metrics.csv".into()))?;
            scatter(rows, metrics, panel == Panel::ScatterKl)
        }
    }
}
