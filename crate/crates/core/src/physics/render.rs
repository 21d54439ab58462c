//! CSV tables and minimal hand-written SVG figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{BenchRow, DissipationFit, EnergyRow, SpectrumReport, UniversalityReport};
use crate::datagen::container::write_atomic;
use crate::error::Result;

pub fn spectrum_csv(report: &SpectrumReport) -> String {
    let mut s = String::from("kx,ky,ksq,re,im,branch\n");
    for p in &report.rows {
        let _ = writeln!(s, "{},{},{},{:e},{:e},{}", p.kx, p.ky, p.ksq, p.lambda.re, p.lambda.im, p.branch);
    }
    s
}

/// Dominant fit first (`branch` = `dominant`), then one row per branch.
pub fn fit_csv(fit: &DissipationFit) -> String {
    let mut s = String::from("slope,intercept,r2,branch\n");
    let d = &fit.dominant;
    let _ = writeln!(s, "{:e},{:e},{:e},dominant", d.slope, d.intercept, d.r_squared);
    for b in &fit.branches {
        let _ = writeln!(s, "{:e},{:e},{:e},{}", b.fit.slope, b.fit.intercept, b.fit.r_squared, b.branch);
    }
    s
}

pub fn energy_csv(rows: &[EnergyRow]) -> String {
    let mut s = String::from("t,enstrophy,latent_energy\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:e}", r.t, r.enstrophy, r.latent_energy);
    }
    s
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("horizon,wall_ms,expm_calls\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{}", r.horizon, r.wall_ms, r.expm_calls);
    }
    s
}

pub fn universality_csv(rep: &UniversalityReport) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "cosine_sim_s,{:e}", rep.cosine_sim_s);
    let _ = writeln!(s, "r2_singvals,{:e}", rep.r2_singvals);
    let _ = writeln!(s, "r2_sorted_d,{:e}", rep.r2_sorted_d);
    let _ = writeln!(s, "r2_sorted_alpha,{:e}", rep.r2_sorted_alpha);
    s
}

pub fn profiles_csv(rep: &UniversalityReport) -> String {
    let p = &rep.profiles;
    let mut s = String::from("index,singvals_a,singvals_b,d_a,d_b,alpha_a,alpha_b\n");
    for i in 0..p.singvals_a.len() {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            i, p.singvals_a[i], p.singvals_b[i], p.d_a[i], p.d_b[i], p.alpha_a[i], p.alpha_b[i]
        );
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open_svg(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-size="10">{:.3e}</text>"#, H - PAD + 14.0, f.x0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.3e}</text>"#, W - PAD, H - PAD + 14.0, f.x1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.3e}</text>"#, PAD - 4.0, H - PAD, f.y0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.3e}</text>"#, PAD - 4.0, PAD + 8.0, f.y1);
    s
}

/// Blue (0) to red (1).
fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    format!("rgb({},{},{})", (255.0 * t) as u8, 64, (255.0 * (1.0 - t)) as u8)
}

fn polyline(f: &Frame, pts: &[(f64, f64)], stroke: &str) -> String {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    format!(r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, stroke, coords.join(" "))
}

/// Complex-plane scatter of every eigenvalue, colored by `|k|^2`.
pub fn spectrum_svg(report: &SpectrumReport) -> String {
    let f = Frame::fit(
        report.rows.iter().map(|p| p.lambda.re),
        report.rows.iter().map(|p| p.lambda.im),
    );
    let kmax = report.rows.iter().map(|p| p.ksq).fold(0.0, f64::max);
    let mut s = open_svg("Generator eigenvalues", "Re(lambda)", "Im(lambda)", &f);
    for p in &report.rows {
        let c = if kmax > 0.0 { p.ksq / kmax } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<circle class="eig" cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
            f.px(p.lambda.re),
            f.py(p.lambda.im),
            color(c)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Dominant `Re(lambda)` against `|k|^2` with the fitted line.
pub fn fit_svg(fit: &DissipationFit) -> String {
    let ys = fit
        .points
        .iter()
        .map(|p| p.1)
        .chain(fit.points.iter().map(|p| fit.dominant.slope * p.0 + fit.dominant.intercept));
    let f = Frame::fit(fit.points.iter().map(|p| p.0), ys);
    let title = format!("Dominant decay vs |k|^2 (R^2 = {:.3})", fit.dominant.r_squared);
    let mut s = open_svg(&title, "|k|^2", "Re(lambda)", &f);
    for &(x, y) in &fit.points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="black"/>"#, f.px(x), f.py(y));
    }
    let line = [
        (f.x0, fit.dominant.slope * f.x0 + fit.dominant.intercept),
        (f.x1, fit.dominant.slope * f.x1 + fit.dominant.intercept),
    ];
    s.push_str(&polyline(&f, &line, "red"));
    s.push_str("\n</svg>\n");
    s
}

fn lines_svg(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let all = series.iter().flat_map(|(_, pts)| pts.iter().cloned());
    let f = Frame::fit(all.clone().map(|p| p.0), all.map(|p| p.1));
    let palette = ["black", "red", "blue", "green", "purple", "orange"];
    let mut s = open_svg(title, xlabel, ylabel, &f);
    for (i, (name, pts)) in series.iter().enumerate() {
        let stroke = palette[i % palette.len()];
        s.push_str(&polyline(&f, pts, stroke));
        s.push('\n');
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" fill="{}">{}</text>"#,
            PAD + 6.0,
            PAD + 14.0 + 12.0 * i as f64,
            stroke,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Normalized profile overlays for both models.
pub fn profiles_svg(rep: &UniversalityReport) -> String {
    let idx = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect::<Vec<_>>();
    let p = &rep.profiles;
    lines_svg(
        "Normalized generator profiles",
        "index",
        "normalized value",
        &[
            ("singvals A", idx(&p.singvals_a)),
            ("singvals B", idx(&p.singvals_b)),
            ("sorted d A", idx(&p.d_a)),
            ("sorted d B", idx(&p.d_b)),
            ("sorted alpha A", idx(&p.alpha_a)),
            ("sorted alpha B", idx(&p.alpha_b)),
        ],
    )
}

pub fn energy_svg(rows: &[EnergyRow]) -> String {
    lines_svg(
        "Rollout energy",
        "t",
        "energy",
        &[
            ("decoded enstrophy", rows.iter().map(|r| (r.t as f64, r.enstrophy)).collect()),
            ("latent energy", rows.iter().map(|r| (r.t as f64, r.latent_energy)).collect()),
        ],
    )
}

pub fn bench_svg(rows: &[BenchRow]) -> String {
    lines_svg(
        "Evaluation time vs horizon",
        "horizon",
        "wall ms",
        &[("median wall ms", rows.iter().map(|r| (r.horizon, r.wall_ms)).collect())],
    )
}

/// Writes `(file name, contents)` pairs into `dir`; returns the paths.
pub fn write_files(dir: &Path, files: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut out = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

pub fn render_spectrum(report: &SpectrumReport, dir: &Path) -> Result<Vec<PathBuf>> {
    write_files(dir, &[("spectrum.csv", spectrum_csv(report)), ("spectrum.svg", spectrum_svg(report))])
}

pub fn render_fit(fit: &DissipationFit, dir: &Path) -> Result<Vec<PathBuf>> {
    write_files(dir, &[("fit.csv", fit_csv(fit)), ("fit.svg", fit_svg(fit))])
}

pub fn render_universality(rep: &UniversalityReport, dir: &Path) -> Result<Vec<PathBuf>> {
    write_files(
        dir,
        &[
            ("universality.csv", universality_csv(rep)),
            ("profiles.csv", profiles_csv(rep)),
            ("profiles.svg", profiles_svg(rep)),
        ],
    )
}

pub fn render_energy(rows: &[EnergyRow], dir: &Path) -> Result<Vec<PathBuf>> {
    write_files(dir, &[("energy.csv", energy_csv(rows)), ("energy.svg", energy_svg(rows))])
}

pub fn render_bench(rows: &[BenchRow], dir: &Path) -> Result<Vec<PathBuf>> {
    write_files(dir, &[("bench.csv", bench_csv(rows)), ("bench.svg", bench_svg(rows))])
}
