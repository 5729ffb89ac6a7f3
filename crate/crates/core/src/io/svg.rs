//! Hand-emitted SVG charts.

use std::fmt::Write;

use super::report::{EpisodeTrace, ModeSummary};

const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 150.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const GAP: f64 = 44.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" font-size="13" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        esc(title)
    );
}

/// Frame and y ticks of one panel whose plot area starts at `top`.
fn panel_frame(out: &mut String, top: f64, label: &str, y_max: f64) {
    let w = WIDTH - MARGIN_L - MARGIN_R;
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_L}" y="{top}" width="{w}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = top + PANEL_H - PANEL_H * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.2}" x2="{MARGIN_L}" y2="{y:.2}" stroke="#444"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_L - 4.0,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        top + PANEL_H / 2.0,
        top + PANEL_H / 2.0,
        esc(label)
    );
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 10.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * p)
        .find(|&c| c >= v)
        .unwrap_or(10.0 * p)
}

/// Grouped bars of success rate, mean peak force and mean expert calls per mode.
pub fn ablation_chart(rows: &[ModeSummary]) -> String {
    let metrics: [(&str, fn(&ModeSummary) -> f64, Option<f64>); 3] = [
        ("success rate", |r| r.success_rate, Some(1.0)),
        ("mean peak force (N)", |r| r.mean_peak_force, None),
        ("mean AE calls / episode", |r| r.mean_ae_calls, None),
    ];
    let height = 36.0 + metrics.len() as f64 * (PANEL_H + GAP);
    let mut out = String::new();
    let title = rows
        .first()
        .map_or("ablation".to_string(), |r| format!("{} ablation", r.task));
    header(&mut out, height, &title);
    let w = WIDTH - MARGIN_L - MARGIN_R;
    let slot = w / rows.len().max(1) as f64;
    for (p, (label, get, fixed)) in metrics.iter().enumerate() {
        let top = 36.0 + p as f64 * (PANEL_H + GAP);
        let y_max = fixed.unwrap_or_else(|| nice_max(rows.iter().map(get).fold(0.0, f64::max)));
        panel_frame(&mut out, top, label, y_max);
        for (i, r) in rows.iter().enumerate() {
            let v = get(r);
            let h = PANEL_H * (v / y_max).clamp(0.0, 1.0);
            let x = MARGIN_L + slot * i as f64 + 0.2 * slot;
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                top + PANEL_H - h,
                0.6 * slot,
                if r.mode == crate::runtime::ScheduleMode::Adaptive { "#c0392b" } else { "#2c6fbb" },
                x + 0.3 * slot,
                top + PANEL_H - h - 4.0,
                fmt_tick(v),
                x + 0.3 * slot,
                top + PANEL_H + 14.0,
                r.mode
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, step: bool) {
    if pts.is_empty() {
        return;
    }
    let mut d = String::new();
    for (i, &(x, y)) in pts.iter().enumerate() {
        if i > 0 && step {
            let _ = write!(d, "{x:.2},{:.2} ", pts[i - 1].1);
        }
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.4"/>"#,
        d.trim_end()
    );
}

/// Three panels on a shared step axis: sensed force norm, label and
/// predicted variance, and the scheduled expert calls per cycle.
pub fn trace_chart(trace: &EpisodeTrace) -> String {
    let ep = &trace.episode;
    let norms = trace.force_norms();
    let steps = norms.len().max(1) as f64;
    let height = 36.0 + 3.0 * (PANEL_H + GAP);
    let title = format!(
        "{} seed {} ({}, {})",
        trace.task,
        ep.seed,
        trace.mode,
        if ep.success { "success" } else { "failure" }
    );
    let mut out = String::new();
    header(&mut out, height, &title);
    let w = WIDTH - MARGIN_L - MARGIN_R;
    let x_of = |s: f64| MARGIN_L + w * s / steps;
    let tops: Vec<f64> = (0..3).map(|p| 36.0 + p as f64 * (PANEL_H + GAP)).collect();

    let f_max = nice_max(norms.iter().cloned().fold(0.0, f64::max));
    panel_frame(&mut out, tops[0], "force norm (N)", f_max);
    let y0 = |v: f64, top: f64, m: f64| top + PANEL_H - PANEL_H * (v / m).clamp(0.0, 1.0);
    let pts: Vec<_> = norms
        .iter()
        .enumerate()
        .map(|(i, &v)| (x_of(i as f64), y0(v, tops[0], f_max)))
        .collect();
    polyline(&mut out, &pts, "#333", false);

    panel_frame(&mut out, tops[1], "variance label / prediction", 1.0);
    if let Some(labels) = trace.labels() {
        let pts: Vec<_> = labels
            .iter()
            .enumerate()
            .map(|(i, &v)| (x_of(i as f64), y0(v, tops[1], 1.0)))
            .collect();
        polyline(&mut out, &pts, "#2c6fbb", false);
    }
    let mut start = 0usize;
    let mut nu_pts = Vec::new();
    let mut n_pts = Vec::new();
    let n_top = trace.n_max.max(1) as f64;
    for c in &ep.cycles {
        nu_pts.push((x_of(start as f64), y0(c.nu_hat, tops[1], 1.0)));
        n_pts.push((x_of(start as f64), y0(c.n_t as f64, tops[2], n_top)));
        start += c.steps.len();
    }
    if let Some(last) = ep.cycles.last() {
        nu_pts.push((x_of(start as f64), y0(last.nu_hat, tops[1], 1.0)));
        n_pts.push((x_of(start as f64), y0(last.n_t as f64, tops[2], n_top)));
    }
    polyline(&mut out, &nu_pts, "#c0392b", true);

    panel_frame(&mut out, tops[2], "scheduled n_t", n_top);
    polyline(&mut out, &n_pts, "#c0392b", true);

    if let Some(s) = ep.first_contact_step {
        let x = x_of(s as f64);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##,
            tops[0],
            tops[2] + PANEL_H
        );
    }
    let bottom = tops[2] + PANEL_H;
    for k in 0..=5 {
        let s = steps * k as f64 / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.0}</text>"#,
            x_of(s),
            bottom + 14.0,
            s
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">action step (30 Hz)</text>"#,
        MARGIN_L + w / 2.0,
        bottom + 30.0
    );
    out.push_str("</svg>\n");
    out
}
