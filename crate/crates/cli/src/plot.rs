//! Static SVG line charts of ablation tables.

use std::fmt::Write as _;

use esi_core::downstream::{AblationKind, AblationTable, COMPONENTS};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 52.0;

struct Panel<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    points: Vec<(f64, f64)>,
    /// Tick labels at x = 0, 1, ... instead of numeric ticks.
    categories: Option<Vec<String>>,
    /// Dashed horizontal reference line.
    reference: Option<(&'a str, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// About five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{}k", v / 1000.0)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    (lo - pad, hi + pad)
}

fn draw_panel(out: &mut String, p: &Panel, ox: f64) {
    let (x0, y0) = (ox + MARGIN_L, MARGIN_T);
    let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let (xlo, xhi) = match &p.categories {
        Some(c) => (-0.5, c.len() as f64 - 0.5),
        None => range(p.points.iter().map(|q| q.0)),
    };
    let (ylo, yhi) = range(p.points.iter().map(|q| q.1).chain(p.reference.map(|r| r.1)));
    let sx = |x: f64| x0 + (x - xlo) / (xhi - xlo) * w;
    let sy = |y: f64| y0 + h - (y - ylo) / (yhi - ylo) * h;

    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        x0 + w / 2.0,
        esc(p.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.1}" y="{y0:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/>"##
    );
    for t in ticks(ylo, yhi) {
        let y = sy(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##,
            x0 + w,
            x0 - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let xt: Vec<(f64, String)> = match &p.categories {
        Some(c) => c.iter().enumerate().map(|(i, l)| (i as f64, l.clone())).collect(),
        None => ticks(xlo, xhi).into_iter().map(|t| (t, fmt_tick(t))).collect(),
    };
    for (t, label) in xt {
        let x = sx(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"##,
            y0 + h,
            y0 + h + 5.0,
            y0 + h + 18.0,
            esc(&label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        x0 + w / 2.0,
        PANEL_H - 12.0,
        esc(p.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate({:.1},{:.1}) rotate(-90)" text-anchor="middle" font-size="12">{}</text>"#,
        ox + 16.0,
        y0 + h / 2.0,
        esc(p.y_label)
    );
    if let Some((label, v)) = p.reference {
        let y = sy(v);
        let _ = writeln!(
            out,
            r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#c33" stroke-dasharray="5,4"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10" fill="#c33">{}</text>"##,
            x0 + w,
            x0 + w - 4.0,
            y - 4.0,
            esc(label)
        );
    }
    if !p.points.is_empty() {
        let path: Vec<String> = p.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#1f5fa8" stroke-width="2"/>"##,
            path.join(" ")
        );
        for &(x, y) in &p.points {
            let _ = writeln!(
                out,
                r##"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="#1f5fa8"/>"##,
                sx(x),
                sy(y)
            );
        }
    }
}

fn document(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, i as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}

/// Probe AUC against the swept quantity; datasize adds an MMD panel.
pub fn render(table: &AblationTable) -> String {
    let auc: Vec<(f64, f64)> = table.rows.iter().filter_map(|r| Some((r.value, r.auc?))).collect();
    let random = table.random_init_auc.map(|v| ("random init", v));
    match table.kind {
        AblationKind::Misalignment => document(&[Panel {
            title: "Probe AUC vs misalignment",
            x_label: "misaligned pair ratio",
            y_label: "macro AUC",
            points: auc,
            categories: None,
            reference: random,
        }]),
        AblationKind::Datasize => {
            let mmd: Vec<(f64, f64)> = table.rows.iter().filter_map(|r| Some((r.value, r.mmd?))).collect();
            document(&[
                Panel {
                    title: "Probe AUC vs pretraining size",
                    x_label: "pretraining pairs",
                    y_label: "macro AUC",
                    points: auc,
                    categories: None,
                    reference: random,
                },
                Panel {
                    title: "MMD to held-out set",
                    x_label: "pretraining pairs",
                    y_label: "squared MMD",
                    points: mmd,
                    categories: None,
                    reference: None,
                },
            ])
        }
        AblationKind::Components => document(&[Panel {
            title: "Probe AUC by loss components",
            x_label: "configuration",
            y_label: "macro AUC",
            points: auc,
            categories: Some(COMPONENTS.iter().map(|c| c.to_string()).collect()),
            reference: random,
        }]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_cover_the_range() {
        let t = ticks(0.0, 1.0);
        assert_eq!(t.len(), 6);
        for (a, b) in t.iter().zip([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = ticks(-800.0, 16800.0);
        assert_eq!(t.first(), Some(&0.0));
        assert!(t.len() >= 3 && t.len() <= 7);
    }

    #[test]
    fn tick_labels() {
        assert_eq!(fmt_tick(4000.0), "4k");
        assert_eq!(fmt_tick(0.25), "0.25");
        assert_eq!(fmt_tick(1.0), "1");
    }
}
