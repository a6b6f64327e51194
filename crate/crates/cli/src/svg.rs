//! Minimal SVG bar charts.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#b07aa1"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bars: one group per category, one bar per series. `values[s][c]`
/// is series `s` at category `c`; `None` leaves a gap.
pub fn grouped_bars(title: &str, categories: &[String], series: &[String], values: &[Vec<Option<f64>>]) -> String {
    let (w, h) = (960.0, 420.0);
    let (left, right, top, bottom) = (60.0, 140.0, 40.0, 80.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let all = values.iter().flatten().flatten().copied();
    let (lo, hi) = all.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let hi = if hi <= lo { lo + 1.0 } else { hi };
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, esc(title));
    // axis and ticks
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + plot_h);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="black"/>"#,
        y(0.0),
        left + plot_w,
        y(0.0)
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 4.0,
            y(v) + 4.0,
            tick(v)
        );
    }
    let n_cat = categories.len().max(1) as f64;
    let group_w = plot_w / n_cat;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = left + group_w * c as f64 + group_w * 0.1;
        for (si, vals) in values.iter().enumerate() {
            if let Some(v) = vals.get(c).copied().flatten() {
                let (y0, y1) = (y(v.max(0.0)), y(v.min(0.0)));
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {}: {}</title></rect>"#,
                    gx + bar_w * si as f64,
                    y0,
                    bar_w,
                    (y1 - y0).max(0.0),
                    PALETTE[si % PALETTE.len()],
                    esc(&series[si]),
                    esc(cat),
                    v
                );
            }
        }
        let lx = gx + group_w * 0.4;
        let ly = top + plot_h + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="end" transform="rotate(-45 {lx:.2} {ly:.2})">{}</text>"#,
            esc(cat)
        );
    }
    for (si, name) in series.iter().enumerate() {
        let ly = top + 16.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{ly}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            w - right + 10.0,
            PALETTE[si % PALETTE.len()],
            w - right + 24.0,
            ly + 9.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}
