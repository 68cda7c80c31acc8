//! Static bar charts of mean KL per method with one-standard-deviation
//! whiskers.

use std::fmt::Write as _;

use super::AggregateRow;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 70.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the rows of one grid cell. Rows are drawn in the given order.
pub fn bar_chart(title: &str, rows: &[&AggregateRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="18">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let base_y = MARGIN_TOP + plot_h;
    let top = rows
        .iter()
        .map(|r| r.mean_kl + r.std_kl)
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.1;
    let y_of = |v: f64| base_y - (v.max(0.0) / top) * plot_h;

    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{base_y}" stroke="#333"/>"##
    );
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN_LEFT}" y1="{base_y}" x2="{}" y2="{base_y}" stroke="#333"/>"##,
        WIDTH - MARGIN_RIGHT
    );
    for i in 0..=4 {
        let v = top * i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="#333"/><text x="{}" y="{:.2}" text-anchor="end" font-size="12">{v:.3}</text>"##,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" font-size="13" transform="rotate(-90 20 {:.2})" text-anchor="middle">mean KL</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    let slot = plot_w / rows.len().max(1) as f64;
    let bar_w = slot * 0.6;
    for (i, r) in rows.iter().enumerate() {
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let y = y_of(r.mean_kl);
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="#4c78a8"/>"##,
            cx - bar_w / 2.0,
            base_y - y
        );
        let (lo, hi) = (y_of(r.mean_kl - r.std_kl), y_of(r.mean_kl + r.std_kl));
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.2}" y1="{lo:.2}" x2="{cx:.2}" y2="{hi:.2}" stroke="black"/><line x1="{:.2}" y1="{hi:.2}" x2="{:.2}" y2="{hi:.2}" stroke="black"/><line x1="{:.2}" y1="{lo:.2}" x2="{:.2}" y2="{lo:.2}" stroke="black"/>"##,
            cx - 8.0,
            cx + 8.0,
            cx - 8.0,
            cx + 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="12">{:.4}</text>"#,
            hi - 6.0,
            r.mean_kl
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
            base_y + 20.0,
            escape(&r.method)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="11">n={}</text>"#,
            base_y + 36.0,
            r.seeds
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One chart per grid cell present in `rows`, as `(config_id, svg)`.
pub fn charts_by_config(rows: &[AggregateRow]) -> Vec<(String, String)> {
    let mut ids: Vec<&str> = Vec::new();
    for r in rows {
        if !ids.contains(&r.config_id.as_str()) {
            ids.push(&r.config_id);
        }
    }
    ids.into_iter()
        .map(|id| {
            let cell: Vec<&AggregateRow> = rows.iter().filter(|r| r.config_id == id).collect();
            (id.to_string(), bar_chart(&format!("{id}: mean KL (1 std)"), &cell))
        })
        .collect()
}
