//! Grouped bar charts as standalone SVG.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bars of `series` (label, one value per category) grouped by category, values in [0, 1].
/// The config hash is embedded as a comment and in the footer.
pub fn bar_chart(title: &str, categories: &[String], series: &[(String, Vec<f64>)], config_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<!-- config_hash: {} -->", escape(config_hash));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.5 * MARGIN;
    let base_y = MARGIN + plot_h;
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{base_y}" x2="{}" y2="{base_y}" stroke="black"/>"#, WIDTH - MARGIN);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = base_y - v * plot_h;
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.2}</text><line x1="{MARGIN}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##,
            MARGIN - 4.0,
            y + 3.0,
            WIDTH - MARGIN
        );
    }
    let groups = categories.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let gx = MARGIN + c as f64 * group_w + group_w * 0.1;
        for (k, (_, values)) in series.iter().enumerate() {
            let v = values.get(c).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let h = v * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{v:.4}</title></rect>"#,
                gx + k as f64 * bar_w,
                base_y - h,
                bar_w,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            base_y + 14.0,
            escape(name)
        );
    }
    for (k, (label, _)) in series.iter().enumerate() {
        let x = MARGIN + k as f64 * 140.0;
        let y = HEIGHT - 22.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{y}" font-family="sans-serif" font-size="11">{}</text>"#,
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="8" text-anchor="end">{}</text>"#,
        WIDTH - 4.0,
        HEIGHT - 4.0,
        escape(config_hash)
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_bar_plus_legend() {
        let cats = vec!["male".to_string(), "female".to_string()];
        let series = vec![("before".to_string(), vec![0.8, 0.2]), ("after".to_string(), vec![0.5, 0.5])];
        let svg = bar_chart("gender <worker>", &cats, &series, "h123");
        assert_eq!(svg.matches("<rect").count(), 4 + 2);
        assert!(svg.contains("config_hash: h123"));
        assert!(svg.contains("&lt;worker&gt;"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
