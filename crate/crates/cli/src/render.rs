//! Markdown tables and SVG grouped bar charts.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// One bar: mean height and an optional 95% CI half width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub value: f64,
    pub ci: Option<f64>,
}

/// Bars grouped along the x axis (`values[group][series]`).
#[derive(Debug, Clone)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub groups: Vec<String>,
    pub series: Vec<String>,
    pub values: Vec<Vec<Option<Bar>>>,
    /// Fixed top of the y axis; derived from the data when `None`.
    pub y_max: Option<f64>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ceiling(x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(x.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if m * mag >= x {
            return m * mag;
        }
    }
    10.0 * mag
}

impl BarChart {
    fn top(&self) -> f64 {
        self.y_max.unwrap_or_else(|| {
            let hi = self
                .values
                .iter()
                .flatten()
                .flatten()
                .map(|b| b.value + b.ci.unwrap_or(0.0))
                .fold(0.0, f64::max);
            nice_ceiling(hi * 1.05)
        })
    }

    /// Renders the chart. `generated` goes into a `<metadata>` element and
    /// should be `None` for reproducible output.
    pub fn svg(&self, generated: Option<&str>) -> String {
        let bar_w = 18.0;
        let group_gap = 24.0;
        let (left, right, top, bottom) = (64.0, 150.0, 40.0, 56.0);
        let plot_h = 240.0;
        let group_w = bar_w * self.series.len().max(1) as f64;
        let plot_w = self.groups.len().max(1) as f64 * (group_w + group_gap) + group_gap;
        let width = left + plot_w + right;
        let height = top + plot_h + bottom;
        let y_top = self.top();
        let y = |v: f64| top + plot_h * (1.0 - (v / y_top).clamp(0.0, 1.0));

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
        );
        if let Some(g) = generated {
            let _ = writeln!(s, "<metadata>{}</metadata>", esc(g));
        }
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            left + plot_w / 2.0,
            esc(&self.title)
        );
        for i in 0..=5 {
            let v = y_top * i as f64 / 5.0;
            let yy = y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{left:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#dddddd"/>"##,
                left + plot_w
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
                left - 6.0,
                yy + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            top + plot_h / 2.0,
            esc(&self.y_label)
        );
        for (g, name) in self.groups.iter().enumerate() {
            let gx = left + group_gap + g as f64 * (group_w + group_gap);
            for (k, _) in self.series.iter().enumerate() {
                let x = gx + k as f64 * bar_w;
                let color = PALETTE[k % PALETTE.len()];
                match self.values.get(g).and_then(|row| row.get(k)).copied().flatten() {
                    Some(bar) => {
                        let yv = y(bar.value);
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x:.1}" y="{yv:.1}" width="{:.1}" height="{:.1}" fill="{color}"><title>{:.4}</title></rect>"#,
                            bar_w - 2.0,
                            top + plot_h - yv,
                            bar.value
                        );
                        if let Some(ci) = bar.ci.filter(|c| *c > 0.0) {
                            let cx = x + (bar_w - 2.0) / 2.0;
                            let (lo, hi) = (y(bar.value - ci), y(bar.value + ci));
                            let _ = writeln!(
                                s,
                                r#"<path d="M{cx:.1} {lo:.1}V{hi:.1}M{:.1} {lo:.1}H{:.1}M{:.1} {hi:.1}H{:.1}" stroke="black" fill="none"/>"#,
                                cx - 4.0,
                                cx + 4.0,
                                cx - 4.0,
                                cx + 4.0
                            );
                        }
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="8" fill="#888888">n/a</text>"##,
                            x + bar_w / 2.0 - 1.0,
                            top + plot_h - 3.0
                        );
                    }
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                gx + group_w / 2.0,
                top + plot_h + 18.0,
                esc(name)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{left:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
            top + plot_h,
            left + plot_w,
            top + plot_h
        );
        for (k, name) in self.series.iter().enumerate() {
            let lx = left + plot_w + 16.0;
            let ly = top + 8.0 + k as f64 * 18.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                ly - 10.0,
                PALETTE[k % PALETTE.len()],
                lx + 18.0,
                ly,
                esc(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Formats an optional number, `-` when missing.
pub fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn mean_ci(mean: f64, ci: Option<f64>) -> String {
    match ci {
        Some(c) => format!("{mean:.4} ± {c:.4}"),
        None => format!("{mean:.4}"),
    }
}

/// A GitHub-flavored Markdown table.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", header.iter().map(|_| " --- |").collect::<String>());
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart() -> BarChart {
        BarChart {
            title: "TPR <by> age".into(),
            y_label: "TPR".into(),
            groups: vec!["a".into(), "b".into()],
            series: vec!["control".into(), "ad".into()],
            values: vec![
                vec![Some(Bar { value: 0.5, ci: Some(0.1) }), None],
                vec![Some(Bar { value: 1.0, ci: None }), Some(Bar { value: 0.25, ci: Some(0.0) })],
            ],
            y_max: Some(1.0),
        }
    }

    #[test]
    fn svg_structure() {
        let s = chart().svg(None);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<title>").count(), 3);
        assert_eq!(s.matches("<path").count(), 1);
        assert!(s.contains("n/a"));
        assert!(s.contains("TPR &lt;by&gt; age"));
        assert!(!s.contains("<metadata>"));
        assert!(chart().svg(Some("t=1")).contains("<metadata>t=1</metadata>"));
    }

    #[test]
    fn ceilings() {
        assert_eq!(nice_ceiling(0.37), 0.5);
        assert_eq!(nice_ceiling(1.2), 2.0);
        assert_eq!(nice_ceiling(0.0), 1.0);
    }

    #[test]
    fn markdown_table() {
        let t = table(&["a", "b"], &[vec!["1".into(), "2".into()]]);
        assert_eq!(t, "| a | b |\n| --- | --- |\n| 1 | 2 |\n");
    }
}
