//! Static SVG plots with a machine-readable `<metadata>` block.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::blob::{format_kv, parse_kv};
use crate::profiler::ProfileRecord;

pub const FORMAT: &str = "tablet-plot/1";

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log2_x: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn draw_panel(svg: &mut String, panel: &Panel, x0: f64) {
    let pts = panel.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let tx = |x: f64| if panel.log2_x { x.max(f64::MIN_POSITIVE).log2() } else { x };
    let (mut xl, mut xh, mut yl, mut yh) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts {
        xl = xl.min(tx(x));
        xh = xh.max(tx(x));
        yl = yl.min(y);
        yh = yh.max(y);
    }
    if !xl.is_finite() {
        (xl, xh, yh) = (0.0, 1.0, 1.0);
    }
    if xh <= xl {
        xh = xl + 1.0;
    }
    if yh <= yl {
        yh = yl + 1.0;
    }
    let (w, h) = (PANEL_W - 1.5 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let px = |x: f64| x0 + MARGIN + (tx(x) - xl) / (xh - xl) * w;
    let py = |y: f64| MARGIN + h - (y - yl) / (yh - yl) * h;
    let _ = writeln!(svg, r#"<g class="panel"><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#, x0 + MARGIN + w / 2.0, MARGIN / 2.0, escape(&panel.title));
    let _ = writeln!(svg, r#"<rect x="{:.1}" y="{MARGIN:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="black"/>"#, x0 + MARGIN);
    for v in ticks(yl, yh) {
        let y = py(v);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#, x0 + MARGIN - 4.0, y + 3.0, fmt_num(v));
    }
    let xs: Vec<f64> = {
        let mut v: Vec<f64> = panel.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        if v.len() > 8 {
            ticks(v[0], v[v.len() - 1])
        } else {
            v
        }
    };
    for x in xs {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#, px(x), MARGIN + h + 14.0, fmt_num(x));
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#, x0 + MARGIN + w / 2.0, MARGIN + h + 32.0, escape(&panel.x_label));
    let (lx, ly) = (x0 + 14.0, MARGIN + h / 2.0);
    let _ = writeln!(svg, r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#, escape(&panel.y_label));
    for (i, s) in panel.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in s.points.iter().filter(|p| p.1.is_finite()) {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"#, x0 + MARGIN + 6.0, MARGIN + 12.0 + 12.0 * i as f64, escape(&s.name));
    }
    svg.push_str("</g>\n");
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Renders panels side by side. `meta` is written into the metadata block
/// together with the panel layout keys.
pub fn render(panels: &[Panel], meta: &BTreeMap<String, String>) -> String {
    let mut m = meta.clone();
    m.insert("format".into(), FORMAT.into());
    m.insert("panels".into(), panels.len().to_string());
    for (i, p) in panels.iter().enumerate() {
        m.insert(format!("panel.{i}.title"), p.title.clone());
        m.insert(format!("panel.{i}.x"), p.x_label.clone());
        m.insert(format!("panel.{i}.y"), p.y_label.clone());
        m.insert(format!("panel.{i}.x_scale"), if p.log2_x { "log2" } else { "linear" }.into());
        m.insert(format!("panel.{i}.series"), p.series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(","));
    }
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#);
    svg.push('\n');
    let _ = writeln!(svg, "<metadata id=\"tablet-plot\">\n{}</metadata>", escape(&format_kv(&m)));
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push('\n');
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut svg, p, i as f64 * PANEL_W);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads the metadata block back out of a rendered plot.
pub fn read_metadata(svg: &str) -> Option<BTreeMap<String, String>> {
    let start = svg.find("<metadata id=\"tablet-plot\">")? + "<metadata id=\"tablet-plot\">".len();
    let end = start + svg[start..].find("</metadata>")?;
    let text = svg[start..end].replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&");
    Some(parse_kv(&text))
}

/// Memory and time against sequence length, one series per model tag.
pub fn profile_figure(records: &[ProfileRecord]) -> String {
    let mut tags: Vec<&str> = records.iter().map(|r| r.model.as_str()).collect();
    tags.dedup();
    let series = |f: &dyn Fn(&ProfileRecord) -> Option<f64>| -> Vec<Series> {
        tags.iter()
            .map(|tag| Series {
                name: tag.to_string(),
                points: records.iter().filter(|r| r.model == *tag).map(|r| (r.t_frames as f64, f(r).unwrap_or(f64::NAN))).collect(),
            })
            .collect()
    };
    let panels = [
        Panel {
            title: "Peak memory allocation".into(),
            x_label: "T (frames)".into(),
            y_label: "peak memory (MiB)".into(),
            log2_x: true,
            series: series(&|r| r.peak_memory_bytes.map(|b| b as f64 / (1024.0 * 1024.0))),
        },
        Panel {
            title: "Training time per step".into(),
            x_label: "T (frames)".into(),
            y_label: "seconds per step".into(),
            log2_x: true,
            series: series(&|r| r.seconds_per_step),
        },
    ];
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "profile".into());
    meta.insert("x_values".into(), records.iter().map(|r| r.t_frames.to_string()).collect::<Vec<_>>().join(","));
    meta.insert("batch_size".into(), records.first().map(|r| r.batch_size.to_string()).unwrap_or_default());
    meta.insert("out_of_memory".into(), records.iter().filter(|r| r.peak_memory_bytes.is_none()).map(|r| r.t_frames.to_string()).collect::<Vec<_>>().join(","));
    render(&panels, &meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::ProfileStatus;

    #[test]
    fn profile_figure_metadata_matches_golden() {
        let recs: Vec<ProfileRecord> = [(16, 1.0e6, 0.01), (64, 4.0e6, 0.05), (256, 2.0e7, 0.4)]
            .iter()
            .map(|&(t, m, s)| ProfileRecord {
                model: "desk".into(),
                t_frames: t,
                batch_size: 4,
                peak_memory_bytes: Some(m as usize),
                seconds_per_step: Some(s),
                status: ProfileStatus::Ok,
            })
            .collect();
        let svg = profile_figure(&recs);
        let golden = "batch_size=4\nformat=tablet-plot/1\nkind=profile\nout_of_memory=\npanel.0.series=desk\npanel.0.title=Peak memory allocation\n\
panel.0.x=T (frames)\npanel.0.x_scale=log2\npanel.0.y=peak memory (MiB)\npanel.1.series=desk\npanel.1.title=Training time per step\n\
panel.1.x=T (frames)\npanel.1.x_scale=log2\npanel.1.y=seconds per step\npanels=2\nx_values=16,64,256\n";
        assert_eq!(format_kv(&read_metadata(&svg).unwrap()), golden);
        assert_eq!(svg.matches("class=\"panel\"").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 6);
    }
}
