//! Static SVG figures from report CSVs: accuracy against threshold and
//! m-accuracy against the number of input frames, one panel per metric.
//! Output contains no timestamps, so equal inputs give equal bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

pub const METRICS: [&str; 4] = ["ARE", "ATE", "RRE", "RTE"];
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 48.0;
const MARGIN_B: f64 = 36.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_R: f64 = 12.0;
const LEGEND_H: f64 = 28.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scene: String,
    pub n_frames: usize,
    pub metric: String,
    pub threshold: f64,
    pub accuracy: f64,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("scene,n_frames,metric,threshold,accuracy") => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || format!("line {}: cannot parse {l:?}", k + 2);
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ReportRow {
                scene: f[0].to_string(),
                n_frames: f[1].parse().map_err(|_| bad())?,
                metric: f[2].to_string(),
                threshold: f[3].parse().map_err(|_| bad())?,
                accuracy: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

type Series = (String, Vec<ReportRow>);

/// Key for sorting/grouping floats exactly.
fn key(v: f64) -> u64 {
    v.to_bits()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Scene-averaged accuracy per threshold for one metric.
fn by_threshold(rows: &[ReportRow], metric: &str) -> Vec<(f64, f64)> {
    let mut m: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        m.entry(key(r.threshold)).or_insert((r.threshold, Vec::new())).1.push(r.accuracy);
    }
    let mut v: Vec<(f64, f64)> = m.into_values().map(|(t, a)| (t, mean(&a))).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Per frame count: mean over scenes of each scene's threshold-averaged accuracy.
fn by_frames(rows: &[ReportRow], metric: &str) -> Vec<(f64, f64)> {
    let mut per_scene: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        per_scene.entry(&r.scene).or_insert((r.n_frames, Vec::new())).1.push(r.accuracy);
    }
    let mut m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (n, acc) in per_scene.into_values() {
        m.entry(n).or_default().push(mean(&acc));
    }
    m.into_iter().map(|(n, a)| (n as f64, mean(&a))).collect()
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_string()
    }
}

struct Figure {
    body: String,
    width: f64,
    height: f64,
}

impl Figure {
    fn new(cols: usize, rows: usize) -> Self {
        Self {
            body: String::new(),
            width: PANEL_W * cols as f64,
            height: PANEL_H * rows as f64 + LEGEND_H,
        }
    }

    /// One panel at grid cell (col, row). `xs` are the tick positions; each
    /// series is drawn against its own x values.
    fn panel(&mut self, col: usize, row: usize, title: &str, xlabel: &str, xs: &[f64], lines: &[(usize, Vec<(f64, f64)>)]) {
        let ox = col as f64 * PANEL_W;
        let oy = LEGEND_H + row as f64 * PANEL_H;
        let (x0, x1) = (ox + MARGIN_L, ox + PANEL_W - MARGIN_R);
        let (y0, y1) = (oy + PANEL_H - MARGIN_B, oy + MARGIN_T);
        let (lo, hi) = match (xs.first(), xs.last()) {
            (Some(a), Some(b)) if b > a => (*a, *b),
            (Some(a), _) => (*a - 1.0, *a + 1.0),
            _ => (0.0, 1.0),
        };
        let px = |x: f64| x0 + (x - lo) / (hi - lo) * (x1 - x0);
        let py = |y: f64| y0 - y.clamp(0.0, 1.0) * (y0 - y1);
        let b = &mut self.body;
        let _ = writeln!(
            b,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle" font-weight="bold">{title}</text>"#,
            (x0 + x1) / 2.0,
            oy + 18.0
        );
        let _ = writeln!(
            b,
            r##"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            x1 - x0,
            y0 - y1
        );
        for k in 0..=4 {
            let v = k as f64 / 4.0;
            let y = py(v);
            let _ = writeln!(b, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#ddd"/>"##);
            let _ = writeln!(
                b,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                y + 3.0,
                (v * 100.0) as u32
            );
        }
        for &x in xs {
            let _ = writeln!(
                b,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                px(x),
                y0 + 13.0,
                fmt(x)
            );
        }
        let _ = writeln!(
            b,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{xlabel}</text>"#,
            (x0 + x1) / 2.0,
            y0 + 28.0
        );
        let _ = writeln!(
            b,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">accuracy (%)</text>"#,
            ox + 12.0,
            (y0 + y1) / 2.0,
            ox + 12.0,
            (y0 + y1) / 2.0
        );
        for (s, pts) in lines {
            let color = COLORS[s % COLORS.len()];
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
            let _ = writeln!(
                b,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for (x, y) in pts {
                let _ = writeln!(b, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(*x), py(*y));
            }
        }
    }

    fn legend(&mut self, labels: &[String]) {
        let mut x = 12.0;
        for (k, l) in labels.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let _ = writeln!(
                self.body,
                r#"<line x1="{x:.1}" y1="14" x2="{:.1}" y2="14" stroke="{color}" stroke-width="3"/>"#,
                x + 20.0
            );
            let _ = writeln!(self.body, r#"<text x="{:.1}" y="18" font-size="12">{}</text>"#, x + 26.0, escape(l));
            x += 40.0 + 7.0 * l.chars().count() as f64;
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn figure(series: &[Series], xlabel: impl Fn(&str) -> &'static str, curve: impl Fn(&[ReportRow], &str) -> Vec<(f64, f64)>) -> String {
    let mut fig = Figure::new(2, 2);
    fig.legend(&series.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>());
    for (k, metric) in METRICS.iter().enumerate() {
        let lines: Vec<(usize, Vec<(f64, f64)>)> =
            series.iter().enumerate().map(|(s, (_, rows))| (s, curve(rows, metric))).collect();
        let mut xs: Vec<f64> = lines.iter().flat_map(|(_, p)| p.iter().map(|(x, _)| *x)).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        xs.dedup();
        fig.panel(k % 2, k / 2, metric, xlabel(metric), &xs, &lines);
    }
    fig.finish()
}

pub fn accuracy_vs_threshold(series: &[Series]) -> String {
    figure(
        series,
        |m| if m == "ATE" { "threshold (fraction of scene scale)" } else { "threshold (degrees)" },
        by_threshold,
    )
}

pub fn accuracy_vs_frames(series: &[Series]) -> String {
    figure(series, |_| "number of frames", by_frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "scene,n_frames,metric,threshold,accuracy\n\
        a,3,ARE,5,0.5\na,3,ARE,10,1\nb,5,ARE,5,0\nb,5,ARE,10,0.5\n";

    #[test]
    fn parses_and_aggregates() {
        let rows = parse_report_csv(CSV).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(by_threshold(&rows, "ARE"), vec![(5.0, 0.25), (10.0, 0.75)]);
        assert_eq!(by_frames(&rows, "ARE"), vec![(3.0, 0.75), (5.0, 0.25)]);
    }

    #[test]
    fn bad_csv_rejected() {
        assert!(parse_report_csv("x,y\n").is_err());
        assert!(parse_report_csv("scene,n_frames,metric,threshold,accuracy\na,b,c\n").is_err());
    }

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let rows = parse_report_csv(CSV).unwrap();
        let s = vec![("guided".to_string(), rows.clone()), ("plain <ddpm>".to_string(), rows)];
        let a = accuracy_vs_threshold(&s);
        assert_eq!(a, accuracy_vs_threshold(&s));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("plain &lt;ddpm&gt;"));
        assert!(accuracy_vs_frames(&s).contains("number of frames"));
    }
}
