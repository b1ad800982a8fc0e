//! Hand-written SVG charts. Output depends only on the input rows, so the
//! same table always renders to the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::output::{ResultRow, RIGIDITY_KIND};

const PANEL_W: f64 = 520.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 120.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Panel {
    top: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Panel {
    fn new(index: usize, x_max: f64, values: impl Iterator<Item = f64>) -> Panel {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let pad = 0.05 * (hi - lo);
        Panel {
            top: index as f64 * (PANEL_H + MARGIN_T + MARGIN_B),
            x_max: x_max.max(1.0),
            y_min: lo - pad,
            y_max: hi + pad,
        }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN_L + PANEL_W * v / self.x_max
    }

    fn y(&self, v: f64) -> f64 {
        self.top + MARGIN_T + PANEL_H * (1.0 - (v - self.y_min) / (self.y_max - self.y_min))
    }

    fn frame(&self, svg: &mut String, title: &str, x_label: &str, y_label: &str, x_ticks: usize) {
        let (x0, y0) = (MARGIN_L, self.top + MARGIN_T + PANEL_H);
        let _ = writeln!(
            svg,
            r#"<text x="{x0:.2}" y="{:.2}" font-size="13">{}</text>"#,
            self.top + 18.0,
            esc(title)
        );
        let _ = writeln!(
            svg,
            r#"<line class="axis" x1="{x0:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="black"/>"#,
            x0 + PANEL_W
        );
        let _ = writeln!(
            svg,
            r#"<line class="axis" x1="{x0:.2}" y1="{:.2}" x2="{x0:.2}" y2="{y0:.2}" stroke="black"/>"#,
            self.top + MARGIN_T
        );
        for t in 0..x_ticks {
            let x = self.x(t as f64);
            let _ = writeln!(
                svg,
                r#"<text x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{t}</text>"#,
                y0 + 14.0
            );
        }
        for v in [self.y_min, 0.5 * (self.y_min + self.y_max), self.y_max] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v:.3}</text>"#,
                x0 - 4.0,
                self.y(v) + 3.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 + 32.0,
            esc(x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="12" y="{:.2}" font-size="11" transform="rotate(-90 12 {:.2})" text-anchor="middle">{}</text>"#,
            self.top + MARGIN_T + PANEL_H / 2.0,
            self.top + MARGIN_T + PANEL_H / 2.0,
            esc(y_label)
        );
    }

    fn legend(&self, svg: &mut String, slot: usize, color: &str, label: &str) {
        let x = MARGIN_L + PANEL_W + 12.0;
        let y = self.top + MARGIN_T + 12.0 + 14.0 * slot as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
            x + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            x + 20.0,
            y + 3.0,
            esc(label)
        );
    }
}

fn document(panels: usize, body: &str) -> String {
    let w = MARGIN_L + PANEL_W + MARGIN_R;
    let h = panels.max(1) as f64 * (PANEL_H + MARGIN_T + MARGIN_B);
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn no_data(title: &str, x_label: &str, y_label: &str) -> String {
    let p = Panel::new(0, 1.0, std::iter::empty());
    let mut svg = String::new();
    p.frame(&mut svg, title, x_label, y_label, 0);
    let _ = writeln!(
        svg,
        r#"<text class="no-data" x="{:.2}" y="{:.2}" font-size="16" text-anchor="middle">no data</text>"#,
        MARGIN_L + PANEL_W / 2.0,
        MARGIN_T + PANEL_H / 2.0
    );
    document(1, &svg)
}

/// Grid cells of one run keyed by `(task_trained, task_evaled)`.
type Cells = BTreeMap<(usize, usize), f64>;

/// Per run: the primary metric (error rate when present, else loss).
fn primary_grids(rows: &[ResultRow]) -> BTreeMap<String, (String, Cells)> {
    let mut by_run: BTreeMap<String, BTreeMap<String, Cells>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric_kind != RIGIDITY_KIND) {
        by_run
            .entry(r.run_id.clone())
            .or_default()
            .entry(r.metric_kind.clone())
            .or_default()
            .insert((r.task_trained, r.task_evaled), r.value);
    }
    by_run
        .into_iter()
        .filter_map(|(id, mut kinds)| {
            let kind = if kinds.contains_key("error_rate") {
                "error_rate".to_string()
            } else {
                kinds.keys().next()?.clone()
            };
            let cells = kinds.remove(&kind)?;
            Some((id, (kind, cells)))
        })
        .collect()
}

/// One panel per run: the metric on each task as later tasks are trained.
pub fn curves_svg(rows: &[ResultRow]) -> String {
    let grids = primary_grids(rows);
    if grids.is_empty() {
        return no_data("learning curves", "tasks trained", "metric");
    }
    let mut svg = String::new();
    for (k, (id, (kind, cells))) in grids.iter().enumerate() {
        let stages = cells.keys().map(|&(i, _)| i + 1).max().unwrap_or(1);
        let p = Panel::new(k, (stages.max(2) - 1) as f64, cells.values().copied());
        p.frame(
            &mut svg,
            &format!("{id}: {kind} per task"),
            "task trained (stage)",
            kind,
            stages,
        );
        let tasks: Vec<usize> = {
            let mut t: Vec<usize> = cells.keys().map(|&(_, j)| j).collect();
            t.sort_unstable();
            t.dedup();
            t
        };
        for (slot, &j) in tasks.iter().enumerate() {
            let color = COLORS[j % COLORS.len()];
            let points: Vec<String> = cells
                .iter()
                .filter(|(&(_, jj), _)| jj == j)
                .map(|(&(i, _), &v)| format!("{:.2},{:.2}", p.x(i as f64), p.y(v)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="curve" data-run="{}" data-task="{j}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                esc(id),
                points.join(" ")
            );
            p.legend(&mut svg, slot, color, &format!("task {j}"));
        }
    }
    document(grids.len(), &svg)
}

/// Forgetting `E[last][j] − E[j][j]` per task, one bar group per run.
pub fn forgetting_svg(rows: &[ResultRow]) -> String {
    let grids = primary_grids(rows);
    let mut bars: Vec<(String, Vec<f64>)> = Vec::new();
    for (id, (_, cells)) in &grids {
        let Some(last) = cells.keys().map(|&(i, _)| i).max() else {
            continue;
        };
        let f: Vec<f64> = (0..last)
            .filter_map(|j| Some(cells.get(&(last, j))? - cells.get(&(j, j))?))
            .collect();
        bars.push((id.clone(), f));
    }
    let n_bars: usize = bars.iter().map(|(_, f)| f.len()).sum();
    if n_bars == 0 {
        return no_data("forgetting", "task", "forgetting");
    }
    let all = bars.iter().flat_map(|(_, f)| f.iter().copied()).chain([0.0]);
    let p = Panel::new(0, n_bars as f64, all);
    let mut svg = String::new();
    p.frame(
        &mut svg,
        "forgetting on the primary metric",
        "run / task",
        "forgetting",
        0,
    );
    let width = PANEL_W / n_bars as f64;
    let mut slot = 0;
    for (k, (id, f)) in bars.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (j, &v) in f.iter().enumerate() {
            let (y0, y1) = (p.y(0.0), p.y(v));
            let _ = writeln!(
                svg,
                r#"<rect class="bar" data-run="{}" data-task="{j}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                esc(id),
                p.x(slot as f64) + 0.1 * width,
                y0.min(y1),
                0.8 * width,
                (y1 - y0).abs()
            );
            slot += 1;
        }
        p.legend(&mut svg, k, color, id);
    }
    document(1, &svg)
}

/// Rigidity (natural-log ratio) against task index, one line per run.
pub fn rigidity_svg(rows: &[ResultRow]) -> String {
    let mut by_run: BTreeMap<&str, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric_kind == RIGIDITY_KIND) {
        by_run.entry(&r.run_id).or_default().insert(r.task_trained, r.value);
    }
    if by_run.is_empty() {
        return no_data("rigidity", "task index", "ln(loss / trained-first loss)");
    }
    let tasks = by_run.values().flat_map(|m| m.keys().copied()).max().unwrap_or(0) + 1;
    let p = Panel::new(
        0,
        (tasks.max(2) - 1) as f64,
        by_run.values().flat_map(|m| m.values().copied()).chain([0.0]),
    );
    let mut svg = String::new();
    p.frame(
        &mut svg,
        "rigidity",
        "task index",
        "ln(loss / trained-first loss)",
        tasks,
    );
    for (k, (id, m)) in by_run.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = m
            .iter()
            .map(|(&i, &v)| format!("{:.2},{:.2}", p.x(i as f64), p.y(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="curve" data-run="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            esc(id),
            points.join(" ")
        );
        p.legend(&mut svg, k, color, id);
    }
    document(1, &svg)
}
