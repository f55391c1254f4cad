//! Static SVG figures rendered from the CSV files written by `eval` and
//! `bench`. Marks carry a `class` attribute (`bar`, `gap`, `arrow`,
//! `offset`, `cell`, `series`) so that figures can be checked by counting
//! elements.

use super::{Failure, PlotConfig, PlotKind, Result};
use std::collections::BTreeMap;
use std::path::Path;
use svg::node::element::{Definitions, Group, Line, Marker, Path as SvgPath, Polyline, Rectangle, Text};
use svg::Document;

const W: f64 = 640.0;
const H: f64 = 440.0;
const ML: f64 = 72.0;
const MR: f64 = 130.0;
const MT: f64 = 36.0;
const MB: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// A CSV file held as named columns of raw cells.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| Failure::data(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let headers = r.headers().map_err(err)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        Ok(Self { headers, rows })
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::data(format!("missing column {name:?}")))
    }

    /// Numeric cells of `name`; empty or non-numeric cells are `None`.
    pub fn col(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let i = self.idx(name)?;
        Ok(self.rows.iter().map(|r| r.get(i).and_then(|c| c.parse().ok())).collect())
    }

    pub fn text(&self, name: &str) -> Result<Vec<String>> {
        let i = self.idx(name)?;
        Ok(self.rows.iter().map(|r| r.get(i).cloned().unwrap_or_default()).collect())
    }
}

fn required(col: Vec<Option<f64>>, name: &str) -> Result<Vec<f64>> {
    col.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Failure::data(format!("row {} has no numeric {name}", i + 1))))
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Chart frame
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn linear(lo: f64, hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self { lo, hi, log: false }
    }

    fn log(lo: f64, hi: f64) -> Self {
        let lo = 10f64.powf(lo.max(1e-12).log10().floor());
        let hi = 10f64.powf(hi.max(lo * 10.0).log10().ceil());
        Self { lo, hi, log: true }
    }

    /// Position in `[0, 1]`.
    fn unit(&self, v: f64) -> f64 {
        if self.log {
            (v.max(self.lo).log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().round() as i32, self.hi.log10().round() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=5).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 5.0).collect()
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

#[derive(Debug, Clone, Copy)]
struct Chart {
    x: Axis,
    y: Axis,
    /// Same meters per pixel on both axes.
    equal: bool,
}

impl Chart {
    fn plot_w(&self) -> f64 {
        W - ML - MR
    }

    fn plot_h(&self) -> f64 {
        H - MT - MB
    }

    /// Scale and origin shift that keep world aspect when `equal`.
    fn fit(&self) -> (f64, f64, f64, f64) {
        if !self.equal {
            return (self.plot_w(), self.plot_h(), 0.0, 0.0);
        }
        let s = (self.plot_w() / (self.x.hi - self.x.lo)).min(self.plot_h() / (self.y.hi - self.y.lo));
        let (w, h) = (s * (self.x.hi - self.x.lo), s * (self.y.hi - self.y.lo));
        (w, h, (self.plot_w() - w) / 2.0, (self.plot_h() - h) / 2.0)
    }

    fn px(&self, v: f64) -> f64 {
        let (w, _, ox, _) = self.fit();
        ML + ox + self.x.unit(v) * w
    }

    fn py(&self, v: f64) -> f64 {
        let (_, h, _, oy) = self.fit();
        MT + oy + (1.0 - self.y.unit(v)) * h
    }

    fn frame(&self, title: &str, xlabel: &str, ylabel: &str) -> Document {
        let (x0, x1, y0, y1) = (self.px(self.x.lo), self.px(self.x.hi), self.py(self.y.lo), self.py(self.y.hi));
        let mut axes = Group::new().set("class", "axes").set("stroke", "#333").set("font-size", 11);
        axes = axes
            .add(line(x0, y0, x1, y0).set("class", "axis"))
            .add(line(x0, y0, x0, y1).set("class", "axis"));
        for t in self.x.ticks() {
            let x = self.px(t);
            axes = axes
                .add(line(x, y0, x, y0 + 4.0))
                .add(text(x, y0 + 16.0, &fmt_tick(t), "middle").set("stroke", "none"));
        }
        for t in self.y.ticks() {
            let y = self.py(t);
            axes = axes
                .add(line(x0 - 4.0, y, x0, y))
                .add(text(x0 - 7.0, y + 4.0, &fmt_tick(t), "end").set("stroke", "none"));
        }
        Document::new()
            .set("xmlns", "http://www.w3.org/2000/svg")
            .set("viewBox", (0, 0, W, H))
            .set("width", W)
            .set("height", H)
            .set("font-family", "sans-serif")
            .add(Rectangle::new().set("width", W).set("height", H).set("fill", "white"))
            .add(axes)
            .add(text(W / 2.0 - MR / 2.0 + ML / 2.0, 20.0, title, "middle").set("class", "title").set("font-size", 14))
            .add(text((x0 + x1) / 2.0, H - 14.0, xlabel, "middle").set("class", "xlabel").set("font-size", 12))
            .add(
                text(18.0, (y0 + y1) / 2.0, ylabel, "middle")
                    .set("class", "ylabel")
                    .set("font-size", 12)
                    .set("transform", format!("rotate(-90 18 {})", (y0 + y1) / 2.0)),
            )
    }

    fn series(&self, pts: &[(f64, f64)], color: &str, dashed: bool) -> Polyline {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let mut p = Polyline::new()
            .set("class", "series")
            .set("points", coords.join(" "))
            .set("fill", "none")
            .set("stroke", color)
            .set("stroke-width", 1.6);
        if dashed {
            p = p.set("stroke-dasharray", "5 3");
        }
        p
    }
}

fn line(x1: f64, y1: f64, x2: f64, y2: f64) -> Line {
    Line::new().set("x1", x1).set("y1", y1).set("x2", x2).set("y2", y2)
}

fn text(x: f64, y: f64, s: &str, anchor: &str) -> Text {
    Text::new(s).set("x", x).set("y", y).set("text-anchor", anchor)
}

fn legend(mut doc: Document, entries: &[(String, String, bool)]) -> Document {
    let x = W - MR + 12.0;
    for (i, (label, color, dashed)) in entries.iter().enumerate() {
        let y = MT + 10.0 + 16.0 * i as f64;
        let mut l = line(x, y, x + 18.0, y).set("stroke", color.as_str()).set("stroke-width", 2);
        if *dashed {
            l = l.set("stroke-dasharray", "5 3");
        }
        doc = doc.add(l).add(text(x + 22.0, y + 4.0, label, "start").set("font-size", 10).set("class", "legend"));
    }
    doc
}

fn extent(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

// ---------------------------------------------------------------------------
// Figures
// ---------------------------------------------------------------------------

pub fn render(cfg: &PlotConfig) -> Result<String> {
    let tables = cfg
        .inputs
        .iter()
        .map(|p| Table::read(p).map(|t| (stem(p), t)))
        .collect::<Result<Vec<_>>>()?;
    let doc = match cfg.kind {
        PlotKind::Pr => pr(&tables)?,
        PlotKind::Reliability => reliability(&tables[0].1)?,
        PlotKind::OverTime => over_time(&tables)?,
        PlotKind::Bench => bench(&tables)?,
        PlotKind::FlowField => flow_field(&tables[0].1, cfg.t)?,
        PlotKind::OccupancyFilm => occupancy_film(&tables[0].1)?,
    };
    Ok(doc.to_string())
}

/// Distinct values in first-seen order.
fn distinct(v: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &x in v {
        if !out.iter().any(|&y| (y - x).abs() < 1e-9) {
            out.push(x);
        }
    }
    out
}

/// Up to four evenly spread timesteps.
fn pick_times(ts: &[f64]) -> Vec<f64> {
    if ts.len() <= 4 {
        return ts.to_vec();
    }
    let mut idx: Vec<usize> = (0..4).map(|i| i * (ts.len() - 1) / 3).collect();
    idx.dedup();
    idx.into_iter().map(|i| ts[i]).collect()
}

fn pr(tables: &[(String, Table)]) -> Result<Document> {
    let chart = Chart {
        x: Axis::linear(0.0, 1.0),
        y: Axis::linear(0.0, 1.0),
        equal: false,
    };
    let mut doc = chart.frame("Precision-recall", "recall", "precision");
    let mut entries = Vec::new();
    for (name, t) in tables {
        let ts = required(t.col("t")?, "t")?;
        let r = required(t.col("recall")?, "recall")?;
        let p = required(t.col("precision")?, "precision")?;
        for tv in pick_times(&distinct(&ts)) {
            let pts: Vec<(f64, f64)> = (0..ts.len()).filter(|&i| (ts[i] - tv).abs() < 1e-9).map(|i| (r[i], p[i])).collect();
            let color = PALETTE[entries.len() % PALETTE.len()];
            doc = doc.add(chart.series(&pts, color, false));
            let label = if tables.len() > 1 { format!("{name} t={tv}s") } else { format!("t={tv}s") };
            entries.push((label, color.to_string(), false));
        }
    }
    Ok(legend(doc, &entries))
}

fn reliability(t: &Table) -> Result<Document> {
    let lo = required(t.col("lo")?, "lo")?;
    let hi = required(t.col("hi")?, "hi")?;
    let conf = required(t.col("mean_conf")?, "mean_conf")?;
    let acc = required(t.col("accuracy")?, "accuracy")?;
    let count = required(t.col("count")?, "count")?;
    let chart = Chart {
        x: Axis::linear(0.0, 1.0),
        y: Axis::linear(0.0, 1.0),
        equal: false,
    };
    let mut doc = chart.frame("Reliability", "confidence", "accuracy");
    let mut bars = Group::new().set("fill", "#1f77b4").set("stroke", "#0b3c61").set("stroke-width", 0.5);
    let mut gaps = Group::new().set("fill", "#d62728").set("fill-opacity", 0.45);
    for i in 0..lo.len() {
        let (x0, x1) = (chart.px(lo[i]), chart.px(hi[i]));
        let (a, c) = if count[i] > 0.0 { (acc[i], conf[i]) } else { (0.0, 0.0) };
        let ya = chart.py(a);
        bars = bars.add(
            Rectangle::new()
                .set("class", "bar")
                .set("x", x0)
                .set("y", ya)
                .set("width", x1 - x0)
                .set("height", chart.py(0.0) - ya),
        );
        let yc = chart.py(c);
        gaps = gaps.add(
            Rectangle::new()
                .set("class", "gap")
                .set("x", x0)
                .set("y", ya.min(yc))
                .set("width", x1 - x0)
                .set("height", (ya - yc).abs()),
        );
    }
    doc = doc.add(bars).add(gaps).add(
        line(chart.px(0.0), chart.py(0.0), chart.px(1.0), chart.py(1.0))
            .set("class", "diagonal")
            .set("stroke", "#555")
            .set("stroke-dasharray", "4 3"),
    );
    Ok(legend(
        doc,
        &[("accuracy".into(), "#1f77b4".into(), false), ("gap".into(), "#d62728".into(), false)],
    ))
}

fn over_time(tables: &[(String, Table)]) -> Result<Document> {
    let mut series = Vec::new();
    for (name, t) in tables {
        let ts = t.col("t")?;
        for (metric, dashed) in [("ap", false), ("soft_iou", true)] {
            let v = t.col(metric)?;
            let pts: Vec<(f64, f64)> = ts.iter().zip(&v).filter_map(|(t, v)| Some(((*t)?, (*v)?))).collect();
            series.push((format!("{name} {metric}"), pts, dashed));
        }
    }
    let (t0, t1) = extent(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    if !t0.is_finite() {
        return Err(Failure::data("no defined metric values to plot"));
    }
    let chart = Chart {
        x: Axis::linear(t0, t1),
        y: Axis::linear(0.0, 1.0),
        equal: false,
    };
    let mut doc = chart.frame("Metrics over prediction time", "prediction time (s)", "mAP / Soft-IoU");
    let mut entries = Vec::new();
    for (i, (label, pts, dashed)) in series.iter().enumerate() {
        let color = PALETTE[(i / 2) % PALETTE.len()];
        doc = doc.add(chart.series(pts, color, *dashed));
        entries.push((label.clone(), color.to_string(), *dashed));
    }
    Ok(legend(doc, &entries))
}

fn bench(tables: &[(String, Table)]) -> Result<Document> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (name, t) in tables {
        let dec = t.text("decoder")?;
        let n = required(t.col("n_queries")?, "n_queries")?;
        let ms = required(t.col("median_ms")?, "median_ms")?;
        for i in 0..n.len() {
            let key = if tables.len() > 1 { format!("{name} {}", dec[i]) } else { dec[i].clone() };
            groups.entry(key).or_default().push((n[i], ms[i]));
        }
    }
    let (x0, x1) = extent(groups.values().flatten().map(|p| p.0));
    let (y0, y1) = extent(groups.values().flatten().map(|p| p.1));
    if !x0.is_finite() {
        return Err(Failure::data("bench CSV has no rows"));
    }
    let chart = Chart {
        x: Axis::log(x0, x1),
        y: Axis::log(y0, y1),
        equal: false,
    };
    let mut doc = chart.frame("Decoder inference time", "query count", "time per batch (ms)");
    let mut entries = Vec::new();
    for (i, (label, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        doc = doc.add(chart.series(pts, color, false));
        entries.push((label.clone(), color.to_string(), false));
    }
    Ok(legend(doc, &entries))
}

fn arrow_marker(id: &str, color: &str) -> Marker {
    Marker::new()
        .set("id", id)
        .set("viewBox", "0 0 10 10")
        .set("refX", 9)
        .set("refY", 5)
        .set("markerWidth", 5)
        .set("markerHeight", 5)
        .set("orient", "auto-start-reverse")
        .add(SvgPath::new().set("d", "M0,0 L10,5 L0,10 z").set("fill", color))
}

/// World-frame chart over the sampled points, one cell of margin.
fn field_chart(xs: &[f64], ys: &[f64], res: f64) -> Chart {
    let (x0, x1) = extent(xs.iter().copied());
    let (y0, y1) = extent(ys.iter().copied());
    Chart {
        x: Axis::linear(x0 - res, x1 + res),
        y: Axis::linear(y0 - res, y1 + res),
        equal: true,
    }
}

/// Smallest positive gap between distinct coordinates.
fn spacing(v: &[f64]) -> f64 {
    let mut d = distinct(v);
    d.sort_by(f64::total_cmp);
    d.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min).clamp(1e-6, 1e6)
}

fn flow_field(t: &Table, at: Option<f64>) -> Result<Document> {
    let ts = required(t.col("t")?, "t")?;
    let xs = required(t.col("x")?, "x")?;
    let ys = required(t.col("y")?, "y")?;
    let p = required(t.col("occ_prob")?, "occ_prob")?;
    let fx = required(t.col("flow_dx")?, "flow_dx")?;
    let fy = required(t.col("flow_dy")?, "flow_dy")?;
    let ox = t.col("offset_dx").unwrap_or_else(|_| vec![None; ts.len()]);
    let oy = t.col("offset_dy").unwrap_or_else(|_| vec![None; ts.len()]);
    let tv = at.or_else(|| ts.first().copied()).ok_or_else(|| Failure::data("field CSV has no rows"))?;
    let rows: Vec<usize> = (0..ts.len()).filter(|&i| (ts[i] - tv).abs() < 1e-9).collect();
    if rows.is_empty() {
        return Err(Failure::data(format!("no samples at t = {tv}")));
    }
    let res = spacing(&rows.iter().map(|&i| xs[i]).collect::<Vec<_>>());
    let chart = field_chart(&xs, &ys, res);
    let mut doc = chart.frame(&format!("Backward flow and offsets at t = {tv} s"), "x (m)", "y (m)");
    let scale = chart.px(res) - chart.px(0.0);
    doc = doc.add(
        Definitions::new()
            .add(arrow_marker("head-flow", "#1f3f99"))
            .add(arrow_marker("head-offset", "#c0392b")),
    );
    let mut cells = Group::new().set("fill", "#444");
    let mut flows = Group::new().set("stroke", "#1f3f99").set("stroke-width", 1.1);
    let mut offs = Group::new().set("stroke", "#c0392b").set("stroke-width", 0.9);
    for &i in &rows {
        let (cx, cy) = (chart.px(xs[i]), chart.py(ys[i]));
        cells = cells.add(
            Rectangle::new()
                .set("class", "cell")
                .set("x", cx - scale / 2.0)
                .set("y", cy - scale / 2.0)
                .set("width", scale)
                .set("height", scale)
                .set("fill-opacity", format!("{:.3}", 0.6 * p[i])),
        );
        flows = flows.add(
            line(cx, cy, chart.px(xs[i] + fx[i]), chart.py(ys[i] + fy[i]))
                .set("class", "arrow")
                .set("stroke-opacity", format!("{:.3}", 0.2 + 0.8 * p[i]))
                .set("marker-end", "url(#head-flow)"),
        );
        if let (Some(dx), Some(dy)) = (ox[i], oy[i]) {
            offs = offs.add(
                line(cx, cy, chart.px(xs[i] + dx), chart.py(ys[i] + dy))
                    .set("class", "offset")
                    .set("stroke-opacity", format!("{:.3}", 0.1 + 0.6 * p[i]))
                    .set("marker-end", "url(#head-offset)"),
            );
        }
    }
    doc = doc.add(cells).add(offs).add(flows);
    Ok(legend(
        doc,
        &[("flow".into(), "#1f3f99".into(), false), ("offset".into(), "#c0392b".into(), false)],
    ))
}

/// Blue (now) to yellow (horizon).
fn time_color(u: f64) -> String {
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let s = u.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (s.floor() as usize).min(stops.len() - 2);
    let f = s - i as f64;
    let mix = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
    let (a, b) = (stops[i], stops[i + 1]);
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Probability below which a cell is left blank.
const FILM_MIN_PROB: f64 = 0.05;

fn occupancy_film(t: &Table) -> Result<Document> {
    let ts = required(t.col("t")?, "t")?;
    let xs = required(t.col("x")?, "x")?;
    let ys = required(t.col("y")?, "y")?;
    let p = required(t.col("occ_prob")?, "occ_prob")?;
    if ts.is_empty() {
        return Err(Failure::data("field CSV has no rows"));
    }
    let res = spacing(&xs);
    let chart = field_chart(&xs, &ys, res);
    let mut doc = chart.frame("Occupancy over prediction time", "x (m)", "y (m)");
    let scale = chart.px(res) - chart.px(0.0);
    let mut times = distinct(&ts);
    times.sort_by(f64::total_cmp);
    let t_max = times.last().copied().unwrap_or(0.0).max(1e-9);
    // Later times first so that the present is drawn on top.
    for &tv in times.iter().rev() {
        let color = time_color(tv / t_max);
        let mut g = Group::new().set("fill", color.as_str()).set("data-t", tv);
        for i in (0..ts.len()).filter(|&i| (ts[i] - tv).abs() < 1e-9 && p[i] >= FILM_MIN_PROB) {
            g = g.add(
                Rectangle::new()
                    .set("class", "cell")
                    .set("x", chart.px(xs[i]) - scale / 2.0)
                    .set("y", chart.py(ys[i]) - scale / 2.0)
                    .set("width", scale)
                    .set("height", scale)
                    .set("fill-opacity", format!("{:.3}", p[i])),
            );
        }
        doc = doc.add(g);
    }
    let x = W - MR + 14.0;
    for (k, &tv) in times.iter().enumerate() {
        let y = MT + 8.0 + 14.0 * k as f64;
        doc = doc
            .add(
                Rectangle::new()
                    .set("class", "swatch")
                    .set("x", x)
                    .set("y", y)
                    .set("width", 14)
                    .set("height", 12)
                    .set("fill", time_color(tv / t_max)),
            )
            .add(text(x + 20.0, y + 10.0, &format!("Δt = {tv} s"), "start").set("font-size", 10));
    }
    Ok(doc)
}
