//! Overlap and boundary metrics, classification metrics, registration
//! reports, and the benchmark runner.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{cpd_register, icp_register, sparse_graph_register, CpdParams, IcpParams};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};
use crate::register::{register_pipeline, PipelineParams, RegistrationOutput, StageRecord};
use crate::shaperepair::BinaryMask;
use crate::somgraph::SPARSE_NODE_COUNT;
use crate::synth::{generate_pair, AnatomyParams, DeformProfile};

fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    a.same_shape(b)?;
    let inter = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(x, y)| **x != 0 && **y != 0)
        .count();
    Ok((inter, a.count(), b.count()))
}

/// Dice coefficient `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Dice of the point sets carrying `label` in two equally indexed clouds.
pub fn dice_labels(a: &PointCloud, b: &PointCloud, label: i32) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} points",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        na += (la == label) as usize;
        nb += (lb == label) as usize;
        inter += (la == label && lb == label) as usize;
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // the parabola at v[k] is hidden; the first one never is
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest pixel whose
/// value equals `target`; infinite when there is none.
pub fn distance_transform(mask: &BinaryMask, target: u8) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let mut grid: Vec<f64> = mask
        .data
        .iter()
        .map(|&v| if v == target { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut res);
        for y in 0..h {
            grid[y * w + x] = res[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

/// Boundary loss: twice the sum, over the pixels where the masks disagree,
/// of the distance to the truth boundary (pixel units, unit pixel area).
/// A missed truth pixel is measured to the nearest truth background pixel
/// and a spurious one to the nearest truth foreground pixel, so every
/// disagreeing pixel contributes at least 1.
pub fn boundary_loss(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.same_shape(truth)?;
    let n_fg = truth.count();
    if n_fg == 0 || n_fg == truth.data.len() {
        return Err(Error::UndefinedBoundary);
    }
    let to_fg = distance_transform(truth, 1);
    let to_bg = distance_transform(truth, 0);
    let mut sum = 0.0;
    for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
        if p != t {
            sum += if t != 0 { to_bg[i] } else { to_fg[i] };
        }
    }
    Ok(2.0 * sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub true_negative: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl ConfusionCounts {
    /// Counts of `predicted` against `actual`, positive = `true`.
    pub fn tally(predicted: &[bool], actual: &[bool]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.true_positive += 1,
                (false, false) => c.true_negative += 1,
                (true, false) => c.false_positive += 1,
                (false, true) => c.false_negative += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let ratio = |num: u64, den: u64, what: &'static str| {
        if den == 0 {
            Err(Error::UndefinedMetric(what))
        } else {
            Ok(num as f64 / den as f64)
        }
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(
            c.true_positive + c.true_negative,
            c.total(),
            "accuracy without samples",
        )?,
        sensitivity: ratio(
            c.true_positive,
            c.true_positive + c.false_negative,
            "sensitivity without positives",
        )?,
        specificity: ratio(
            c.true_negative,
            c.true_negative + c.false_positive,
            "specificity without negatives",
        )?,
    })
}

/// Euclidean distance between each mapped waypoint and its ground truth.
pub fn waypoint_errors(mapped: &[Point3], truth: &[Point3]) -> Result<Vec<f64>> {
    if mapped.len() != truth.len() {
        return Err(Error::PairMismatch {
            source_len: mapped.len(),
            target_len: truth.len(),
        });
    }
    Ok(mapped
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).norm())
        .collect())
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Registration method compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dense,
    Sparse,
    Icp,
    Cpd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dense, Method::Sparse, Method::Icp, Method::Cpd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Sparse => "sparse",
            Method::Icp => "icp",
            Method::Cpd => "cpd",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown method {s:?}")))
    }
}

/// Parameters shared by every benchmark row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    /// Generator settings; the seed and deformation come from the row.
    pub anatomy: AnatomyParams,
    pub pipeline: PipelineParams,
    pub icp: IcpParams,
    pub cpd: CpdParams,
    pub sparse_node_count: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            anatomy: AnatomyParams::default(),
            pipeline: PipelineParams::default(),
            icp: IcpParams::default(),
            cpd: CpdParams::default(),
            sparse_node_count: SPARSE_NODE_COUNT,
        }
    }
}

impl BenchParams {
    pub fn validate(&self) -> Result<()> {
        self.anatomy.validate()?;
        self.pipeline.validate()?;
        self.icp.validate()?;
        self.cpd.validate()?;
        if self.sparse_node_count < 3 {
            return Err(Error::InvalidParams(
                "sparse_node_count must be >= 3".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub profiles: Vec<DeformProfile>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub params: BenchParams,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.profiles.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidParams(
                "seeds, profiles and methods must be non-empty".into(),
            ));
        }
        self.params.validate()
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Outcome of one registration with per-waypoint errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub method: String,
    pub profile: Option<DeformProfile>,
    pub seed: Option<u64>,
    /// `ok`, or the error code of the failure.
    pub status: String,
    pub message: Option<String>,
    pub errors_mm: Vec<f64>,
    pub mean_mm: Option<f64>,
    /// Population standard deviation.
    pub sd_mm: Option<f64>,
    pub runtime_ms: f64,
    pub stages: Vec<StageRecord>,
    pub params: serde_json::Value,
}

impl RegistrationReport {
    pub fn success(
        method: &str,
        errors_mm: Vec<f64>,
        stages: Vec<StageRecord>,
        params: serde_json::Value,
    ) -> Self {
        let stats = mean_sd(&errors_mm);
        Self {
            method: method.to_string(),
            profile: None,
            seed: None,
            status: "ok".into(),
            message: None,
            mean_mm: stats.map(|s| s.0),
            sd_mm: stats.map(|s| s.1),
            runtime_ms: stages.iter().map(|s| s.time_ms).sum(),
            errors_mm,
            stages,
            params,
        }
    }

    pub fn failure(method: &str, error: &Error, params: serde_json::Value) -> Self {
        Self {
            method: method.to_string(),
            profile: None,
            seed: None,
            status: error.code().into(),
            message: Some(error.to_string()),
            errors_mm: Vec::new(),
            mean_mm: None,
            sd_mm: None,
            runtime_ms: 0.0,
            stages: Vec::new(),
            params,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Zero every wall-clock field, leaving only deterministic content.
    pub fn strip_timings(&mut self) {
        self.runtime_ms = 0.0;
        for s in &mut self.stages {
            s.time_ms = 0.0;
        }
    }
}

/// Run one method on a generated pair; `waypoints` live on the template.
pub fn run_method(
    method: Method,
    template: &PointCloud,
    subject: &PointCloud,
    waypoints: &[Point3],
    params: &BenchParams,
) -> Result<RegistrationOutput> {
    match method {
        Method::Dense => register_pipeline(template, subject, waypoints, &params.pipeline),
        Method::Sparse => sparse_graph_register(
            template,
            subject,
            waypoints,
            &params.pipeline,
            params.sparse_node_count,
        ),
        Method::Icp => icp_register(template, subject, waypoints, &params.pipeline, &params.icp),
        Method::Cpd => cpd_register(template, subject, waypoints, &params.pipeline, &params.cpd),
    }
}

/// Generate the pair for `(profile, seed)`, register it with `method` and
/// score the mapped waypoints against ground truth.
pub fn run_case(
    method: Method,
    profile: DeformProfile,
    seed: u64,
    params: &BenchParams,
) -> RegistrationReport {
    let mut row_params = *params;
    row_params.anatomy.rng_seed = seed;
    row_params.anatomy.deform = profile.params();
    row_params.pipeline.rng_seed = seed;
    row_params.pipeline.branch_count = row_params.anatomy.branch_count;
    let echo = serde_json::to_value(row_params).unwrap_or(serde_json::Value::Null);
    let result = generate_pair(&row_params.anatomy).and_then(|(template, subject, truth)| {
        let out = run_method(
            method,
            &template,
            &subject,
            &truth.waypoints_template,
            &row_params,
        )?;
        let errors = waypoint_errors(&out.waypoints, &truth.waypoints_subject)?;
        Ok((errors, out.stages))
    });
    let mut report = match result {
        Ok((errors, stages)) => RegistrationReport::success(method.name(), errors, stages, echo),
        Err(e) => RegistrationReport::failure(method.name(), &e, echo),
    };
    report.profile = Some(profile);
    report.seed = Some(seed);
    report
}

/// Run the full cross product of the configuration. Rows execute in
/// parallel and come back sorted by method, profile and seed.
pub fn run_benchmark(config: &BenchConfig) -> Result<Vec<RegistrationReport>> {
    config.validate()?;
    let mut cases = Vec::new();
    for &m in &config.methods {
        for &p in &config.profiles {
            for &s in &config.seeds {
                cases.push((m, p, s));
            }
        }
    }
    let mut rows: Vec<((Method, DeformProfile, u64), RegistrationReport)> = cases
        .into_par_iter()
        .map(|(m, p, s)| ((m, p, s), run_case(m, p, s, &config.params)))
        .collect();
    rows.sort_by_key(|r| r.0);
    Ok(rows.into_iter().map(|r| r.1).collect())
}

/// Across-seed statistics of one method on one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub profile: String,
    pub runs: usize,
    pub failures: usize,
    /// Mean and population SD of the per-run mean errors.
    pub mean_mm: Option<f64>,
    pub sd_mm: Option<f64>,
    /// `benchmark` for measured rows, `literature` for reference rows.
    pub source: String,
}

/// Clinical results reported in the literature for the same comparison,
/// kept as context only: `(method, mean mm, SD mm)`.
pub const LITERATURE_REFERENCE: [(&str, f64, f64); 5] = [
    ("dense", 2.2, 1.1),
    ("nonrigid-icp", 5.6, 2.0),
    ("keypoint", 5.6, 2.5),
    ("cpd", 6.6, 3.9),
    ("icp", 13.2, 9.6),
];

/// Per (method, profile) aggregates in report order, followed by the
/// literature reference rows.
pub fn aggregate(reports: &[RegistrationReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in reports {
        let key = (
            r.method.clone(),
            r.profile.map(|p| p.name().to_string()).unwrap_or_default(),
        );
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rows: Vec<AggregateRow> = keys
        .into_iter()
        .map(|(method, profile)| {
            let group: Vec<&RegistrationReport> = reports
                .iter()
                .filter(|r| {
                    r.method == method && r.profile.map(|p| p.name()).unwrap_or("") == profile
                })
                .collect();
            let means: Vec<f64> = group.iter().filter_map(|r| r.mean_mm).collect();
            let stats = mean_sd(&means);
            AggregateRow {
                method,
                profile,
                runs: group.len(),
                failures: group.iter().filter(|r| !r.is_ok()).count(),
                mean_mm: stats.map(|s| s.0),
                sd_mm: stats.map(|s| s.1),
                source: "benchmark".into(),
            }
        })
        .collect();
    rows.extend(
        LITERATURE_REFERENCE
            .iter()
            .map(|&(m, mean, sd)| AggregateRow {
                method: m.into(),
                profile: "clinical".into(),
                runs: 0,
                failures: 0,
                mean_mm: Some(mean),
                sd_mm: Some(sd),
                source: "literature".into(),
            }),
    );
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `method,profile,seed,mean_mm,sd_mm,runtime_ms,status` per report.
pub fn summary_csv(reports: &[RegistrationReport]) -> String {
    let mut out = String::from("method,profile,seed,mean_mm,sd_mm,runtime_ms,status\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.profile.map(|p| p.name()).unwrap_or(""),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            opt(r.mean_mm),
            opt(r.sd_mm),
            r.runtime_ms,
            r.status
        );
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,profile,runs,failures,mean_mm,sd_mm,source\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.profile,
            r.runs,
            r.failures,
            opt(r.mean_mm),
            opt(r.sd_mm),
            r.source
        );
    }
    out
}

/// Scatter of per-waypoint errors, one column per (method, profile), with
/// the column mean drawn as a bar.
pub fn scatter_svg(reports: &[RegistrationReport]) -> String {
    let rows = aggregate(reports);
    let groups: Vec<&AggregateRow> = rows.iter().filter(|r| r.source == "benchmark").collect();
    let (col_w, plot_h, left, top) = (110.0, 360.0, 60.0, 30.0);
    let width = left + col_w * groups.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 60.0;
    let y_max = reports
        .iter()
        .flat_map(|r| r.errors_mm.iter().copied())
        .fold(1.0f64, f64::max)
        .ceil();
    let y = |v: f64| top + plot_h * (1.0 - v / y_max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    for t in 0..=5 {
        let v = y_max * t as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">waypoint error (mm)</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (gi, g) in groups.iter().enumerate() {
        let cx = left + col_w * (gi as f64 + 0.5);
        let mut k = 0usize;
        for r in reports.iter().filter(|r| {
            r.method == g.method && r.profile.map(|p| p.name()).unwrap_or("") == g.profile
        }) {
            for &e in &r.errors_mm {
                // deterministic horizontal spread
                let dx = ((k * 37) % 61) as f64 / 60.0 * 60.0 - 30.0;
                k += 1;
                let _ = writeln!(
                    svg,
                    r##"<circle cx="{:.1}" cy="{:.1}" r="1.6" fill="#1f77b4" fill-opacity="0.5"/>"##,
                    cx + dx,
                    y(e)
                );
            }
        }
        if let Some(m) = g.mean_mm {
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="crimson" stroke-width="2"/>"#,
                cx - 35.0,
                y(m),
                cx + 35.0,
                y(m)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{} / {}</text>"#,
            top + plot_h + 18.0,
            g.method,
            g.profile
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `summary.csv`, `aggregate.csv`, `scatter.svg` and one
/// `runs/<method>_<profile>_<seed>/report.json` per row.
pub fn write_benchmark(reports: &[RegistrationReport], out_dir: &Path) -> Result<()> {
    let runs = out_dir.join("runs");
    std::fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let write =
        |path: &Path, text: &str| std::fs::write(path, text).map_err(|e| Error::io(path, e));
    write(&out_dir.join("summary.csv"), &summary_csv(reports))?;
    write(
        &out_dir.join("aggregate.csv"),
        &aggregate_csv(&aggregate(reports)),
    )?;
    write(&out_dir.join("scatter.svg"), &scatter_svg(reports))?;
    for r in reports {
        let dir = runs.join(format!(
            "{}_{}_{}",
            r.method,
            r.profile.map(|p| p.name()).unwrap_or("none"),
            r.seed.unwrap_or(0)
        ));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(r).map_err(|e| Error::json(&path, e))?;
        write(&path, &(text + "\n"))?;
    }
    Ok(())
}
