//! Parametric rib-cage generator.
//!
//! Produces a template cloud (sternum plate plus cartilage branches swept as
//! tubes around planar quadratic arcs), a deformed subject cloud, and the
//! ground truth linking them: a point correspondence and 18 intercostal
//! waypoints on each side of the registration.
//!
//! Frame: `x` is medio-lateral (left side negative), `y` anterior, `z`
//! superior. Labels: 0 sternum, `1..=n/2` left branches top to bottom,
//! `n/2+1..=n` right branches top to bottom.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{centroid_of, pca_of, Point3, PointCloud, STERNUM};
use crate::rng::stage_rng;
use crate::spatial::NearestIndex;

/// Subject deformation relative to the template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformParams {
    /// Isotropic scale about the sternum centroid.
    pub global_scale: f64,
    /// Peak anterior bend of each branch tip, mm; sign and size drawn per branch.
    pub bend_amplitude: f64,
    /// Std-dev of the per-branch tip displacement, mm.
    pub per_branch_jitter: f64,
    pub outlier_fraction: f64,
    pub noise_sigma: f64,
    /// Global translation applied last, mm.
    pub offset: [f64; 3],
}

impl Default for DeformParams {
    fn default() -> Self {
        Self::none()
    }
}

impl DeformParams {
    pub fn none() -> Self {
        Self {
            global_scale: 1.0,
            bend_amplitude: 0.0,
            per_branch_jitter: 0.0,
            outlier_fraction: 0.0,
            noise_sigma: 0.0,
            offset: [0.0; 3],
        }
    }

    pub fn mild() -> Self {
        Self {
            global_scale: 1.05,
            bend_amplitude: 5.0,
            per_branch_jitter: 0.5,
            outlier_fraction: 0.02,
            noise_sigma: 0.3,
            offset: [0.0; 3],
        }
    }

    pub fn severe() -> Self {
        Self {
            global_scale: 1.12,
            bend_amplitude: 12.0,
            per_branch_jitter: 2.0,
            outlier_fraction: 0.08,
            noise_sigma: 0.8,
            offset: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.global_scale,
            self.bend_amplitude,
            self.per_branch_jitter,
            self.outlier_fraction,
            self.noise_sigma,
        ]
        .iter()
        .chain(&self.offset)
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams(
                "non-finite deformation parameter".into(),
            ));
        }
        if self.global_scale <= 0.0 {
            return Err(Error::InvalidParams("global_scale must be > 0".into()));
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return Err(Error::InvalidParams(
                "outlier_fraction must be in [0, 0.5)".into(),
            ));
        }
        if self.per_branch_jitter < 0.0 || self.noise_sigma < 0.0 || self.bend_amplitude < 0.0 {
            return Err(Error::InvalidParams(
                "amplitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Named deformation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformProfile {
    None,
    Mild,
    Severe,
}

impl DeformProfile {
    pub fn params(self) -> DeformParams {
        match self {
            DeformProfile::None => DeformParams::none(),
            DeformProfile::Mild => DeformParams::mild(),
            DeformProfile::Severe => DeformParams::severe(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeformProfile::None => "none",
            DeformProfile::Mild => "mild",
            DeformProfile::Severe => "severe",
        }
    }
}

impl FromStr for DeformProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DeformProfile::None),
            "mild" => Ok(DeformProfile::Mild),
            "severe" => Ok(DeformProfile::Severe),
            other => Err(Error::InvalidParams(format!(
                "unknown deform profile {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnatomyParams {
    pub rng_seed: u64,
    pub branch_count: usize,
    pub branch_length: f64,
    /// Vertical gap between adjacent branch attachments, mm.
    pub branch_spacing: f64,
    pub sternum_width: f64,
    pub points_per_branch: usize,
    /// Quadratic bend of each centerline, as a fraction of its length.
    pub curvature: f64,
    pub tube_radius: f64,
    pub deform: DeformParams,
}

impl Default for AnatomyParams {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            branch_count: 8,
            branch_length: 60.0,
            branch_spacing: 25.0,
            sternum_width: 30.0,
            points_per_branch: 400,
            curvature: 0.15,
            tube_radius: 2.5,
            deform: DeformParams::none(),
        }
    }
}

impl AnatomyParams {
    pub fn validate(&self) -> Result<()> {
        if self.branch_count < 2 || self.branch_count % 2 != 0 {
            return Err(Error::InvalidParams(
                "branch_count must be even and >= 2".into(),
            ));
        }
        for (name, v) in [
            ("branch_length", self.branch_length),
            ("branch_spacing", self.branch_spacing),
            ("sternum_width", self.sternum_width),
            ("tube_radius", self.tube_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} must be > 0")));
            }
        }
        if self.points_per_branch < 10 {
            return Err(Error::InvalidParams(
                "points_per_branch must be >= 10".into(),
            ));
        }
        if !self.curvature.is_finite() {
            return Err(Error::InvalidParams("curvature must be finite".into()));
        }
        self.deform.validate()
    }

    pub fn rows(&self) -> usize {
        self.branch_count / 2
    }
}

/// Ground truth shared by a generated template/subject pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `(template index, subject index)` pairs.
    pub correspondence: Vec<(usize, usize)>,
    pub waypoints_template: Vec<Point3>,
    pub waypoints_subject: Vec<Point3>,
}

/// Label of the branch in `row` (0 = top) on `side` (0 = left, 1 = right).
pub fn branch_label(row: usize, side: usize, branch_count: usize) -> i32 {
    (side * branch_count / 2 + row + 1) as i32
}

/// Waypoints per intercostal space, top to bottom: 2, 3, 4, ...
pub fn waypoints_in_space(space: usize) -> usize {
    space + 2
}

struct Branch {
    attach: Point3,
    lateral: Vector3<f64>,
    bend: Vector3<f64>,
    length: f64,
}

impl Branch {
    fn center(&self, t: f64, curvature: f64) -> Point3 {
        self.attach + self.length * (t * self.lateral + curvature * t * t * self.bend)
    }

    fn tangent(&self, t: f64, curvature: f64) -> Vector3<f64> {
        (self.lateral + 2.0 * curvature * t * self.bend).normalize()
    }
}

fn sternum_extent(params: &AnatomyParams) -> (f64, f64) {
    let top = 0.5 * params.branch_spacing;
    let bottom = -((params.rows() as f64 - 1.0) + 0.5) * params.branch_spacing;
    (top, bottom)
}

/// Plate width at height `z`: wider at the top.
fn sternum_width_at(params: &AnatomyParams, z: f64) -> f64 {
    let (top, bottom) = sternum_extent(params);
    let s = ((z - bottom) / (top - bottom)).clamp(0.0, 1.0);
    params.sternum_width * (0.8 + 0.4 * s)
}

/// Anterior bow of the plate at height `z`.
fn sternum_bow(params: &AnatomyParams, z: f64) -> f64 {
    let (top, bottom) = sternum_extent(params);
    let mid = 0.5 * (top + bottom);
    let half = 0.5 * (top - bottom);
    -4.0 * ((z - mid) / half).powi(2)
}

fn branches(params: &AnatomyParams) -> Vec<(i32, Branch)> {
    let slope = 15f64.to_radians();
    let mut out = Vec::with_capacity(params.branch_count);
    for side in 0..2 {
        let s = if side == 0 { -1.0 } else { 1.0 };
        for row in 0..params.rows() {
            let z = -(row as f64) * params.branch_spacing;
            let lateral = Vector3::new(s * slope.cos(), 0.0, -slope.sin());
            let w = Vector3::new(0.0, -0.6, -0.8);
            let bend = (w - w.dot(&lateral) * lateral).normalize();
            let attach = Point3::new(
                s * 0.5 * sternum_width_at(params, z),
                sternum_bow(params, z),
                z,
            );
            out.push((
                branch_label(row, side, params.branch_count),
                Branch {
                    attach,
                    lateral,
                    bend,
                    length: params.branch_length * (1.0 + 0.12 * row as f64),
                },
            ));
        }
    }
    out.sort_by_key(|(label, _)| *label);
    out
}

/// Per-point generation record; `t` is the arc parameter along its branch
/// (unused for sternum points).
struct Sample {
    label: i32,
    t: f64,
    point: Point3,
}

fn sample_template(params: &AnatomyParams) -> Vec<Sample> {
    let mut rng = stage_rng(params.rng_seed, "synth/template");
    let mut samples = Vec::new();

    let (top, bottom) = sternum_extent(params);
    let sternum_points = params.points_per_branch * 3 / 2;
    for _ in 0..sternum_points {
        let z = rng.random_range(bottom..top);
        let half = 0.5 * sternum_width_at(params, z);
        let x = rng.random_range(-half..half);
        let y = sternum_bow(params, z) + rng.random_range(-1.0..1.0);
        samples.push(Sample {
            label: STERNUM,
            t: 0.0,
            point: Point3::new(x, y, z),
        });
    }

    for (label, b) in branches(params) {
        for _ in 0..params.points_per_branch {
            let t: f64 = rng.random_range(0.0..1.0);
            let phi = rng.random_range(0.0..2.0 * PI);
            let rho = params.tube_radius * rng.random_range(0.0f64..1.0).sqrt();
            let tangent = b.tangent(t, params.curvature);
            let n1 = (b.bend - b.bend.dot(&tangent) * tangent).normalize();
            let n2 = tangent.cross(&n1);
            let point = b.center(t, params.curvature) + rho * (phi.cos() * n1 + phi.sin() * n2);
            samples.push(Sample { label, t, point });
        }
    }
    samples
}

/// Clean deformed positions (no noise, no outliers), index-aligned with the
/// template samples.
fn deform_clean(params: &AnatomyParams, samples: &[Sample]) -> Vec<Point3> {
    let d = &params.deform;
    let mut rng = stage_rng(params.rng_seed, "synth/deform");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // per-branch draws, indexed by label
    let mut bends = vec![0.0; params.branch_count + 1];
    let mut jitters = vec![Vector3::zeros(); params.branch_count + 1];
    for label in 1..=params.branch_count {
        bends[label] = d.bend_amplitude * rng.random_range(-1.0..1.0);
        jitters[label] = d.per_branch_jitter
            * Vector3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
    }
    let sternum: Vec<Point3> = samples
        .iter()
        .filter(|s| s.label == STERNUM)
        .map(|s| s.point)
        .collect();
    let pivot = centroid_of(&sternum).unwrap_or_else(|_| Point3::zeros());
    let offset = Vector3::from(d.offset);

    samples
        .iter()
        .map(|s| {
            let mut p = s.point;
            if s.label > 0 {
                let l = s.label as usize;
                if bends[l] != 0.0 {
                    p += bends[l] * s.t * s.t * Vector3::y();
                }
                if jitters[l] != Vector3::zeros() {
                    p += s.t * jitters[l];
                }
            }
            if d.global_scale != 1.0 {
                p = pivot + d.global_scale * (p - pivot);
            }
            if offset != Vector3::zeros() {
                p += offset;
            }
            p
        })
        .collect()
}

/// Generate a template/subject pair with ground truth.
pub fn generate_pair(params: &AnatomyParams) -> Result<(PointCloud, PointCloud, GroundTruth)> {
    params.validate()?;
    let samples = sample_template(params);
    let labels: Vec<i32> = samples.iter().map(|s| s.label).collect();
    let template = PointCloud {
        points: samples.iter().map(|s| s.point).collect(),
        labels: labels.clone(),
    };
    let clean = deform_clean(params, &samples);

    let d = &params.deform;
    let mut rng = stage_rng(params.rng_seed, "synth/noise");
    let mut subject = PointCloud {
        points: clean.clone(),
        labels,
    };
    if d.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, d.noise_sigma)
            .map_err(|e| Error::InvalidParams(format!("noise_sigma: {e}")))?;
        for p in &mut subject.points {
            *p += Vector3::new(
                noise.sample(&mut rng),
                noise.sample(&mut rng),
                noise.sample(&mut rng),
            );
        }
    }
    let n_outliers = (d.outlier_fraction * template.len() as f64).round() as usize;
    if n_outliers > 0 {
        let clean_cloud = PointCloud::new(clean.clone());
        let (lo, hi) = clean_cloud.bounds().expect("non-empty template");
        let margin = Vector3::repeat(10.0);
        let (lo, hi) = (lo - margin, hi + margin);
        let index = NearestIndex::new(&clean);
        for _ in 0..n_outliers {
            let p = Point3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let (nearest, _) = index.nearest(&p);
            let label = subject.labels[nearest];
            subject.push(p, label);
        }
    }

    let plan = plan_waypoints(&template, params.branch_count)?;
    let waypoints_template = plan.evaluate(&template.points);
    let waypoints_subject = plan.evaluate(&clean);
    let truth = GroundTruth {
        correspondence: (0..template.len()).map(|i| (i, i)).collect(),
        waypoints_template,
        waypoints_subject,
    };
    Ok((template, subject, truth))
}

/// Cluster memberships that define each waypoint: the waypoint is the
/// midpoint between the centroid of `upper` and the centroid of `lower`.
struct WaypointPlan {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl WaypointPlan {
    fn evaluate(&self, points: &[Point3]) -> Vec<Point3> {
        let mean = |idx: &[usize]| {
            idx.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i]) / idx.len() as f64
        };
        self.pairs
            .iter()
            .map(|(upper, lower)| 0.5 * (mean(upper) + mean(lower)))
            .collect()
    }
}

/// 1-D k-means (Lloyd) on values, initialized at quantiles. Returns the
/// member indices of each cluster, ordered by ascending cluster mean.
fn kmeans_1d(values: &[f64], k: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let n = order.len();
    let mut centers: Vec<f64> = (0..k)
        .map(|c| values[order[(((c as f64 + 0.5) / k as f64) * n as f64) as usize]])
        .collect();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..200 {
        let mut changed = false;
        for (i, &v) in values.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| (v - centers[a]).abs().total_cmp(&(v - centers[b]).abs()))
                .expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            sums[c] += values[i];
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut clusters: Vec<(f64, Vec<usize>)> = (0..k)
        .map(|c| {
            (
                centers[c],
                (0..n).filter(|&i| assign[i] == c).collect::<Vec<_>>(),
            )
        })
        .filter(|(_, m)| !m.is_empty())
        .collect();
    clusters.sort_by(|a, b| a.0.total_cmp(&b.0));
    clusters.into_iter().map(|(_, m)| m).collect()
}

/// Arc-ordered clusters of one branch: points are projected on the branch's
/// principal axis, oriented away from `medial`, then clustered.
fn branch_clusters(
    points: &[Point3],
    members: &[usize],
    k: usize,
    medial: &Point3,
) -> Result<Vec<Vec<usize>>> {
    let pts: Vec<Point3> = members.iter().map(|&i| points[i]).collect();
    let pa = pca_of(&pts)?;
    let mut axis = pa.axis(0);
    if axis.dot(&(pa.center - medial)) < 0.0 {
        axis = -axis;
    }
    let proj: Vec<f64> = pts.iter().map(|p| (p - pa.center).dot(&axis)).collect();
    let clusters = kmeans_1d(&proj, k);
    if clusters.len() != k {
        return Err(Error::DegenerateGeometry(format!(
            "branch has fewer than {k} distinct positions"
        )));
    }
    Ok(clusters
        .into_iter()
        .map(|c| c.into_iter().map(|j| members[j]).collect())
        .collect())
}

fn plan_waypoints(cloud: &PointCloud, branch_count: usize) -> Result<WaypointPlan> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); branch_count + 1];
    for (i, &l) in cloud.labels.iter().enumerate() {
        if l >= 0 && (l as usize) <= branch_count {
            members[l as usize].push(i);
        }
    }
    if let Some(label) = (1..=branch_count).find(|&l| members[l].is_empty()) {
        return Err(Error::MissingBranch(label as i32));
    }
    let medial = if members[0].is_empty() {
        centroid_of(&cloud.points)?
    } else {
        centroid_of(
            &members[0]
                .iter()
                .map(|&i| cloud.points[i])
                .collect::<Vec<_>>(),
        )?
    };
    let rows = branch_count / 2;
    let mut pairs = Vec::new();
    for side in 0..2 {
        for space in 0..rows.saturating_sub(1) {
            let count = waypoints_in_space(space);
            let upper = &members[branch_label(space, side, branch_count) as usize];
            let lower = &members[branch_label(space + 1, side, branch_count) as usize];
            let cu = branch_clusters(&cloud.points, upper, count, &medial)?;
            let cl = branch_clusters(&cloud.points, lower, count, &medial)?;
            pairs.extend(cu.into_iter().zip(cl));
        }
    }
    Ok(WaypointPlan { pairs })
}

/// Intercostal waypoints of a labeled cloud with 8 cartilage branches:
/// per space, the branches on both sides are clustered along their length
/// (2, 3 and 4 clusters top to bottom), matching centroids are paired in
/// medial-to-lateral order and their midpoints returned. Left side first.
pub fn waypoints_from_cloud(cloud: &PointCloud) -> Result<Vec<Point3>> {
    waypoints_from_cloud_with(cloud, 8)
}

pub fn waypoints_from_cloud_with(cloud: &PointCloud, branch_count: usize) -> Result<Vec<Point3>> {
    if branch_count < 2 || branch_count % 2 != 0 {
        return Err(Error::InvalidParams(
            "branch_count must be even and >= 2".into(),
        ));
    }
    Ok(plan_waypoints(cloud, branch_count)?.evaluate(&cloud.points))
}

/// Waypoints between two neighboring branches: `count` clusters on each,
/// paired in order away from `medial`.
pub fn intercostal_waypoints(
    upper: &[Point3],
    lower: &[Point3],
    count: usize,
    medial: &Point3,
) -> Result<Vec<Point3>> {
    if upper.is_empty() || lower.is_empty() || count == 0 {
        return Err(Error::EmptyInput("intercostal waypoints need two branches"));
    }
    let mut points = upper.to_vec();
    points.extend_from_slice(lower);
    let up: Vec<usize> = (0..upper.len()).collect();
    let lo: Vec<usize> = (upper.len()..points.len()).collect();
    let plan = WaypointPlan {
        pairs: branch_clusters(&points, &up, count, medial)?
            .into_iter()
            .zip(branch_clusters(&points, &lo, count, medial)?)
            .collect(),
    };
    Ok(plan.evaluate(&points))
}

/// Side (0 left, 1 right) of a branch label.
pub fn branch_side(label: i32, branch_count: usize) -> Option<usize> {
    if label < 1 || label as usize > branch_count {
        return None;
    }
    Some(((label as usize - 1) >= branch_count / 2) as usize)
}
