//! Locally rigid node transforms, their blended non-rigid warp, and
//! sphere-neighborhood waypoint mapping.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    apply, covariance, fit_rigid_points, rigid_residual, Point3, PointCloud, RigidTransform,
};
use crate::preprocess::{coarse_align_report, dbscan, kept_indices, rms_nearest, ClusteringParams};
use crate::rng::derive_seed;
use crate::somgraph::{
    build_template_graph_with, pair_nodes, quantization_error, som_fit, SkeletonGraph, SomParams,
};
use crate::spatial::{NearestIndex, UniformGrid};

/// How blend weights depend on node distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    /// `w_i ∝ 1/d_i`: the nearest node dominates.
    #[default]
    Inverse,
    /// `w_i ∝ d_i`, the weighting taken literally from the distance formula.
    Literal,
}

impl std::str::FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(Self::Inverse),
            "literal" => Ok(Self::Literal),
            other => Err(Error::InvalidParams(format!(
                "unknown blend mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegisterParams {
    /// Node pairs per local rigid fit.
    pub n_reg: usize,
    /// Nearest nodes blended per warped point.
    pub n_blend: usize,
    /// Waypoint neighborhood radius, mm.
    pub sphere_radius: f64,
    pub blend: BlendMode,
    /// A local neighborhood counts as collinear when the ratio of its second
    /// to first principal standard deviation is at most this.
    pub collinear_tol: f64,
}

impl Default for RegisterParams {
    fn default() -> Self {
        Self {
            n_reg: 3,
            n_blend: 3,
            sphere_radius: 20.0,
            blend: BlendMode::Inverse,
            collinear_tol: 1e-3,
        }
    }
}

impl RegisterParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_reg < 3 {
            return Err(Error::InvalidParams("n_reg must be >= 3".into()));
        }
        if self.n_blend < 1 {
            return Err(Error::InvalidParams("n_blend must be >= 1".into()));
        }
        if !(self.sphere_radius > 0.0) || !self.sphere_radius.is_finite() {
            return Err(Error::InvalidParams("sphere_radius must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.collinear_tol) {
            return Err(Error::InvalidParams(
                "collinear_tol must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One rigid transform per template node, anchored at the node position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTransformField {
    pub nodes: Vec<Point3>,
    pub transforms: Vec<RigidTransform>,
    /// Node pairs used by each local fit.
    pub support: Vec<usize>,
}

impl LocalTransformField {
    pub fn new(nodes: Vec<Point3>, transforms: Vec<RigidTransform>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyInput("transform field without nodes"));
        }
        if nodes.len() != transforms.len() {
            return Err(Error::PairMismatch {
                source_len: nodes.len(),
                target_len: transforms.len(),
            });
        }
        let support = vec![0; nodes.len()];
        Ok(Self {
            nodes,
            transforms,
            support,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Rigid transform of every `g_ct` node, fitted from its `n_reg`
/// geodesically nearest paired nodes (itself included) onto their `g_us`
/// partners. A collinear neighborhood is widened one node at a time.
pub fn local_transforms(
    pairs: &[(usize, usize)],
    g_ct: &SkeletonGraph,
    g_us: &SkeletonGraph,
    params: &RegisterParams,
) -> Result<LocalTransformField> {
    params.validate()?;
    if pairs.len() < params.n_reg {
        return Err(Error::InvalidParams(format!(
            "{} node pairs, local fits need {}",
            pairs.len(),
            params.n_reg
        )));
    }
    if let Some(&(a, b)) = pairs
        .iter()
        .find(|&&(a, b)| a >= g_ct.len() || b >= g_us.len())
    {
        return Err(Error::GraphMismatch(format!(
            "pair ({a}, {b}) out of range"
        )));
    }
    let mut partner = vec![None; g_ct.len()];
    for &(a, b) in pairs {
        partner[a] = Some(b);
    }
    let paired: Vec<usize> = (0..g_ct.len()).filter(|&i| partner[i].is_some()).collect();
    let fits = (0..g_ct.len())
        .into_par_iter()
        .map(|i| {
            let row = g_ct.geodesic_row(i);
            let mut order = paired.clone();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let mut take = params.n_reg;
            loop {
                let src: Vec<Point3> = order[..take]
                    .iter()
                    .map(|&j| g_ct.nodes[j].position)
                    .collect();
                let dst: Vec<Point3> = order[..take]
                    .iter()
                    .map(|&j| g_us.nodes[partner[j].expect("paired")].position)
                    .collect();
                let fit = if spread_ratio(&src) <= params.collinear_tol {
                    Err(Error::DegenerateGeometry(
                        "collinear node neighborhood".into(),
                    ))
                } else {
                    fit_rigid_points(&src, &dst)
                };
                match fit {
                    Ok(t) => return Ok((t, take)),
                    Err(Error::DegenerateGeometry(_)) if take < order.len() => take += 1,
                    Err(Error::DegenerateGeometry(msg)) => {
                        return Err(Error::DegenerateGeometry(format!("node {i}: {msg}")))
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (transforms, support) = fits.into_iter().unzip();
    let mut field = LocalTransformField::new(g_ct.positions(), transforms)?;
    field.support = support;
    Ok(field)
}

/// Second over first principal standard deviation; 0 for coincident points.
pub fn spread_ratio(points: &[Point3]) -> f64 {
    match covariance(points) {
        Ok((_, c)) => {
            let mut ev: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            if ev[0] > 0.0 {
                (ev[1].max(0.0) / ev[0]).sqrt()
            } else {
                0.0
            }
        }
        Err(_) => 0.0,
    }
}

/// Normalized blend weights for node distances `d`. A distance below 1e-9
/// takes the full weight (first such node).
pub fn blend_weights(distances: &[f64], mode: BlendMode) -> Vec<f64> {
    let mut w = vec![0.0; distances.len()];
    if let Some(k) = distances.iter().position(|&d| d < 1e-9) {
        w[k] = 1.0;
        return w;
    }
    match mode {
        BlendMode::Inverse => {
            let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
            let sum: f64 = inv.iter().sum();
            for (wi, v) in w.iter_mut().zip(&inv) {
                *wi = v / sum;
            }
        }
        BlendMode::Literal => {
            let sum: f64 = distances.iter().sum();
            for (wi, d) in w.iter_mut().zip(distances) {
                *wi = d / sum;
            }
        }
    }
    w
}

/// Blend of the `n_blend` nearest node transforms applied to one point.
pub fn warp_point(
    p: &Point3,
    field: &LocalTransformField,
    index: &NearestIndex,
    params: &RegisterParams,
) -> Point3 {
    let near = index.nearest_n(p, params.n_blend.min(field.len()));
    let dists: Vec<f64> = near.iter().map(|&(_, d2)| d2.sqrt()).collect();
    let w = blend_weights(&dists, params.blend);
    near.iter()
        .zip(&w)
        .filter(|(_, &wi)| wi != 0.0)
        .fold(Point3::zeros(), |acc, (&(k, _), &wi)| {
            acc + wi * field.transforms[k].apply_point(p)
        })
}

/// Non-rigid warp of `cloud` by the transform field. Labels are kept.
pub fn warp_cloud(
    cloud: &PointCloud,
    field: &LocalTransformField,
    params: &RegisterParams,
) -> PointCloud {
    let index = NearestIndex::new(&field.nodes);
    let points = cloud
        .points
        .par_iter()
        .map(|p| warp_point(p, field, &index, params))
        .collect();
    PointCloud {
        points,
        labels: cloud.labels.clone(),
    }
}

/// Map each waypoint by the rigid fit of the template points around it onto
/// their warped positions. A sphere holding fewer than 3 non-collinear
/// points grows by ×1.5, at most three times.
pub fn map_waypoints(
    waypoints: &[Point3],
    cloud_ct: &PointCloud,
    warped: &PointCloud,
    params: &RegisterParams,
) -> Result<Vec<Point3>> {
    params.validate()?;
    if cloud_ct.len() != warped.len() {
        return Err(Error::PairMismatch {
            source_len: cloud_ct.len(),
            target_len: warped.len(),
        });
    }
    let grid = UniformGrid::new(&cloud_ct.points, params.sphere_radius);
    waypoints
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            let mut radius = params.sphere_radius;
            for attempt in 0..4 {
                let idx = grid.within(&cloud_ct.points, w, radius);
                if idx.len() >= 3 {
                    let src: Vec<Point3> = idx.iter().map(|&i| cloud_ct.points[i]).collect();
                    let dst: Vec<Point3> = idx.iter().map(|&i| warped.points[i]).collect();
                    match fit_rigid_points(&src, &dst) {
                        Ok(t) => return Ok(t.apply_point(w)),
                        Err(Error::DegenerateGeometry(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                if attempt < 3 {
                    radius *= 1.5;
                }
            }
            Err(Error::SparseNeighborhood { index: k, radius })
        })
        .collect()
}

/// Parameters of the full dense-graph pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineParams {
    pub register: RegisterParams,
    pub som: SomParams,
    pub clustering: ClusteringParams,
    /// Template graph size.
    pub node_count: usize,
    pub branch_count: usize,
    /// Drop subject points that DBSCAN marks as noise or small clusters.
    pub denoise: bool,
    /// Initial learning rate of the paired refits that produce `G_ct` and
    /// `G_us` from the first template fit.
    pub refine_lr0: f64,
    pub rng_seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            register: RegisterParams::default(),
            som: SomParams::default(),
            clustering: ClusteringParams::default(),
            node_count: crate::somgraph::DENSE_NODE_COUNT,
            branch_count: 8,
            denoise: true,
            refine_lr0: 0.1,
            rng_seed: 0,
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        self.register.validate()?;
        self.som.validate()?;
        self.clustering.validate()?;
        SomParams {
            lr0: self.refine_lr0,
            ..self.som
        }
        .validate()?;
        if self.branch_count < 2 || self.branch_count % 2 != 0 {
            return Err(Error::InvalidParams(
                "branch_count must be even and >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Residual and wall time of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Stage-specific residual in mm (see [`register_pipeline`]).
    pub residual_mm: f64,
    pub time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationOutput {
    /// Template warped onto the subject, in the subject frame.
    pub warped: PointCloud,
    /// Waypoints mapped into the subject frame.
    pub waypoints: Vec<Point3>,
    /// Subject → template coarse alignment.
    pub coarse: RigidTransform,
    /// Template graph after its SOM fit (graph methods only).
    pub g_ct: Option<SkeletonGraph>,
    /// Fitted subject graph, in the coarsely aligned frame.
    pub g_us: Option<SkeletonGraph>,
    pub stages: Vec<StageRecord>,
}

/// Subject points kept after density filtering.
pub fn denoise_cloud(cloud: &PointCloud, params: &ClusteringParams) -> Result<PointCloud> {
    let ids = dbscan(cloud, params)?;
    let keep = kept_indices(&ids, params.min_cluster_size_for(cloud.len()));
    if keep.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(cloud.subset(&keep))
}

/// Density filtering and coarse alignment shared by every method. Returns
/// the subject in the template frame and the subject → template transform.
pub(crate) fn prepare_subject(
    template: &PointCloud,
    subject: &PointCloud,
    params: &PipelineParams,
    stages: &mut Vec<StageRecord>,
) -> Result<(PointCloud, RigidTransform)> {
    if template.is_empty() || subject.is_empty() {
        return Err(Error::EmptyInput("registration needs two non-empty clouds"));
    }
    let subject = timed(stages, "denoise", || {
        let s = if params.denoise {
            denoise_cloud(subject, &params.clustering)?
        } else {
            subject.clone()
        };
        Ok((s, 0.0))
    })?;
    let coarse = timed(stages, "coarse_align", || {
        let c = coarse_align_report(&subject, template)?;
        let rms = c.rms_after;
        Ok((c.transform, rms))
    })?;
    Ok((apply(&coarse, &subject), coarse))
}

pub(crate) fn timed<T>(
    stages: &mut Vec<StageRecord>,
    name: &str,
    f: impl FnOnce() -> Result<(T, f64)>,
) -> Result<T> {
    let start = Instant::now();
    let (value, residual) = f()?;
    stages.push(StageRecord {
        name: name.to_string(),
        residual_mm: residual,
        time_ms: start.elapsed().as_secs_f64() * 1e3,
    });
    Ok(value)
}

/// Register `template` to a labeled `subject` and carry `waypoints` along.
///
/// Stages: density filtering of the subject, sternum-based coarse
/// alignment, template graph construction, SOM fit of the graph to the
/// template, paired refits of that graph to the template (`G_ct`) and to
/// the aligned subject (`G_us`), node pairing, local rigid transforms, warp of the template, and waypoint
/// mapping. Residuals: nearest-neighbor RMS for alignment and warp, mean
/// quantization error for the SOM fits, mean local-fit RMS for the
/// transforms, zero where no residual applies.
pub fn register_pipeline(
    template: &PointCloud,
    subject: &PointCloud,
    waypoints: &[Point3],
    params: &PipelineParams,
) -> Result<RegistrationOutput> {
    register_with_graph(template, subject, waypoints, params, params.node_count)
}

pub(crate) fn register_with_graph(
    template: &PointCloud,
    subject: &PointCloud,
    waypoints: &[Point3],
    params: &PipelineParams,
    node_count: usize,
) -> Result<RegistrationOutput> {
    params.validate()?;
    let mut stages = Vec::new();
    let (aligned, coarse) = prepare_subject(template, subject, params, &mut stages)?;
    let g_temp = timed(&mut stages, "build_graph", || {
        Ok((
            build_template_graph_with(template, node_count, params.branch_count)?,
            0.0,
        ))
    })?;
    let g_ct0 = timed(&mut stages, "som_template", || {
        let som = SomParams {
            rng_seed: derive_seed(params.rng_seed, "register/som_template"),
            ..params.som
        };
        let g = som_fit(&g_temp, template, &som)?;
        let q = quantization_error(&g, template);
        Ok((g, q))
    })?;
    // Both graphs are refitted from the same starting graph with the same
    // seed and schedule, so the stochastic part of the fit is shared and
    // the paired node offsets reflect the clouds rather than the shuffles.
    let refine = SomParams {
        rng_seed: derive_seed(params.rng_seed, "register/som_refine"),
        lr0: params.refine_lr0,
        ..params.som
    };
    let g_ct = timed(&mut stages, "som_template_refit", || {
        let g = som_fit(&g_ct0, template, &refine)?;
        let q = quantization_error(&g, template);
        Ok((g, q))
    })?;
    let g_us = timed(&mut stages, "som_subject", || {
        let g = som_fit(&g_ct0, &aligned, &refine)?;
        let q = quantization_error(&g, &aligned);
        Ok((g, q))
    })?;
    let field = timed(&mut stages, "local_transforms", || {
        let pairs = pair_nodes(&g_ct, &g_us)?;
        let field = local_transforms(&pairs, &g_ct, &g_us, &params.register)?;
        let rms = field
            .transforms
            .iter()
            .zip(&field.nodes)
            .zip(&g_us.nodes)
            .map(|((t, p), q)| {
                rigid_residual(
                    t,
                    std::slice::from_ref(p),
                    std::slice::from_ref(&q.position),
                )
                .sqrt()
            })
            .sum::<f64>()
            / field.len() as f64;
        Ok((field, rms))
    })?;
    let warped = timed(&mut stages, "warp", || {
        let w = warp_cloud(template, &field, &params.register);
        let rms = rms_nearest(&w.points, &NearestIndex::new(&aligned.points));
        Ok((w, rms))
    })?;
    let mapped = timed(&mut stages, "map_waypoints", || {
        Ok((
            map_waypoints(waypoints, template, &warped, &params.register)?,
            0.0,
        ))
    })?;
    let back = coarse.inverse();
    Ok(RegistrationOutput {
        warped: apply(&back, &warped),
        waypoints: mapped.iter().map(|p| back.apply_point(p)).collect(),
        coarse,
        g_ct: Some(g_ct),
        g_us: Some(g_us),
        stages,
    })
}
