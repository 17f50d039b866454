//! Cleaning of raw subject clouds and coarse sternum alignment.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    apply, centroid_of, pca_of, Point3, PointCloud, RigidTransform, STERNUM, UNASSIGNED,
};
use crate::spatial::{NearestIndex, UniformGrid};

/// Cluster id for points that belong to no cluster.
pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringParams {
    /// Neighborhood radius, mm.
    pub eps: f64,
    /// Neighbors (including the point itself) needed for a core point.
    pub min_points: usize,
    /// Absolute minimum cluster size; `None` means 5% of the cloud.
    pub min_cluster_size: Option<usize>,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            eps: 8.0,
            min_points: 16,
            min_cluster_size: None,
        }
    }
}

impl ClusteringParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidParams("eps must be > 0".into()));
        }
        if self.min_points < 1 {
            return Err(Error::InvalidParams("min_points must be >= 1".into()));
        }
        Ok(())
    }

    pub fn min_cluster_size_for(&self, cloud_len: usize) -> usize {
        self.min_cluster_size
            .unwrap_or_else(|| ((cloud_len as f64) * 0.05).ceil() as usize)
            .max(1)
    }
}

/// Density clustering. A point is core when at least `min_points` points
/// (itself included) lie within `eps`; clusters are connected components
/// of core points, and each border point joins the cluster of its nearest
/// core neighbor. Cluster ids are numbered by the lowest point index they
/// contain, so the partition does not depend on input order.
pub fn dbscan(cloud: &PointCloud, params: &ClusteringParams) -> Result<Vec<i32>> {
    params.validate()?;
    let pts = &cloud.points;
    let n = pts.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let grid = UniformGrid::new(pts, params.eps);
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| grid.within(pts, &pts[i], params.eps))
        .collect();
    let core: Vec<bool> = neighbors
        .iter()
        .map(|nb| nb.len() >= params.min_points)
        .collect();

    // connected components over core points (union-find)
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &neighbors[i] {
            if core[j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut root_of = vec![usize::MAX; n];
    for i in 0..n {
        if core[i] {
            root_of[i] = find(&mut parent, i);
        }
    }
    // border points: nearest core neighbor, ties to the lexicographically
    // smaller position so the result is order-free
    let mut owner = root_of.clone();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let best = neighbors[i]
            .iter()
            .copied()
            .filter(|&j| core[j])
            .min_by(|&a, &b| {
                let da = (pts[a] - pts[i]).norm_squared();
                let db = (pts[b] - pts[i]).norm_squared();
                da.total_cmp(&db).then_with(|| lex(&pts[a], &pts[b]))
            });
        if let Some(j) = best {
            owner[i] = root_of[j];
        }
    }
    // number clusters by their smallest member position
    let mut first: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        if owner[i] != usize::MAX {
            first
                .entry(owner[i])
                .and_modify(|m| {
                    if lex(&pts[i], &pts[*m]).is_lt() {
                        *m = i
                    }
                })
                .or_insert(i);
        }
    }
    let mut roots: Vec<(usize, usize)> = first.into_iter().collect();
    roots.sort_by(|a, b| lex(&pts[a.1], &pts[b.1]));
    let id_of: BTreeMap<usize, i32> = roots
        .iter()
        .enumerate()
        .map(|(k, &(r, _))| (r, k as i32))
        .collect();
    Ok(owner
        .iter()
        .map(|&r| if r == usize::MAX { NOISE } else { id_of[&r] })
        .collect())
}

fn lex(a: &Point3, b: &Point3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// Sizes of each cluster id present in `ids` (noise excluded).
pub fn cluster_sizes(ids: &[i32]) -> BTreeMap<i32, usize> {
    let mut sizes = BTreeMap::new();
    for &id in ids.iter().filter(|&&id| id != NOISE) {
        *sizes.entry(id).or_insert(0) += 1;
    }
    sizes
}

/// Indices of points whose cluster has at least `min_cluster_size` members.
pub fn kept_indices(ids: &[i32], min_cluster_size: usize) -> Vec<usize> {
    let sizes = cluster_sizes(ids);
    (0..ids.len())
        .filter(|&i| ids[i] != NOISE && sizes[&ids[i]] >= min_cluster_size)
        .collect()
}

/// Drop noise and clusters smaller than `min_cluster_size`.
pub fn filter_small_clusters(
    cloud: &PointCloud,
    ids: &[i32],
    min_cluster_size: usize,
) -> Result<PointCloud> {
    if ids.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cluster ids for {} points",
            ids.len(),
            cloud.len()
        )));
    }
    let keep = kept_indices(ids, min_cluster_size);
    if keep.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(cloud.subset(&keep))
}

/// Rigid transform taking a cloud into its principal frame: centroid at the
/// origin, first axis along `x`, second along `z`, third along `y`.
pub fn canonical_frame(cloud: &PointCloud) -> Result<RigidTransform> {
    let pa = pca_of(&cloud.points)?;
    let target = Matrix3::<f64>::from_columns(&[Vector3::x(), Vector3::z(), -Vector3::y()]);
    let rotation = target * pa.axes.transpose();
    Ok(RigidTransform {
        rotation,
        translation: -(rotation * pa.center),
    })
}

/// Cluster centroids keyed by id.
pub fn cluster_centroids(cloud: &PointCloud, ids: &[i32]) -> BTreeMap<i32, Point3> {
    let mut acc: BTreeMap<i32, (Vector3<f64>, usize)> = BTreeMap::new();
    for (p, &id) in cloud.points.iter().zip(ids) {
        if id == NOISE {
            continue;
        }
        let e = acc.entry(id).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(id, (s, n))| (id, s / n as f64))
        .collect()
}

/// Split clusters of a canonicalized cloud into left (`x` below the cloud
/// centroid) and right.
pub fn split_left_right(cloud: &PointCloud, ids: &[i32]) -> Result<(Vec<i32>, Vec<i32>)> {
    let center = centroid_of(&cloud.points)?;
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (id, c) in cluster_centroids(cloud, ids) {
        let side = c.x - center.x;
        if side.abs() <= 1e-9 {
            return Err(Error::AmbiguousSide { cluster: id });
        }
        if side < 0.0 {
            left.push(id);
        } else {
            right.push(id);
        }
    }
    Ok((left, right))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

/// Median distance from each point to its nearest neighbor on the same side.
fn median_spacing(sides: [&PointCloud; 2]) -> Option<f64> {
    let mut d = Vec::new();
    for side in sides {
        if side.len() < 2 {
            continue;
        }
        let index = NearestIndex::new(&side.points);
        for p in &side.points {
            let nn = index.nearest_n(p, 2);
            d.push(nn[1].1.sqrt());
        }
    }
    median(d).filter(|&s| s > 0.0)
}

/// A flat stand-in sternum: a rectangular point grid (label 0) between the
/// medial-most planes of the two sides, covering their vertical extent, at
/// the median depth of the input. Inputs are in the canonical frame.
pub fn synth_sternum(left: &PointCloud, right: &PointCloud) -> Result<PointCloud> {
    if left.is_empty() || right.is_empty() {
        return Err(Error::MissingSide);
    }
    let x_left = left
        .points
        .iter()
        .map(|p| p.x)
        .fold(f64::NEG_INFINITY, f64::max);
    let x_right = right
        .points
        .iter()
        .map(|p| p.x)
        .fold(f64::INFINITY, f64::min);
    let all = left.points.iter().chain(&right.points);
    let z_lo = all.clone().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let z_hi = all.clone().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    let y = median(all.map(|p| p.y).collect()).expect("non-empty sides");

    let (x0, x1) = (x_left.min(x_right), x_left.max(x_right));
    let mut out = PointCloud::default();
    let Some(pitch) = median_spacing([left, right]) else {
        out.push(
            Point3::new(0.5 * (x0 + x1), y, 0.5 * (z_lo + z_hi)),
            STERNUM,
        );
        return Ok(out);
    };
    let nx = ((x1 - x0) / pitch).floor() as usize + 1;
    let nz = ((z_hi - z_lo) / pitch).floor() as usize + 1;
    let step = |lo: f64, hi: f64, n: usize, i: usize| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    for iz in 0..nz {
        for ix in 0..nx {
            out.push(
                Point3::new(step(x0, x1, nx, ix), y, step(z_lo, z_hi, nz, iz)),
                STERNUM,
            );
        }
    }
    Ok(out)
}

/// Assign branch labels per side by vertical order (top first). When a side
/// has more clusters than `rows`, only the `rows` largest are labeled; the
/// rest become [`UNASSIGNED`].
pub fn assign_branches(
    cloud: &PointCloud,
    ids: &[i32],
    left: &[i32],
    right: &[i32],
    rows: usize,
) -> PointCloud {
    let sizes = cluster_sizes(ids);
    let centroids = cluster_centroids(cloud, ids);
    let mut label_of: BTreeMap<i32, i32> = BTreeMap::new();
    for (side, clusters) in [left, right].into_iter().enumerate() {
        let mut by_size: Vec<i32> = clusters.to_vec();
        by_size.sort_by(|a, b| sizes[b].cmp(&sizes[a]).then(a.cmp(b)));
        by_size.truncate(rows);
        by_size.sort_by(|a, b| centroids[b].z.total_cmp(&centroids[a].z));
        for (row, id) in by_size.into_iter().enumerate() {
            label_of.insert(id, (side * rows + row + 1) as i32);
        }
    }
    PointCloud {
        points: cloud.points.clone(),
        labels: ids
            .iter()
            .map(|id| label_of.get(id).copied().unwrap_or(UNASSIGNED))
            .collect(),
    }
}

/// Root-mean-square distance from each point of `moving` to its nearest
/// point in `fixed`.
pub fn rms_nearest(moving: &[Point3], fixed: &NearestIndex) -> f64 {
    if moving.is_empty() {
        return 0.0;
    }
    let s: f64 = moving.iter().map(|p| fixed.nearest(p).1).sum();
    (s / moving.len() as f64).sqrt()
}

/// Outcome of [`coarse_align_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseAlignment {
    /// Maps subject coordinates into the template frame.
    pub transform: RigidTransform,
    pub rms_before: f64,
    pub rms_after: f64,
}

/// Rigid transform taking `subject` into the template frame by matching
/// sternum centroids and principal frames.
pub fn coarse_align(subject: &PointCloud, template: &PointCloud) -> Result<RigidTransform> {
    coarse_align_report(subject, template).map(|c| c.transform)
}

pub fn coarse_align_report(subject: &PointCloud, template: &PointCloud) -> Result<CoarseAlignment> {
    let ss = subject.with_label(STERNUM);
    let ts = template.with_label(STERNUM);
    if ss.is_empty() || ts.is_empty() {
        return Err(Error::MissingSternum);
    }
    let ts_index = NearestIndex::new(&ts.points);
    let rms_before = rms_nearest(&ss.points, &ts_index);
    let (pa_s, pa_t) = match (pca_of(&ss.points), pca_of(&ts.points)) {
        (Ok(a), Ok(b)) => (a, b),
        // a single-point sternum: translation only
        _ => {
            let shift = centroid_of(&ts.points)? - centroid_of(&ss.points)?;
            let transform = RigidTransform::from_translation(shift);
            let moved: Vec<Point3> = ss.points.iter().map(|p| transform.apply_point(p)).collect();
            let rms_after = rms_nearest(&moved, &ts_index);
            return Ok(pick_guarded(transform, rms_after, rms_before));
        }
    };

    let whole_index = NearestIndex::new(&template.points);
    let mut scored = Vec::with_capacity(4);
    for signs in [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ] {
        let flip = Matrix3::from_diagonal(&Vector3::from(signs));
        let rotation = pa_t.axes * flip * pa_s.axes.transpose();
        let transform = RigidTransform {
            rotation,
            translation: pa_t.center - rotation * pa_s.center,
        };
        let moved: Vec<Point3> = ss.points.iter().map(|p| transform.apply_point(p)).collect();
        scored.push((transform, rms_nearest(&moved, &ts_index)));
    }
    let best = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    // near-symmetric sterna: break near-ties on the whole cloud
    let contenders: Vec<&(RigidTransform, f64)> = scored
        .iter()
        .filter(|s| s.1 <= best * 1.05 + 1e-9)
        .collect();
    let chosen = if contenders.len() == 1 {
        *contenders[0]
    } else {
        let whole = |t: &RigidTransform| rms_nearest(&apply(t, subject).points, &whole_index);
        let mut pick = *contenders[0];
        let mut pick_score = whole(&pick.0);
        for c in &contenders[1..] {
            let s = whole(&c.0);
            if s < pick_score {
                pick = **c;
                pick_score = s;
            }
        }
        pick
    };
    Ok(pick_guarded(chosen.0, chosen.1, rms_before))
}

fn pick_guarded(transform: RigidTransform, rms_after: f64, rms_before: f64) -> CoarseAlignment {
    if rms_after <= rms_before {
        CoarseAlignment {
            transform,
            rms_before,
            rms_after,
        }
    } else {
        CoarseAlignment {
            transform: RigidTransform::identity(),
            rms_before,
            rms_after: rms_before,
        }
    }
}

/// Summary of [`clean_subject`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub cluster_count: usize,
    pub kept_clusters: usize,
    pub removed_points: usize,
    pub sternum_points: usize,
    /// Subject → template, row-major rotation.
    pub coarse_rotation: [f64; 9],
    pub coarse_translation: [f64; 3],
    pub sternum_rms_before: f64,
    pub sternum_rms_after: f64,
}

/// Full cleaning of a raw subject cloud: clustering, small-cluster removal,
/// left/right split in the principal frame, branch labeling, a synthesized
/// sternum, and coarse alignment to the template. The returned cloud stays
/// in the subject's own frame.
pub fn clean_subject(
    raw: &PointCloud,
    template: &PointCloud,
    params: &ClusteringParams,
    branch_count: usize,
) -> Result<(PointCloud, RigidTransform, PreprocessReport)> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("subject cloud"));
    }
    let unlabeled = PointCloud::new(raw.points.clone());
    let ids = dbscan(&unlabeled, params)?;
    let cluster_count = cluster_sizes(&ids).len();
    let keep = kept_indices(&ids, params.min_cluster_size_for(raw.len()));
    if keep.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    let kept = unlabeled.subset(&keep);
    let kept_ids: Vec<i32> = keep.iter().map(|&i| ids[i]).collect();

    let to_canon = canonical_frame(&kept)?;
    let canon = apply(&to_canon, &kept);
    let (left, right) = split_left_right(&canon, &kept_ids)?;
    let labeled = assign_branches(&canon, &kept_ids, &left, &right, branch_count / 2);
    let branches = labeled.filter(|_, l| l > 0);
    let half = (branch_count / 2) as i32;
    let sternum = synth_sternum(
        &branches.filter(|_, l| l <= half),
        &branches.filter(|_, l| l > half),
    )?;
    let mut cleaned_canon = branches;
    for (p, l) in sternum.points.iter().zip(&sternum.labels) {
        cleaned_canon.push(*p, *l);
    }
    let cleaned = apply(&to_canon.inverse(), &cleaned_canon);
    let align = coarse_align_report(&cleaned, template)?;
    let (rot, trans) = align.transform.to_row_major();
    let report = PreprocessReport {
        cluster_count,
        kept_clusters: cluster_sizes(&kept_ids).len(),
        removed_points: raw.len() - keep.len(),
        sternum_points: sternum.len(),
        coarse_rotation: rot,
        coarse_translation: trans,
        sternum_rms_before: align.rms_before,
        sternum_rms_after: align.rms_after,
    };
    Ok((cleaned, align.transform, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{branch_side, generate_pair, AnatomyParams, DeformParams};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut impl Rng, center: Point3, n: usize, r: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| loop {
                let v = Vector3::new(
                    rng.random_range(-r..r),
                    rng.random_range(-r..r),
                    rng.random_range(-r..r),
                );
                if v.norm() <= r {
                    break center + v;
                }
            })
            .collect()
    }

    /// Brute-force DBSCAN oracle: O(n²) neighbor lists, BFS over core points.
    fn brute_partition(pts: &[Point3], eps: f64, min_points: usize) -> Vec<Vec<usize>> {
        let n = pts.len();
        let nb: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| (pts[i] - pts[j]).norm() <= eps)
                    .collect()
            })
            .collect();
        let core: Vec<bool> = nb.iter().map(|v| v.len() >= min_points).collect();
        let mut comp = vec![usize::MAX; n];
        let mut groups = Vec::new();
        for s in 0..n {
            if !core[s] || comp[s] != usize::MAX {
                continue;
            }
            let g = groups.len();
            let mut stack = vec![s];
            comp[s] = g;
            let mut members = vec![s];
            while let Some(i) = stack.pop() {
                for &j in &nb[i] {
                    if core[j] && comp[j] == usize::MAX {
                        comp[j] = g;
                        stack.push(j);
                        members.push(j);
                    }
                }
            }
            groups.push(members);
        }
        groups
    }

    #[test]
    fn dbscan_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = blob(&mut rng, Point3::zeros(), 50, 2.0);
        pts.extend(blob(&mut rng, Point3::new(100.0, 0.0, 0.0), 50, 2.0));
        let params = ClusteringParams {
            eps: 8.0,
            min_points: 4,
            min_cluster_size: None,
        };
        let ids = dbscan(&PointCloud::new(pts.clone()), &params).unwrap();
        assert_eq!(cluster_sizes(&ids).len(), 2);
        assert!(ids.iter().all(|&i| i != NOISE));
        let oracle = brute_partition(&pts, 8.0, 4);
        assert_eq!(oracle.len(), 2);
        for g in oracle {
            assert!(g.iter().all(|&i| ids[i] == ids[g[0]]));
        }
    }

    #[test]
    fn dbscan_small_cases() {
        let params = ClusteringParams {
            eps: 8.0,
            min_points: 4,
            min_cluster_size: None,
        };
        assert_eq!(
            dbscan(&PointCloud::new(vec![Point3::zeros()]), &params).unwrap(),
            vec![NOISE]
        );
        let line = PointCloud::new((0..60).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect());
        let ids = dbscan(&line, &params).unwrap();
        assert!(ids.iter().all(|&i| i == 0));
        assert!(dbscan(&line, &ClusteringParams { eps: 0.0, ..params }).is_err());
    }

    #[test]
    fn dbscan_core_partition_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point3> = (0..400)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..60.0),
                    rng.random_range(0.0..60.0),
                    rng.random_range(0.0..6.0),
                )
            })
            .collect();
        let params = ClusteringParams {
            eps: 4.0,
            min_points: 6,
            min_cluster_size: None,
        };
        let ids = dbscan(&PointCloud::new(pts.clone()), &params).unwrap();
        let oracle = brute_partition(&pts, 4.0, 6);
        let mut seen = std::collections::BTreeSet::new();
        for g in &oracle {
            let id = ids[g[0]];
            assert!(id != NOISE && seen.insert(id));
            assert!(g.iter().all(|&i| ids[i] == id));
        }
    }

    #[test]
    fn dbscan_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..300)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                    0.0,
                )
            })
            .collect();
        let params = ClusteringParams {
            eps: 3.5,
            min_points: 5,
            min_cluster_size: None,
        };
        let ids = dbscan(&PointCloud::new(pts.clone()), &params).unwrap();
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Point3> = perm.iter().map(|&i| pts[i]).collect();
        let ids2 = dbscan(&PointCloud::new(shuffled), &params).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(ids[i], ids2[k]);
        }
    }

    #[test]
    fn filter_examples() {
        let cloud = PointCloud::new(vec![Point3::zeros(); 510]);
        let mut ids = vec![0; 10];
        ids.extend(vec![1; 500]);
        let kept = filter_small_clusters(&cloud, &ids, 100).unwrap();
        assert_eq!(kept.len(), 500);
        assert_eq!(filter_small_clusters(&cloud, &ids, 1).unwrap().len(), 510);
        assert!(matches!(
            filter_small_clusters(&cloud, &ids, 501),
            Err(Error::EmptyAfterFilter)
        ));
        let noisy = vec![NOISE; 510];
        assert!(matches!(
            filter_small_clusters(&cloud, &noisy, 1),
            Err(Error::EmptyAfterFilter)
        ));
    }

    #[test]
    fn split_examples() {
        let cloud = PointCloud::new(vec![
            Point3::new(-50.0, 0.0, 0.0),
            Point3::new(50.0, 0.0, 0.0),
        ]);
        let (l, r) = split_left_right(&cloud, &[0, 1]).unwrap();
        assert_eq!((l, r), (vec![0], vec![1]));
        assert!(matches!(
            split_left_right(&cloud, &[0, 0]),
            Err(Error::AmbiguousSide { cluster: 0 })
        ));
        let one_side = PointCloud::new(vec![
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(-2.0, 0.0, 0.0),
            Point3::new(9.0, 0.0, 0.0),
        ]);
        let (l, r) = split_left_right(&one_side, &[0, 0, 1]).unwrap();
        assert_eq!((l.len(), r.len()), (1, 1));
        let sym = PointCloud::new(vec![
            Point3::new(-5.0, 0.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(0.0, 3.0, 0.0),
        ]);
        assert!(matches!(
            split_left_right(&sym, &[0, 1, 2]),
            Err(Error::AmbiguousSide { cluster: 2 })
        ));
    }

    #[test]
    fn split_recovers_generator_sides() {
        let (t, ..) = generate_pair(&AnatomyParams::default()).unwrap();
        let branches = t.filter(|_, l| l > 0);
        let ids = dbscan(
            &PointCloud::new(branches.points.clone()),
            &ClusteringParams::default(),
        )
        .unwrap();
        assert_eq!(cluster_sizes(&ids).len(), 8);
        let canon = apply(&canonical_frame(&branches).unwrap(), &branches);
        let (l, r) = split_left_right(&canon, &ids).unwrap();
        assert_eq!((l.len(), r.len()), (4, 4));
        let side_of_cluster = |c: i32| {
            let i = ids.iter().position(|&x| x == c).unwrap();
            branch_side(branches.labels[i], 8).unwrap()
        };
        let ls: Vec<usize> = l.iter().map(|&c| side_of_cluster(c)).collect();
        let rs: Vec<usize> = r.iter().map(|&c| side_of_cluster(c)).collect();
        assert!(ls.iter().all(|&s| s == ls[0]) && rs.iter().all(|&s| s == rs[0]) && ls[0] != rs[0]);
    }

    #[test]
    fn synth_sternum_bounding_box() {
        let col = |x: f64| {
            PointCloud::new(
                (0..=60)
                    .map(|z| Point3::new(x, if x < 0.0 { 1.0 } else { 3.0 }, z as f64))
                    .collect(),
            )
        };
        let s = synth_sternum(&col(-20.0), &col(20.0)).unwrap();
        let (lo, hi) = s.bounds().unwrap();
        assert!((lo.x + 20.0).abs() < 1e-12 && (hi.x - 20.0).abs() < 1e-12);
        assert!(lo.z.abs() < 1e-12 && (hi.z - 60.0).abs() < 1e-12);
        assert!(s.points.iter().all(|p| (p.y - 2.0).abs() < 1e-12));
        assert!(s.labels.iter().all(|&l| l == STERNUM));
        assert_eq!(s.len(), 41 * 61);

        let single = synth_sternum(
            &PointCloud::new(vec![Point3::new(-5.0, 0.0, 0.0)]),
            &PointCloud::new(vec![Point3::new(5.0, 0.0, 0.0)]),
        )
        .unwrap();
        assert_eq!(single.len(), 1);
        assert!(matches!(
            synth_sternum(&PointCloud::default(), &col(1.0)),
            Err(Error::MissingSide)
        ));
    }

    fn template() -> PointCloud {
        generate_pair(&AnatomyParams::default()).unwrap().0
    }

    #[test]
    fn coarse_align_identity() {
        let t = template();
        let a = coarse_align(&t, &t).unwrap();
        assert!((a.rotation - Matrix3::identity()).abs().max() < 1e-6);
        assert!(a.translation.norm() < 1e-6);
    }

    #[test]
    fn coarse_align_recovers_rigid_motion() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let truth = RigidTransform::from_axis_angle(
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                rng.random_range(-3.0..3.0),
                Vector3::new(
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-40.0..40.0),
                ),
            );
            let subject = apply(&truth, &t);
            let est = coarse_align(&subject, &t).unwrap();
            let round = est.compose(&truth);
            assert!(round.angle() < 1e-3);
            assert!(round.translation.norm() < 0.1);
        }
    }

    #[test]
    fn coarse_align_improves_scaled_subject() {
        let t = template();
        let c = centroid_of(&t.with_label(STERNUM).points).unwrap();
        let moved =
            RigidTransform::from_axis_angle(Vector3::z(), 0.3, Vector3::new(5.0, -3.0, 2.0));
        let scaled = PointCloud {
            points: t
                .points
                .iter()
                .map(|p| moved.apply_point(&(c + 1.1 * (p - c))))
                .collect(),
            labels: t.labels.clone(),
        };
        let r = coarse_align_report(&scaled, &t).unwrap();
        assert!(r.rms_after <= r.rms_before);
        assert!(r.rms_after < 0.5 * r.rms_before);
        let no_sternum = t.filter(|_, l| l != STERNUM);
        assert!(matches!(
            coarse_align(&no_sternum, &t),
            Err(Error::MissingSternum)
        ));
    }

    #[test]
    fn clean_subject_end_to_end() {
        let params = AnatomyParams {
            rng_seed: 4,
            deform: DeformParams::mild(),
            ..AnatomyParams::default()
        };
        let (t, s, _) = generate_pair(&params).unwrap();
        let raw = s.filter(|_, l| l != STERNUM);
        let (cleaned, _, report) =
            clean_subject(&raw, &t, &ClusteringParams::default(), 8).unwrap();
        assert!(report.kept_clusters >= 8);
        assert!(report.sternum_points > 0);
        assert!(report.removed_points < raw.len());
        for l in 1..=8 {
            assert!(cleaned.labels.contains(&l));
        }
        assert!(report.sternum_rms_after <= report.sternum_rms_before);
    }
}
