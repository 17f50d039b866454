//! Skeleton graphs and their geodesic-restricted SOM fit.
//!
//! A template graph has one node chain along the sternum and one per
//! cartilage branch, each branch hanging off its nearest sternum node, so
//! the graph is a tree. Shortest-path (geodesic) distances between nodes
//! are computed once from the template geometry and stay frozen: during
//! fitting the neighborhood of the best-matching node is measured along
//! the tree, so an update never leaks across to a neighboring branch.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{centroid_of, pca_of, Point3, PointCloud, STERNUM};
use crate::rng::stage_rng;
use crate::spatial::NearestIndex;

/// Node count of the default dense template.
pub const DENSE_NODE_COUNT: usize = 245;
/// Node count of the sparse keypoint template.
pub const SPARSE_NODE_COUNT: usize = 35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub position: Point3,
    /// 0 for sternum nodes, the branch label otherwise.
    pub branch: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub nodes: Vec<GraphNode>,
    /// Directed `(from, to)` pairs, oriented sternum-outward.
    pub edges: Vec<(usize, usize)>,
    /// Row-major `n × n` shortest-path lengths (mm), edge direction ignored.
    geodesic: Vec<f64>,
}

impl SkeletonGraph {
    /// Build from nodes and edges; geodesics are computed from the current
    /// node positions.
    pub fn new(nodes: Vec<GraphNode>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::EmptyInput("graph without nodes"));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n || a == b) {
            return Err(Error::GraphMismatch(format!("invalid edge ({a}, {b})")));
        }
        let positions: Vec<Point3> = nodes.iter().map(|n| n.position).collect();
        let geodesic = all_pairs_geodesic(&positions, &edges);
        Ok(Self {
            nodes,
            edges,
            geodesic,
        })
    }

    /// Build with a supplied geodesic matrix.
    pub fn with_geodesic(
        nodes: Vec<GraphNode>,
        edges: Vec<(usize, usize)>,
        geodesic: Vec<f64>,
    ) -> Result<Self> {
        let n = nodes.len();
        if geodesic.len() != n * n {
            return Err(Error::GraphMismatch(format!(
                "geodesic matrix has {} entries for {n} nodes",
                geodesic.len()
            )));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n || a == b) {
            return Err(Error::GraphMismatch(format!("invalid edge ({a}, {b})")));
        }
        Ok(Self {
            nodes,
            edges,
            geodesic,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn geodesic(&self, i: usize, j: usize) -> f64 {
        self.geodesic[i * self.nodes.len() + j]
    }

    pub fn geodesic_row(&self, i: usize) -> &[f64] {
        let n = self.nodes.len();
        &self.geodesic[i * n..(i + 1) * n]
    }

    pub fn geodesic_matrix(&self) -> &[f64] {
        &self.geodesic
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn mean_edge_length(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges
            .iter()
            .map(|&(a, b)| (self.nodes[a].position - self.nodes[b].position).norm())
            .sum::<f64>()
            / self.edges.len() as f64
    }

    /// Same topology and geodesics, new positions.
    pub fn with_positions(&self, positions: &[Point3]) -> Self {
        let mut g = self.clone();
        for (node, p) in g.nodes.iter_mut().zip(positions) {
            node.position = *p;
        }
        g
    }

    /// Node sequence of a shortest path from `a` to `b`.
    pub fn shortest_path(&self, a: usize, b: usize) -> Vec<usize> {
        let adj = adjacency(self.nodes.len(), &self.edges);
        let mut path = vec![a];
        let mut cur = a;
        while cur != b {
            let next = adj[cur].iter().copied().find(|&nb| {
                self.geodesic(nb, b) < self.geodesic(cur, b)
                    && (self.geodesic(cur, nb) + self.geodesic(nb, b) - self.geodesic(cur, b)).abs()
                        <= 1e-9 * self.geodesic(cur, b).max(1.0)
            });
            match next {
                Some(nb) => {
                    path.push(nb);
                    cur = nb;
                }
                None => break,
            }
        }
        path
    }

    pub fn to_file(&self, include_geodesic: bool) -> GraphFile {
        let n = self.nodes.len();
        GraphFile {
            nodes: self
                .nodes
                .iter()
                .map(|node| NodeRecord {
                    x: node.position.x,
                    y: node.position.y,
                    z: node.position.z,
                    branch: node.branch,
                })
                .collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            geodesic: include_geodesic
                .then(|| self.geodesic.chunks(n).map(|r| r.to_vec()).collect()),
        }
    }

    pub fn from_file(file: GraphFile) -> Result<Self> {
        let nodes: Vec<GraphNode> = file
            .nodes
            .iter()
            .map(|r| GraphNode {
                position: Point3::new(r.x, r.y, r.z),
                branch: r.branch,
            })
            .collect();
        let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        match file.geodesic {
            Some(rows) => {
                if rows.len() != nodes.len() || rows.iter().any(|r| r.len() != nodes.len()) {
                    return Err(Error::GraphMismatch("geodesic matrix shape".into()));
                }
                Self::with_geodesic(nodes, edges, rows.concat())
            }
            None => Self::new(nodes, edges),
        }
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GraphFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_file(file)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_file(true)).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// On-disk graph layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[usize; 2]>,
    /// Frozen geodesic matrix; recomputed from positions when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geodesic: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub branch: i32,
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

#[derive(PartialEq)]
struct Visit(f64, usize);

impl Eq for Visit {}

impl Ord for Visit {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Visit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from every node over undirected edges weighted by Euclidean
/// length. Unreachable pairs are `f64::INFINITY`.
pub fn all_pairs_geodesic(positions: &[Point3], edges: &[(usize, usize)]) -> Vec<f64> {
    let n = positions.len();
    let adj = adjacency(n, edges);
    let mut out = vec![f64::INFINITY; n * n];
    for src in 0..n {
        let row = &mut out[src * n..(src + 1) * n];
        row[src] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Visit(0.0, src));
        while let Some(Visit(d, u)) = heap.pop() {
            if d > row[u] {
                continue;
            }
            for &v in &adj[u] {
                let nd = d + (positions[u] - positions[v]).norm();
                if nd < row[v] {
                    row[v] = nd;
                    heap.push(Visit(nd, v));
                }
            }
        }
    }
    // the two searches sum edges in different orders
    for i in 0..n {
        for j in i + 1..n {
            let d = out[i * n + j].min(out[j * n + i]);
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    out
}

/// Split `total` nodes across chains proportionally to `lengths`, at least
/// `min_each` per chain (largest-remainder rounding).
fn allocate(lengths: &[f64], total: usize, min_each: usize) -> Result<Vec<usize>> {
    let k = lengths.len();
    if total < k * min_each {
        return Err(Error::InvalidParams(format!(
            "{total} nodes cannot cover {k} chains with {min_each} nodes each"
        )));
    }
    let spare = (total - k * min_each) as f64;
    let sum: f64 = lengths.iter().sum();
    let shares: Vec<f64> = lengths.iter().map(|l| spare * l / sum).collect();
    let mut counts: Vec<usize> = shares
        .iter()
        .map(|s| min_each + s.floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Centerline polyline of a point set: bin centroids along its principal
/// axis, the axis oriented so that `direction_hint` is positive.
fn centerline(points: &[Point3], direction_hint: &nalgebra::Vector3<f64>) -> Result<Vec<Point3>> {
    if points.len() == 1 {
        return Ok(vec![points[0]]);
    }
    let pa = pca_of(points)?;
    let mut axis = pa.axis(0);
    if axis.dot(direction_hint) < 0.0 {
        axis = -axis;
    }
    let proj: Vec<f64> = points.iter().map(|p| (p - pa.center).dot(&axis)).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = (points.len() / 25).clamp(4, 40);
    let width = (hi - lo) / bins as f64;
    let mut sums = vec![(nalgebra::Vector3::zeros(), 0usize); bins];
    for (p, &t) in points.iter().zip(&proj) {
        let b = (((t - lo) / width) as usize).min(bins - 1);
        sums[b].0 += p;
        sums[b].1 += 1;
    }
    Ok(sums
        .into_iter()
        .filter(|(_, c)| *c > 0)
        .map(|(s, c)| s / c as f64)
        .collect())
}

fn polyline_length(line: &[Point3]) -> f64 {
    line.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// `count` points evenly spaced by arc length along a polyline, ends included.
fn resample(line: &[Point3], count: usize) -> Vec<Point3> {
    if line.len() == 1 || count == 1 {
        let c = centroid_of(line).expect("non-empty polyline");
        return if count == 1 {
            vec![c]
        } else {
            vec![line[0]; count]
        };
    }
    let total = polyline_length(line);
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    let mut walked = 0.0;
    for k in 0..count {
        let target = total * k as f64 / (count - 1) as f64;
        while seg + 1 < line.len() - 1 && walked + (line[seg + 1] - line[seg]).norm() < target {
            walked += (line[seg + 1] - line[seg]).norm();
            seg += 1;
        }
        let len = (line[seg + 1] - line[seg]).norm();
        let f = if len > 0.0 {
            ((target - walked) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(line[seg] + f * (line[seg + 1] - line[seg]));
    }
    out
}

/// The dense 245-node template graph.
pub fn build_template_graph(template: &PointCloud) -> Result<SkeletonGraph> {
    build_template_graph_with(template, DENSE_NODE_COUNT, 8)
}

/// Template graph with `total_nodes` nodes over a sternum chain and
/// `branch_count` branch chains.
pub fn build_template_graph_with(
    template: &PointCloud,
    total_nodes: usize,
    branch_count: usize,
) -> Result<SkeletonGraph> {
    let sternum = template.with_label(STERNUM);
    if sternum.is_empty() {
        return Err(Error::MissingSternum);
    }
    let mut branch_points = Vec::with_capacity(branch_count);
    for label in 1..=branch_count as i32 {
        let b = template.with_label(label);
        if b.is_empty() {
            return Err(Error::MissingBranch(label));
        }
        branch_points.push(b.points);
    }
    let sternum_center = centroid_of(&sternum.points)?;
    let half = branch_count / 2;
    // sternum runs from the top branches towards the bottom ones
    let top: Vec<Point3> = [0, half]
        .iter()
        .map(|&k| centroid_of(&branch_points[k]).expect("non-empty branch"))
        .collect();
    let top_center = centroid_of(&top)?;
    let mut lines = vec![centerline(&sternum.points, &(sternum_center - top_center))?];
    for pts in &branch_points {
        let c = centroid_of(pts)?;
        lines.push(centerline(pts, &(c - sternum_center))?);
    }
    let lengths: Vec<f64> = lines.iter().map(|l| polyline_length(l).max(1e-6)).collect();
    let counts = allocate(&lengths, total_nodes, 2)?;

    let mut nodes = Vec::with_capacity(total_nodes);
    let mut edges = Vec::with_capacity(total_nodes - 1);
    for p in resample(&lines[0], counts[0]) {
        nodes.push(GraphNode {
            position: p,
            branch: STERNUM,
        });
    }
    let sternum_nodes = counts[0];
    for i in 1..sternum_nodes {
        edges.push((i - 1, i));
    }
    for (k, line) in lines.iter().enumerate().skip(1) {
        let start = nodes.len();
        for p in resample(line, counts[k]) {
            nodes.push(GraphNode {
                position: p,
                branch: k as i32,
            });
        }
        let anchor = (0..sternum_nodes)
            .min_by(|&a, &b| {
                (nodes[a].position - nodes[start].position)
                    .norm_squared()
                    .total_cmp(&(nodes[b].position - nodes[start].position).norm_squared())
            })
            .expect("sternum chain is non-empty");
        edges.push((anchor, start));
        for i in start + 1..nodes.len() {
            edges.push((i - 1, i));
        }
    }
    SkeletonGraph::new(nodes, edges)
}

/// Distance used for the SOM neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodMetric {
    /// Frozen shortest-path length along the graph.
    #[default]
    Geodesic,
    /// Straight-line distance between current node positions (ablation).
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SomParams {
    /// Epochs over the cloud.
    pub iterations: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    /// Initial neighborhood radius, mm; `None` means twice the mean edge length.
    pub sigma0: Option<f64>,
    pub sigma_decay: f64,
    pub rng_seed: u64,
    pub metric: NeighborhoodMetric,
}

impl Default for SomParams {
    fn default() -> Self {
        Self {
            iterations: 30,
            lr0: 0.5,
            lr_decay: 0.9,
            sigma0: None,
            sigma_decay: 0.9,
            rng_seed: 0,
            metric: NeighborhoodMetric::Geodesic,
        }
    }
}

impl SomParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0 <= 1.0) {
            return Err(Error::InvalidParams("lr0 must be in (0, 1]".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidParams("iterations must be >= 1".into()));
        }
        if let Some(s) = self.sigma0 {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidParams("sigma0 must be > 0".into()));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
            || !(self.sigma_decay > 0.0 && self.sigma_decay <= 1.0)
        {
            return Err(Error::InvalidParams(
                "decay factors must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Neighborhood weight: Gaussian in distance, 1 at the BMU itself.
pub fn neighborhood(distance: f64, sigma: f64) -> f64 {
    (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

fn best_matching(nodes: &[Point3], p: &Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, w) in nodes.iter().enumerate() {
        let d = (w - p).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Online SOM fit of node positions to `cloud`.
///
/// Every sampled point pulls all nodes towards itself with weight
/// `θ(BMU, s)·lr`, where θ is Gaussian in the frozen geodesic distance
/// from the best-matching node. Learning rate and radius decay
/// geometrically per epoch; each epoch visits the cloud in a seeded
/// shuffled order. Topology and geodesics are left untouched.
pub fn som_fit(
    graph: &SkeletonGraph,
    cloud: &PointCloud,
    params: &SomParams,
) -> Result<SkeletonGraph> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("SOM fit needs a non-empty cloud"));
    }
    let n = graph.len();
    let sigma0 = match params.sigma0 {
        Some(s) => s,
        None => {
            let e = graph.mean_edge_length();
            if e > 0.0 {
                2.0 * e
            } else {
                1.0
            }
        }
    };
    let mut w = graph.positions();
    let mut rng = stage_rng(params.rng_seed, "som");
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    let mut theta = vec![0.0; n * n];
    for epoch in 0..params.iterations {
        let lr = params.lr0 * params.lr_decay.powi(epoch as i32);
        let sigma = sigma0 * params.sigma_decay.powi(epoch as i32);
        if params.metric == NeighborhoodMetric::Geodesic {
            for (t, g) in theta.iter_mut().zip(graph.geodesic_matrix()) {
                *t = neighborhood(*g, sigma);
            }
        }
        order.shuffle(&mut rng);
        for &k in &order {
            let p = cloud.points[k];
            let bmu = best_matching(&w, &p);
            match params.metric {
                NeighborhoodMetric::Geodesic => {
                    let row = &theta[bmu * n..(bmu + 1) * n];
                    for (ws, &t) in w.iter_mut().zip(row) {
                        *ws += (t * lr) * (p - *ws);
                    }
                }
                NeighborhoodMetric::Euclidean => {
                    let center = w[bmu];
                    for ws in w.iter_mut() {
                        let t = neighborhood((*ws - center).norm(), sigma);
                        *ws += (t * lr) * (p - *ws);
                    }
                }
            }
        }
    }
    Ok(graph.with_positions(&w))
}

/// Mean distance from each cloud point to its nearest node.
pub fn quantization_error(graph: &SkeletonGraph, cloud: &PointCloud) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let index = NearestIndex::new(&graph.positions());
    cloud
        .points
        .iter()
        .map(|p| index.nearest(p).1.sqrt())
        .sum::<f64>()
        / cloud.len() as f64
}

/// Identity pairing of two graphs sharing a topology.
pub fn pair_nodes(g_ct: &SkeletonGraph, g_us: &SkeletonGraph) -> Result<Vec<(usize, usize)>> {
    if g_ct.len() != g_us.len() {
        return Err(Error::GraphMismatch(format!(
            "{} vs {} nodes",
            g_ct.len(),
            g_us.len()
        )));
    }
    if g_ct.edges != g_us.edges {
        return Err(Error::GraphMismatch("edge sets differ".into()));
    }
    if g_ct
        .nodes
        .iter()
        .zip(&g_us.nodes)
        .any(|(a, b)| a.branch != b.branch)
    {
        return Err(Error::GraphMismatch("branch ids differ".into()));
    }
    Ok((0..g_ct.len()).map(|i| (i, i)).collect())
}

/// Branch nodes whose nearest cloud point carries a different label.
pub fn cross_branch_assignments(graph: &SkeletonGraph, cloud: &PointCloud) -> usize {
    let index = NearestIndex::new(&cloud.points);
    graph
        .nodes
        .iter()
        .filter(|node| node.branch > 0)
        .filter(|node| cloud.labels[index.nearest(&node.position).0] != node.branch)
        .count()
}

/// Two parallel straight branches 40 mm apart (labels 1 and 2) and a
/// U-shaped graph whose two chains start almost on top of each other
/// midway between them, joined through a single connector node.
pub fn two_branch_stress_instance(seed: u64) -> (SkeletonGraph, PointCloud) {
    use rand::Rng;
    let mut rng = stage_rng(seed, "somgraph/stress");
    let mut cloud = PointCloud::default();
    for (label, z) in [(1, 0.0), (2, 40.0)] {
        for _ in 0..300 {
            let x = rng.random_range(0.0..100.0);
            let y = rng.random_range(-1.5..1.5);
            let dz = rng.random_range(-1.5..1.5);
            cloud.push(Point3::new(x, y, z + dz), label);
        }
    }
    let per_chain = 20;
    let mut nodes = vec![GraphNode {
        position: Point3::new(-10.0, 0.0, 20.0),
        branch: STERNUM,
    }];
    let mut edges = Vec::new();
    for (label, z) in [(1, 19.5), (2, 20.5)] {
        let start = nodes.len();
        for i in 0..per_chain {
            nodes.push(GraphNode {
                position: Point3::new(100.0 * i as f64 / (per_chain - 1) as f64, 0.0, z),
                branch: label,
            });
        }
        edges.push((0, start));
        for i in start + 1..nodes.len() {
            edges.push((i - 1, i));
        }
    }
    let graph = SkeletonGraph::new(nodes, edges).expect("valid stress graph");
    (graph, cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pair, AnatomyParams};

    fn template() -> PointCloud {
        generate_pair(&AnatomyParams::default()).unwrap().0
    }

    /// Floyd–Warshall oracle.
    fn floyd(positions: &[Point3], edges: &[(usize, usize)]) -> Vec<f64> {
        let n = positions.len();
        let mut d = vec![f64::INFINITY; n * n];
        for i in 0..n {
            d[i * n + i] = 0.0;
        }
        for &(a, b) in edges {
            let w = (positions[a] - positions[b]).norm();
            d[a * n + b] = w;
            d[b * n + a] = w;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i * n + k] + d[k * n + j];
                    if via < d[i * n + j] {
                        d[i * n + j] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn template_graph_is_a_245_node_tree() {
        let g = build_template_graph(&template()).unwrap();
        assert_eq!(g.len(), 245);
        assert_eq!(g.edges.len(), 244);
        let n = g.len();
        assert!(g.geodesic_matrix().iter().all(|d| d.is_finite()));
        for i in 0..n {
            assert_eq!(g.geodesic(i, i), 0.0);
            for j in 0..n {
                assert_eq!(g.geodesic(i, j), g.geodesic(j, i));
                let e = (g.nodes[i].position - g.nodes[j].position).norm();
                assert!(g.geodesic(i, j) >= e - 1e-9);
            }
        }
        let oracle = floyd(&g.positions(), &g.edges);
        for (a, b) in g.geodesic_matrix().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        for label in 0..=8 {
            assert!(g.nodes.iter().filter(|nd| nd.branch == label).count() >= 2);
        }
    }

    #[test]
    fn cross_branch_paths_pass_the_sternum() {
        let g = build_template_graph(&template()).unwrap();
        let a = g.nodes.iter().rposition(|nd| nd.branch == 2).unwrap();
        let b = g.nodes.iter().rposition(|nd| nd.branch == 7).unwrap();
        let path = g.shortest_path(a, b);
        assert_eq!(*path.last().unwrap(), b);
        assert!(path.iter().any(|&k| g.nodes[k].branch == STERNUM));
        // same-side neighbors also route through the sternum
        let c = g.nodes.iter().rposition(|nd| nd.branch == 3).unwrap();
        assert!(g
            .shortest_path(a, c)
            .iter()
            .any(|&k| g.nodes[k].branch == STERNUM));
    }

    #[test]
    fn missing_branch_is_reported() {
        let cut = template().filter(|_, l| l != 5);
        assert!(matches!(
            build_template_graph(&cut),
            Err(Error::MissingBranch(5))
        ));
    }

    #[test]
    fn single_node_recurrence() {
        let g = SkeletonGraph::new(
            vec![GraphNode {
                position: Point3::zeros(),
                branch: 1,
            }],
            vec![],
        )
        .unwrap();
        let cloud = PointCloud::new(vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
            Point3::new(0.0, 0.0, 3.0),
        ]);
        let params = SomParams {
            iterations: 1,
            lr0: 1.0,
            sigma0: Some(1.0),
            ..SomParams::default()
        };
        let fit = som_fit(&g, &cloud, &params).unwrap();
        // lr = 1: the node lands on the last sampled point; replay the shuffle
        let mut order: Vec<usize> = (0..3).collect();
        order.shuffle(&mut stage_rng(0, "som"));
        assert_eq!(fit.nodes[0].position, cloud.points[*order.last().unwrap()]);

        // small constant rate, many epochs: the scalar recurrence
        // w ← w + lr (p − w) averages towards the centroid
        let params = SomParams {
            iterations: 400,
            lr0: 0.01,
            lr_decay: 1.0,
            sigma0: Some(1.0),
            ..SomParams::default()
        };
        let fit = som_fit(&g, &cloud, &params).unwrap();
        let c = centroid_of(&cloud.points).unwrap();
        assert!((fit.nodes[0].position - c).norm() < 0.1);
    }

    #[test]
    fn node_positions_are_a_fixed_point() {
        let g = build_template_graph(&template()).unwrap();
        let cloud = PointCloud::new(g.positions());
        let params = SomParams {
            iterations: 2,
            sigma0: Some(1e-6),
            ..SomParams::default()
        };
        let fit = som_fit(&g, &cloud, &params).unwrap();
        for (a, b) in g.positions().iter().zip(fit.positions()) {
            assert!((a - b).norm() <= 1e-9);
        }
    }

    #[test]
    fn fit_is_deterministic_and_keeps_topology() {
        let t = template();
        let g = build_template_graph(&t).unwrap();
        let params = SomParams {
            iterations: 5,
            rng_seed: 3,
            ..SomParams::default()
        };
        let a = som_fit(&g, &t, &params).unwrap();
        let b = som_fit(&g, &t, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.edges, g.edges);
        assert_eq!(a.geodesic_matrix(), g.geodesic_matrix());
        let (lo, hi) = t.bounds().unwrap();
        for p in a.positions() {
            assert!((0..3).all(|k| p[k] >= lo[k] - 1e-9 && p[k] <= hi[k] + 1e-9));
        }
        assert!(som_fit(&g, &PointCloud::default(), &params).is_err());
        assert!(som_fit(&g, &t, &SomParams { lr0: 1.5, ..params }).is_err());
    }

    #[test]
    fn neighborhood_shape() {
        assert_eq!(neighborhood(0.0, 3.0), 1.0);
        let mut prev = 1.0;
        for k in 1..50 {
            let t = neighborhood(k as f64 * 0.5, 3.0);
            assert!(t > 0.0 && t <= prev);
            prev = t;
        }
    }

    #[test]
    fn geodesic_som_keeps_branches_apart() {
        for seed in 0..3 {
            let (graph, cloud) = two_branch_stress_instance(seed);
            let geo = SomParams {
                sigma0: Some(5.0),
                rng_seed: seed,
                ..SomParams::default()
            };
            let euc = SomParams {
                metric: NeighborhoodMetric::Euclidean,
                ..geo
            };
            let g1 = som_fit(&graph, &cloud, &geo).unwrap();
            let g2 = som_fit(&graph, &cloud, &euc).unwrap();
            assert_eq!(cross_branch_assignments(&g1, &cloud), 0, "seed {seed}");
            assert!(cross_branch_assignments(&g2, &cloud) >= 1, "seed {seed}");
        }
    }

    #[test]
    fn pairing() {
        let g = build_template_graph(&template()).unwrap();
        let pairs = pair_nodes(&g, &g).unwrap();
        assert_eq!(pairs.len(), 245);
        assert!(pairs
            .iter()
            .enumerate()
            .all(|(k, &(a, b))| a == k && b == k));
        let mut smaller = g.clone();
        smaller.nodes.pop();
        assert!(matches!(
            pair_nodes(&g, &smaller),
            Err(Error::GraphMismatch(_))
        ));
    }

    #[test]
    fn graph_json_round_trip_keeps_frozen_geodesic() {
        let t = template();
        let g = build_template_graph(&t).unwrap();
        let moved = som_fit(
            &g,
            &t,
            &SomParams {
                iterations: 2,
                ..SomParams::default()
            },
        )
        .unwrap();
        let text = serde_json::to_string(&moved.to_file(true)).unwrap();
        let back = SkeletonGraph::from_file(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, moved);
        let bad = r#"{"nodes":[],"edges":[],"extra":1}"#;
        assert!(serde_json::from_str::<GraphFile>(bad).is_err());
    }
}
