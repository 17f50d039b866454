//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially so
//! the runtime limits are measured without competing tests. Exits non-zero
//! if any criterion fails.

use std::time::Instant;

use costalign_core::baselines::{cpd_nonrigid, icp, CpdParams, IcpParams};
use costalign_core::eval::{
    boundary_loss, classification_metrics, dice, iou, run_benchmark, summary_csv, waypoint_errors,
    BenchConfig, BenchParams, ConfusionCounts, Method, RegistrationReport,
};
use costalign_core::geom::{
    apply, fit_rigid_points, format_xyzl, rigid_residual, Point3, PointCloud, RigidTransform,
};
use costalign_core::register::{
    blend_weights, register_pipeline, warp_point, BlendMode, LocalTransformField, PipelineParams,
    RegisterParams,
};
use costalign_core::rng::stage_rng;
use costalign_core::shaperepair::{
    build_manifold, ellipse_dataset, repair, shape_valid, train_embedding, wedge_decay, BinaryMask,
    EllipseSpec, ManifoldParams, DEFAULT_LATENT_DIM, DEFAULT_WEDGE_SPAN,
};
use costalign_core::somgraph::{
    cross_branch_assignments, som_fit, two_branch_stress_instance, NeighborhoodMetric, SomParams,
};
use costalign_core::spatial::NearestIndex;
use costalign_core::synth::{generate_pair, AnatomyParams, DeformProfile};
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// Pinned limits.
const IDENTITY_MEAN_MM: f64 = 0.5;
const RUN_SECONDS: f64 = 10.0;
const RIGID_MEAN_MM: f64 = 1.0;
const RIGID_MAX_DEG: f64 = 20.0;
const RIGID_MAX_MM: f64 = 30.0;
const ORDER_MARGIN: f64 = 0.20;
const CPD_MARGIN: f64 = 0.10;
const ORDER_SECONDS: f64 = 600.0;
const STRESS_SIGMA0: f64 = 5.0;
const UNITY_TOL: f64 = 1e-12;
const RIGID_FIELD_TOL: f64 = 1e-9;
const RECOVERY_TOL: f64 = 1e-9;
const REPAIR_SHARE: f64 = 0.90;
const FULL_MANIFOLD: usize = 110_000;
const FULL_MANIFOLD_SECONDS: f64 = 300.0;
const CI_MANIFOLD: usize = 10_000;
const CI_MANIFOLD_SECONDS: f64 = 30.0;
const IOU_TOL: f64 = 1e-12;
const CPD_SLACK: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..=max_angle))
}

fn random_rigid(rng: &mut impl Rng, max_angle: f64, max_shift: f64) -> RigidTransform {
    let q = random_rotation(rng, max_angle);
    let shift = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() <= 1.0 {
            break v * max_shift;
        }
    };
    RigidTransform::new(*q.to_rotation_matrix().matrix(), shift).expect("proper rotation")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn identity_registration() -> Outcome {
    let (mut worst_mean, mut worst_secs) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let params = AnatomyParams {
            rng_seed: seed,
            ..AnatomyParams::default()
        };
        let (template, _, truth) = generate_pair(&params).expect("generator");
        let pipeline = PipelineParams {
            rng_seed: seed,
            ..PipelineParams::default()
        };
        let t0 = Instant::now();
        let out =
            match register_pipeline(&template, &template, &truth.waypoints_template, &pipeline) {
                Ok(o) => o,
                Err(e) => return outcome(false, format!("seed {seed}: {e}")),
            };
        worst_secs = worst_secs.max(t0.elapsed().as_secs_f64());
        let errors =
            waypoint_errors(&out.waypoints, &truth.waypoints_template).expect("18 waypoints");
        assert_eq!(errors.len(), 18);
        worst_mean = worst_mean.max(mean(&errors));
    }
    outcome(
        worst_mean <= IDENTITY_MEAN_MM && worst_secs <= RUN_SECONDS,
        format!("worst mean {worst_mean:.4} mm (limit {IDENTITY_MEAN_MM}), slowest run {worst_secs:.2} s (limit {RUN_SECONDS})"),
    )
}

fn rigid_recovery() -> Outcome {
    let mut means = Vec::new();
    for seed in 0..10 {
        let params = AnatomyParams {
            rng_seed: seed,
            ..AnatomyParams::default()
        };
        let (template, _, truth) = generate_pair(&params).expect("generator");
        let mut rng = stage_rng(seed, "acceptance/rigid");
        let t = random_rigid(&mut rng, RIGID_MAX_DEG.to_radians(), RIGID_MAX_MM);
        let subject = apply(&t, &template);
        let expected: Vec<Point3> = truth
            .waypoints_template
            .iter()
            .map(|p| t.apply_point(p))
            .collect();
        let pipeline = PipelineParams {
            rng_seed: seed,
            ..PipelineParams::default()
        };
        match register_pipeline(&template, &subject, &truth.waypoints_template, &pipeline) {
            Ok(out) => means.push(mean(
                &waypoint_errors(&out.waypoints, &expected).expect("18 waypoints"),
            )),
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        }
    }
    let avg = mean(&means);
    let worst = means.iter().copied().fold(0.0, f64::max);
    outcome(
        avg <= RIGID_MEAN_MM,
        format!("mean over 10 seeds {avg:.4} mm (limit {RIGID_MEAN_MM}), worst seed {worst:.4} mm"),
    )
}

fn method_ordering() -> Outcome {
    let config = BenchConfig {
        seeds: (0..20).collect(),
        profiles: vec![DeformProfile::Mild],
        methods: Method::ALL.to_vec(),
        params: BenchParams::default(),
    };
    let t0 = Instant::now();
    let reports = run_benchmark(&config).expect("valid config");
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| format!("{} seed {:?}: {}", r.method, r.seed, r.status))
        .collect();
    if !failed.is_empty() {
        return outcome(false, format!("failed rows: {}", failed.join("; ")));
    }
    let method_mean = |m: Method| {
        let v: Vec<f64> = reports
            .iter()
            .filter(|r| r.method == m.name())
            .map(|r| r.mean_mm.expect("ok row"))
            .collect();
        mean(&v)
    };
    let (dense, sparse, icp_m, cpd) = (
        method_mean(Method::Dense),
        method_mean(Method::Sparse),
        method_mean(Method::Icp),
        method_mean(Method::Cpd),
    );
    let pass = dense <= (1.0 - ORDER_MARGIN) * sparse
        && dense <= (1.0 - ORDER_MARGIN) * icp_m
        && dense <= (1.0 - CPD_MARGIN) * cpd
        && secs <= ORDER_SECONDS;
    outcome(
        pass,
        format!(
            "dense {dense:.3}, sparse {sparse:.3}, icp {icp_m:.3}, cpd {cpd:.3} mm; margins vs sparse {:.0}%, icp {:.0}%, cpd {:.0}%; {secs:.1} s",
            100.0 * (1.0 - dense / sparse),
            100.0 * (1.0 - dense / icp_m),
            100.0 * (1.0 - dense / cpd)
        ),
    )
}

fn branch_fidelity() -> Outcome {
    let (mut geo_total, mut euc_min) = (0usize, usize::MAX);
    for seed in 0..10 {
        let (graph, cloud) = two_branch_stress_instance(seed);
        let geo = SomParams {
            sigma0: Some(STRESS_SIGMA0),
            rng_seed: seed,
            ..SomParams::default()
        };
        let euc = SomParams {
            metric: NeighborhoodMetric::Euclidean,
            ..geo
        };
        let g = som_fit(&graph, &cloud, &geo).expect("som");
        let e = som_fit(&graph, &cloud, &euc).expect("som");
        geo_total += cross_branch_assignments(&g, &cloud);
        euc_min = euc_min.min(cross_branch_assignments(&e, &cloud));
    }
    outcome(
        geo_total == 0 && euc_min >= 1,
        format!("geodesic cross-branch total {geo_total} (need 0), euclidean fewest per seed {euc_min} (need >= 1)"),
    )
}

fn partition_of_unity() -> Outcome {
    let mut rng = stage_rng(5, "acceptance/unity");
    let nodes: Vec<Point3> = (0..200)
        .map(|_| {
            Point3::new(
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
            )
        })
        .collect();
    let index = NearestIndex::new(&nodes);
    let mut worst_sum = 0.0f64;
    for mode in [BlendMode::Inverse, BlendMode::Literal] {
        for _ in 0..100_000 {
            let q = Point3::new(
                rng.random_range(-20.0..120.0),
                rng.random_range(-20.0..120.0),
                rng.random_range(-20.0..120.0),
            );
            let d: Vec<f64> = index
                .nearest_n(&q, 3)
                .iter()
                .map(|&(_, d2)| d2.sqrt())
                .collect();
            let w = blend_weights(&d, mode);
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let t = random_rigid(&mut rng, 0.6, 40.0);
    let field = LocalTransformField::new(nodes.clone(), vec![t; nodes.len()]).expect("field");
    let params = RegisterParams::default();
    let mut worst_map = 0.0f64;
    for _ in 0..100_000 {
        let q = Point3::new(
            rng.random_range(-20.0..120.0),
            rng.random_range(-20.0..120.0),
            rng.random_range(-20.0..120.0),
        );
        worst_map =
            worst_map.max((warp_point(&q, &field, &index, &params) - t.apply_point(&q)).norm());
    }
    outcome(
        worst_sum <= UNITY_TOL && worst_map <= RIGID_FIELD_TOL,
        format!("max |sum w - 1| {worst_sum:.2e} (limit {UNITY_TOL:e}), max rigid-field deviation {worst_map:.2e} mm (limit {RIGID_FIELD_TOL:e})"),
    )
}

fn rigid_solver() -> Outcome {
    let mut rng = stage_rng(6, "acceptance/solver");
    let mut beaten = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(5..40);
        let src: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                )
            })
            .collect();
        let truth = random_rigid(&mut rng, std::f64::consts::PI, 100.0);
        let dst: Vec<Point3> = src
            .iter()
            .map(|p| {
                let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                truth.apply_point(p) + Vector3::from(e) * 2.0
            })
            .collect();
        let fit = fit_rigid_points(&src, &dst).expect("fit");
        let best = rigid_residual(&fit, &src, &dst);
        for _ in 0..10_000 {
            // candidates spread around the noisy truth and across all rotations
            let candidate = if rng.random_bool(0.5) {
                random_rigid(&mut rng, 0.2, 5.0).compose(&truth)
            } else {
                random_rigid(&mut rng, std::f64::consts::PI, 150.0)
            };
            if rigid_residual(&candidate, &src, &dst) < best {
                beaten += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let src: Vec<Point3> = (0..rng.random_range(3..50))
            .map(|_| {
                Point3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                )
            })
            .collect();
        let truth = random_rigid(&mut rng, std::f64::consts::PI, 100.0);
        let dst: Vec<Point3> = src.iter().map(|p| truth.apply_point(p)).collect();
        let fit = fit_rigid_points(&src, &dst).expect("fit");
        worst = worst
            .max((fit.rotation - truth.rotation).abs().max())
            .max((fit.translation - truth.translation).abs().max());
    }
    outcome(
        beaten == 0 && worst <= RECOVERY_TOL,
        format!("random transforms beating the fit: {beaten} of 1e6; worst exact-recovery error {worst:.2e} (limit {RECOVERY_TOL:e})"),
    )
}

fn shape_repair() -> Outcome {
    let size = 32;
    let masks: Vec<BinaryMask> = ellipse_dataset(300, size, size, 7)
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let embedding = train_embedding(&masks, DEFAULT_LATENT_DIM).expect("embedding");
    let valid: Vec<BinaryMask> = masks.iter().filter(|m| shape_valid(m)).cloned().collect();
    let build = |count: usize| {
        let params = ManifoldParams {
            target_count: count,
            rng_seed: 7,
            ..ManifoldParams::default()
        };
        let t0 = Instant::now();
        let m = build_manifold(&embedding, &valid, &params);
        (m, t0.elapsed().as_secs_f64())
    };
    let (small, small_secs) = build(CI_MANIFOLD);
    if let Err(e) = &small {
        return outcome(false, format!("{CI_MANIFOLD}-sample build: {e}"));
    }
    let (full, full_secs) = build(FULL_MANIFOLD);
    let full = match full {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("{FULL_MANIFOLD}-sample build: {e}")),
    };
    let mut rng = stage_rng(7, "acceptance/decay");
    let (mut improved, mut valid_out) = (0usize, 0usize);
    let (mut before, mut after) = (0.0, 0.0);
    for _ in 0..100 {
        let e = EllipseSpec::random(&mut rng, size, size);
        let original = e.render(size, size);
        let start = rng.random_range(0.0..std::f64::consts::TAU);
        let decayed = wedge_decay(&original, e.cx, e.cy, start, DEFAULT_WEDGE_SPAN);
        let repaired = repair(&decayed, &embedding, &full, 1).expect("repair");
        let d0 = dice(&decayed, &original).unwrap();
        let d1 = dice(&repaired, &original).unwrap();
        improved += (d1 > d0) as usize;
        valid_out += shape_valid(&repaired) as usize;
        before += d0 / 100.0;
        after += d1 / 100.0;
    }
    let pass = improved as f64 >= REPAIR_SHARE * 100.0
        && valid_out == 100
        && small_secs <= CI_MANIFOLD_SECONDS
        && full_secs <= FULL_MANIFOLD_SECONDS;
    outcome(
        pass,
        format!(
            "improved {improved}/100 (need {:.0}), valid {valid_out}/100, mean Dice {before:.3} -> {after:.3}; build {CI_MANIFOLD} in {small_secs:.1} s (limit {CI_MANIFOLD_SECONDS}), {FULL_MANIFOLD} in {full_secs:.1} s (limit {FULL_MANIFOLD_SECONDS}); D = {DEFAULT_LATENT_DIM}, acceptance rate {:.2e}",
            REPAIR_SHARE * 100.0,
            full.stats.accepted as f64 / full.stats.proposed as f64
        ),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = stage_rng(8, "acceptance/metrics");
    let (mut worst, mut zero_iff) = (0.0f64, true);
    for k in 0..1000 {
        let (w, h) = (rng.random_range(2..24), rng.random_range(2..24));
        let (pa, pb) = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        let a = BinaryMask::new(
            w,
            h,
            (0..w * h).map(|_| rng.random_bool(pa) as u8).collect(),
        )
        .unwrap();
        let b = if k % 10 == 0 {
            a.clone()
        } else {
            BinaryMask::new(
                w,
                h,
                (0..w * h).map(|_| rng.random_bool(pb) as u8).collect(),
            )
            .unwrap()
        };
        let d = dice(&a, &b).unwrap();
        worst = worst.max((iou(&a, &b).unwrap() - d / (2.0 - d)).abs());
        if let Ok(loss) = boundary_loss(&b, &a) {
            zero_iff &= (loss == 0.0) == (a == b);
        }
    }
    let rib = ConfusionCounts {
        true_positive: 35,
        false_negative: 65,
        true_negative: 950,
        false_positive: 0,
    };
    let m = classification_metrics(&rib).expect("defined");
    let hand = (985.0 / 1050.0, 35.0 / 100.0, 1.0);
    let arithmetic = (m.accuracy - hand.0).abs() <= 1e-15
        && (m.sensitivity - 0.35).abs() <= 1e-15
        && (m.sensitivity - hand.1).abs() <= 1e-15
        && m.specificity == hand.2;
    outcome(
        worst <= IOU_TOL && zero_iff && arithmetic,
        format!(
            "max |IoU - D/(2-D)| {worst:.2e} (limit {IOU_TOL:e}); loss zero iff identical: {zero_iff}; rib row sensitivity {}, specificity {}, accuracy {:.4}",
            m.sensitivity, m.specificity, m.accuracy
        ),
    )
}

fn baseline_sanity() -> Outcome {
    let mut rng = stage_rng(9, "acceptance/baselines");
    let mut icp_bad = 0usize;
    for _ in 0..50 {
        let n = rng.random_range(50..300);
        let target = PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(0.0..80.0),
                        rng.random_range(0.0..40.0),
                        rng.random_range(0.0..20.0),
                    )
                })
                .collect(),
        );
        let t = random_rigid(&mut rng, 0.5, 15.0);
        let mut source = apply(&t, &target);
        for p in &mut source.points {
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            *p += Vector3::from(e) * 0.5;
        }
        let out = icp(&source, &target, &IcpParams::default()).expect("icp");
        icp_bad += out.rms_trace.windows(2).filter(|w| w[1] > w[0]).count();
    }
    let mut cpd_bad = 0usize;
    for _ in 0..20 {
        let n = rng.random_range(15..40);
        let target = PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(0.0..30.0),
                        rng.random_range(0.0..30.0),
                        rng.random_range(0.0..10.0),
                    )
                })
                .collect(),
        );
        let source = PointCloud::new(
            target
                .points
                .iter()
                .map(|p| {
                    p + Vector3::new((p.y * 0.1).sin() * 3.0, 1.0, rng.random_range(-0.5..0.5))
                })
                .collect(),
        );
        let params = CpdParams {
            beta: 8.0,
            max_iterations: 60,
            ..CpdParams::default()
        };
        let out = cpd_nonrigid(&source, &target, &params).expect("cpd");
        cpd_bad += out
            .objective
            .windows(2)
            .filter(|w| w[1] > w[0] + CPD_SLACK * w[0].abs().max(1.0))
            .count();
    }
    outcome(
        icp_bad == 0 && cpd_bad == 0,
        format!("ICP RMS increases over 50 instances: {icp_bad}; CPD objective increases beyond {CPD_SLACK:e} relative over 20 instances: {cpd_bad}"),
    )
}

fn determinism() -> Outcome {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("pool");
        pool.install(|| {
            let params = AnatomyParams {
                rng_seed: 11,
                deform: DeformProfile::Severe.params(),
                ..AnatomyParams::default()
            };
            let (template, subject, truth) = generate_pair(&params).expect("generator");
            let pipeline = PipelineParams {
                rng_seed: 11,
                ..PipelineParams::default()
            };
            let out = register_pipeline(&template, &subject, &truth.waypoints_template, &pipeline)
                .expect("register");
            let errors =
                waypoint_errors(&out.waypoints, &truth.waypoints_subject).expect("18 waypoints");
            let mut report = RegistrationReport::success(
                "dense",
                errors,
                out.stages.clone(),
                serde_json::to_value(pipeline).unwrap(),
            );
            report.strip_timings();
            let mut rows = run_benchmark(&BenchConfig {
                seeds: vec![3, 4],
                profiles: vec![DeformProfile::None, DeformProfile::Mild],
                methods: vec![Method::Icp, Method::Cpd],
                params: BenchParams::default(),
            })
            .expect("benchmark");
            for r in &mut rows {
                r.strip_timings();
            }
            vec![
                format_xyzl(&template),
                format_xyzl(&subject),
                serde_json::to_string(&truth).unwrap(),
                format_xyzl(&out.warped),
                serde_json::to_string(&out.waypoints).unwrap(),
                serde_json::to_string(&report).unwrap(),
                serde_json::to_string(&out.g_us.expect("dense graph").to_file(false)).unwrap(),
                summary_csv(&rows),
            ]
        })
    };
    let a = run(1);
    let b = run(1);
    let c = run(4);
    let names = [
        "template.xyzl",
        "subject.xyzl",
        "truth.json",
        "warped.xyzl",
        "waypoints.json",
        "report.json",
        "graph.json",
        "summary.csv",
    ];
    let differing: Vec<&str> = names
        .iter()
        .zip(a.iter().zip(b.iter().zip(&c)))
        .filter(|(_, (x, (y, z)))| x != y || x != z)
        .map(|(n, _)| *n)
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "8 artifacts byte-identical across two runs and 1 vs 4 threads".into()
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("identity registration", identity_registration),
        ("rigid recovery", rigid_recovery),
        ("method ordering", method_ordering),
        ("geodesic SOM branch fidelity", branch_fidelity),
        ("blend partition of unity", partition_of_unity),
        ("rigid solver optimality", rigid_solver),
        ("shape repair", shape_repair),
        ("metric identities", metric_identities),
        ("baseline sanity", baseline_sanity),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = check();
        failures += (!o.pass) as usize;
        println!(
            "criterion {:>2} {:<30} {} ({}) [{:.1} s]",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
