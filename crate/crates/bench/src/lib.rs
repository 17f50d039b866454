//! Fixtures shared by the benchmarks.

use costalign_core::geom::{Point3, PointCloud};
use costalign_core::register::{
    local_transforms, register_pipeline, LocalTransformField, PipelineParams,
};
use costalign_core::somgraph::{pair_nodes, SkeletonGraph};
use costalign_core::synth::{generate_pair, AnatomyParams, DeformProfile};

/// One registered mild-profile pair with its fitted graphs and transform field.
pub struct Fixture {
    pub template: PointCloud,
    pub subject: PointCloud,
    pub waypoints: Vec<Point3>,
    pub g_ct: SkeletonGraph,
    pub g_us: SkeletonGraph,
    pub field: LocalTransformField,
    pub params: PipelineParams,
}

pub fn mild_fixture(seed: u64) -> Fixture {
    let anatomy = AnatomyParams {
        rng_seed: seed,
        deform: DeformProfile::Mild.params(),
        ..AnatomyParams::default()
    };
    let (template, subject, truth) = generate_pair(&anatomy).expect("generator");
    let params = PipelineParams {
        rng_seed: seed,
        ..PipelineParams::default()
    };
    let out = register_pipeline(&template, &subject, &truth.waypoints_template, &params)
        .expect("registration");
    let g_ct = out.g_ct.expect("dense output has graphs");
    let g_us = out.g_us.expect("dense output has graphs");
    let pairs = pair_nodes(&g_ct, &g_us).expect("pairing");
    let field = local_transforms(&pairs, &g_ct, &g_us, &params.register).expect("field");
    Fixture {
        template,
        subject,
        waypoints: truth.waypoints_template,
        g_ct,
        g_us,
        field,
        params,
    }
}
