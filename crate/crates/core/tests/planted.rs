use featsplat::lift::{cosine, em_lift, LiftOptions, LiftProblem, View};
use featsplat::scene::{synth_scene, SceneBundle, SceneSpec};
use featsplat::RenderOptions;

fn problem(b: &SceneBundle) -> LiftProblem {
    let views = b
        .cameras
        .iter()
        .zip(&b.gt_feature_maps)
        .map(|(c, f)| View { camera: c.clone(), target: f.clone() })
        .collect();
    let zeroed = b.field.with_features(&vec![0.0; b.field.len() * b.field.feature_dim], b.field.feature_dim).unwrap();
    LiftProblem::new(zeroed, views, LiftOptions::default())
}

#[test]
fn planted_prototypes_are_recovered() {
    for seed in 1..=5 {
        let spec = SceneSpec::new(20, 4, 16, 8, 64, seed);
        let b = synth_scene(&spec, &RenderOptions::new()).unwrap();
        let r = em_lift(&problem(&b)).unwrap();
        let mut worst = f64::INFINITY;
        for i in 0..b.field.len() {
            if r.mass[i] > 1e-3 {
                let c = cosine(r.feature(i), &b.prototypes[b.assignment[i]]).unwrap();
                worst = worst.min(c);
            }
        }
        assert!(worst > 0.99, "seed {seed}: worst cosine {worst}");
    }
}

#[test]
fn single_prototype_is_reproduced_everywhere() {
    let spec = SceneSpec::new(12, 1, 8, 6, 48, 2);
    let b = synth_scene(&spec, &RenderOptions::new()).unwrap();
    let r = em_lift(&problem(&b)).unwrap();
    for i in 0..b.field.len() {
        if r.mass[i] > 1e-3 {
            let err = r.feature(i).iter().zip(&b.prototypes[0]).map(|(a, p)| (a - p).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "gaussian {i}: max error {err}, mass {}", r.mass[i]);
        }
    }
}
