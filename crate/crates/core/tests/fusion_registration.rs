mod common;

use cisru_sim::fusion::{fuse, register, FusionConfig, RigidTransform2D, TransformEstimate};
use cisru_sim::world::normalize_angle;
use common::synthetic_pair;

fn recovered(seed: u64) -> bool {
    let p = synthetic_pair(seed);
    match register(&p.a, &p.b, &FusionConfig::default(), seed) {
        TransformEstimate::Found { transform, .. } => {
            let dr = normalize_angle(transform.rotation - p.truth.rotation)
                .abs()
                .to_degrees();
            let dt = transform.translation.distance(p.truth.translation);
            dr <= 2.0 && dt <= 1.0
        }
        TransformEstimate::InsufficientOverlap => false,
    }
}

#[test]
fn recovers_most_synthetic_transforms() {
    let ok = (0..50).filter(|s| recovered(*s)).count();
    assert!(ok >= 45, "recovered {ok}/50");
}

#[test]
fn fusion_never_loses_knowledge() {
    for seed in 0..10 {
        let p = synthetic_pair(seed);
        assert_eq!(fuse(&p.a, &p.a, &RigidTransform2D::IDENTITY), p.a);
        let f = fuse(&p.a, &p.b, &p.truth);
        assert!(f.known_count() >= p.a.known_count());
        assert!(p.overlap >= 0.4);
    }
}
