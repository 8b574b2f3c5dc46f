use std::time::Duration;

use apla::adaptation::{build_plan, PlanKind};
use apla::metrics::{cost_model, measure_throughput, Phase};
use apla::vit::ViTConfig;
use apla::Error;

fn vit_base() -> ViTConfig {
    ViTConfig::new(224, 16, 3, 768, 12, 12, 100)
}

#[test]
fn vit_base_counts() {
    let cfg = vit_base();
    let head = 768 * 100 + 100;
    let apla = build_plan(&PlanKind::Apla { r: 16, block_range: None }, &cfg, 0).unwrap();
    let cost = cost_model(&cfg, &apla);
    assert_eq!(cost.backbone_trainable_scalars, 12 * 768 * 16);
    assert_eq!(cost.backbone_trainable_scalars, 147_456);
    assert_eq!(cost.trainable_scalars, 147_456 + head);
    assert_eq!(cost.grad_bytes, 8 * cost.trainable_scalars);

    let linear = cost_model(&cfg, &build_plan(&PlanKind::Linear, &cfg, 0).unwrap());
    assert_eq!(linear.backbone_trainable_scalars, 0);
    assert_eq!(linear.trainable_scalars, head);
    assert!(linear.activation_bytes_per_sample < cost.activation_bytes_per_sample);

    let full = cost_model(&cfg, &build_plan(&PlanKind::Full, &cfg, 0).unwrap());
    assert_eq!(full.trainable_scalars, full.total_scalars);
    assert!(full.activation_bytes_per_sample >= cost.activation_bytes_per_sample);
    assert!(full.training_bytes(8) > cost.training_bytes(8));
}

#[test]
fn throughput_of_a_known_sleep() {
    let sample = measure_throughput(Phase::Inference, 1, 1, 5, || {
        std::thread::sleep(Duration::from_millis(10));
        Ok(())
    })
    .unwrap();
    let ips = sample.images_per_second;
    assert!((80.0..=120.0).contains(&ips), "{ips} images/s");
    assert_eq!(sample.phase, Phase::Inference);
}

#[test]
fn throughput_needs_timed_iterations() {
    assert!(matches!(measure_throughput(Phase::Train, 1, 0, 0, || Ok(())), Err(Error::Config(_))));
}
