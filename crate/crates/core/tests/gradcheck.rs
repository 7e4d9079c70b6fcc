use bcsnet_core::decoder::DecoderConfig;
use bcsnet_core::encoder::EncoderConfig;
use bcsnet_core::gradcheck::{gradcheck, DEFAULT_STEP, DEFAULT_TOLERANCE, GROUPS};
use bcsnet_core::model::{BcsNet, ModelConfig};
use bcsnet_core::synth::synth_blobs;

fn tiny() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: [4, 6, 8, 8],
            input_size: (32, 32),
            blocks_per_stage: 1,
        },
        decoder: DecoderConfig {
            width: 8,
            boundary_width: 4,
        },
        ..ModelConfig::default()
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (net, store) = BcsNet::new(tiny(), 7).unwrap();
    let data = synth_blobs(2, 32, 32, 7).unwrap();
    let rep = gradcheck(&net, &store, &data, 50, 7, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
    for e in &rep.entries {
        println!("{:<40} {:>14.6e} {:>14.6e} {:.2e} h={:e}", e.name, e.analytic, e.numeric, e.rel_error, e.step);
    }
    assert!(rep.entries.len() >= 50);
    for g in GROUPS {
        assert!(rep.entries.iter().any(|e| e.name.contains(g)), "no sample from {g}");
    }
    let gains = rep.entries.iter().filter(|e| e.name.contains("context_gain")).count();
    assert_eq!(gains, 3);
    // a retry at a smaller step is only for the odd kink, not a crutch
    assert!(rep.refined() * 10 <= rep.entries.len(), "{} entries refined", rep.refined());
    assert!(rep.passed(), "max rel error {} failures {:?}", rep.max_rel_error, rep.failures());
}

#[test]
fn context_gains_receive_gradient() {
    let (net, store) = BcsNet::new(tiny(), 8).unwrap();
    let data = synth_blobs(1, 32, 32, 8).unwrap();
    let rep = gradcheck(&net, &store, &data, 3, 8, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
    for e in rep.entries.iter().filter(|e| e.name.contains("context_gain")) {
        assert!(e.analytic.abs() > 0.0, "{} has zero gradient", e.name);
    }
}

#[test]
fn oversized_configs_are_rejected() {
    let (net, store) = BcsNet::new(ModelConfig::default(), 0).unwrap();
    let data = synth_blobs(1, 64, 64, 0).unwrap();
    assert!(gradcheck(&net, &store, &data, 5, 0, DEFAULT_STEP, DEFAULT_TOLERANCE).is_err());
}
