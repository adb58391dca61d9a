//! Attention losses two ways: on a hand-built map where the answer is known,
//! and on attention captured from the model for a few synthetic scenes.

use candle_core::{DType, Device};
use multicomp::backbone::NoiseSchedule;
use multicomp::losses::{closed_form, LossConfig};
use multicomp::model::{Model, ModelConfig};
use multicomp::synthetic::{generate, SyntheticConfig};
use multicomp::trainer::{build_probe, evaluate_probe};

fn main() -> multicomp::Result<()> {
    // Four pixels, one object covering the left two, attention spread evenly
    // over three tokens of which token 1 is the object's slot.
    let (p, l) = (4, 3);
    let uniform = vec![1.0 / l as f64; p * l];
    let segs = vec![vec![true, true, false, false]];
    let (l_c, _) = closed_form::cross_attention(&uniform, p, l, &segs, &[vec![1]])?;
    println!("uniform attention, half the frame inside: L_c = {l_c}");

    let mut peaked = vec![0.0; p * l];
    for x in 0..p {
        peaked[x * l + if x < 2 { 1 } else { 0 }] = 1.0;
    }
    let (l_c, _) = closed_form::cross_attention(&peaked, p, l, &segs, &[vec![1]])?;
    println!("slot mass only inside the object:   L_c = {l_c}");

    let two = vec![vec![true, true, false, false], vec![false, false, true, true]];
    let identity: Vec<f64> = (0..p * p).map(|k| f64::from(k / p == k % p)).collect();
    let (l_s, _) = closed_form::self_attention(&identity, p, &two);
    println!("pixels attend only to themselves:   L_s = {l_s}");

    let mut cfg = ModelConfig::default();
    cfg.backbone.channels = [8, 16];
    let model = Model::new(cfg, NoiseSchedule::default(), 1, &Device::Cpu, DType::F32)?;
    let samples: Vec<_> = generate(&SyntheticConfig {
        count: 4,
        ..Default::default()
    })?
    .iter()
    .map(|s| s.to_training_sample())
    .collect();
    let probe = build_probe(&model, &samples, 7)?;
    let m = evaluate_probe(&model, &probe, &LossConfig::default())?;
    println!(
        "untrained model on {} scenes: L_d {:.4}, L_c {:.4}, L_s {:.4}, inside fraction {:.4}",
        probe.len(),
        m.l_d,
        m.l_c,
        m.l_s,
        m.inside_fraction
    );
    Ok(())
}
