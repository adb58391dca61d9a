//! Short training run on generated shapes, with and without the attention
//! losses, compared on a fixed probe.
//!
//! `cargo run --release --example train_synthetic -- [steps] [out_dir]`

use candle_core::{DType, Device};
use multicomp::backbone::NoiseSchedule;
use multicomp::losses::LossConfig;
use multicomp::model::{Model, ModelConfig};
use multicomp::synthetic::{generate, SyntheticConfig};
use multicomp::trainer::{build_probe, evaluate_probe, read_metrics, train_loop, TrainConfig, METRICS_FILE};

fn main() -> multicomp::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let out = args.next().map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("multicomp-train"));
    let data: Vec<_> = generate(&SyntheticConfig::default())?
        .iter()
        .map(|s| s.to_training_sample())
        .collect();

    for (name, alpha, beta) in [("with attention losses", 1e3, 1.0), ("denoising only", 0.0, 0.0)] {
        let cfg = TrainConfig {
            steps,
            learning_rate: 1e-3,
            loss: LossConfig {
                alpha,
                beta,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Model::new(ModelConfig::default(), NoiseSchedule::default(), 0, &Device::Cpu, DType::F32)?;
        let probe = build_probe(&model, &data[..8], 99)?;
        let before = evaluate_probe(&model, &probe, &cfg.loss)?;
        let dir = out.join(if alpha > 0.0 { "attn" } else { "plain" });
        train_loop(&model, &data, &cfg, &dir, None)?;
        let after = evaluate_probe(&model, &probe, &cfg.loss)?;
        let rows = read_metrics(&dir.join(METRICS_FILE))?;
        println!("{name}:");
        println!("  batch L_d {:.4} -> {:.4}", rows[0].l_d, rows[rows.len() - 1].l_d);
        println!("  probe L_d {:.4} -> {:.4}", before.l_d, after.l_d);
        println!("  inside fraction {:.4} -> {:.4}", before.inside_fraction, after.inside_fraction);
    }
    println!("checkpoints under {}", out.display());
    Ok(())
}
