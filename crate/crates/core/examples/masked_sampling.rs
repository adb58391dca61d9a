//! Samples with inference-time attention masking and reports, per step, how
//! much attention escaped the allowed regions; then checks the paste-back.

use candle_core::{DType, Device};
use multicomp::backbone::NoiseSchedule;
use multicomp::layout::rasterize_box;
use multicomp::model::{Model, ModelConfig};
use multicomp::sampler::{sample, SampleRequest};
use multicomp::synthetic::{render_scene, SyntheticConfig};

fn main() -> multicomp::Result<()> {
    let model = Model::new(ModelConfig::default(), NoiseSchedule::default(), 2, &Device::Cpu, DType::F32)?;
    let scene = render_scene(&SyntheticConfig::default(), 0)?;
    let req = SampleRequest {
        background: scene.background.clone(),
        layout: scene.layout(),
        objects: scene.objects.iter().map(|o| o.image.clone()).collect(),
        caption: scene.caption.clone(),
        steps: 8,
        guidance: 3.0,
        seed: 4,
    };
    let out = sample(&model, &req, true)?;
    for s in &out.trace {
        println!("t={:4}  object leakage {:.2e}  EoT leakage {:.2e}", s.t, s.leakage.object, s.leakage.eot);
    }
    let outside = rasterize_box(&req.layout.global_box, out.image.dims()).complement();
    let mut changed = 0;
    for r in 0..out.image.height() {
        for c in 0..out.image.width() {
            if outside.get(r, c) && out.image.get(r, c) != req.background.get(r, c) {
                changed += 1;
            }
        }
    }
    println!("pixels changed outside the inpainting box: {changed}");
    if let Some(path) = std::env::args().nth(1) {
        out.image.save_png(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
