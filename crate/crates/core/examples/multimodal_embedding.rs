//! Builds the interleaved text/object conditioning sequence for one scene
//! and shows which positions belong to each object.

use candle_core::{DType, Device};
use multicomp::backbone::NoiseSchedule;
use multicomp::embedding::{drop_modalities, ConditioningInputs, Provenance};
use multicomp::model::{Model, ModelConfig};
use multicomp::synthetic::{render_scene, SyntheticConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> multicomp::Result<()> {
    let model = Model::new(ModelConfig::default(), NoiseSchedule::default(), 0, &Device::Cpu, DType::F32)?;
    let scene = render_scene(&SyntheticConfig::default(), 3)?;
    println!("caption: {:?}", scene.caption.text);
    for s in &scene.caption.spans {
        println!("  object {} <- {:?}", s.object, scene.caption.phrase(s));
    }

    let inputs = ConditioningInputs::new(
        scene.caption.clone(),
        scene.objects.iter().map(|o| o.image.clone()).enumerate().collect(),
    );
    let emb = model.embed(&inputs)?;
    println!("sequence: {:?}", emb.sequence.dims());
    let row: String = emb
        .provenance
        .iter()
        .map(|p| match p {
            Provenance::Text => 't',
            Provenance::Object(i) => char::from_digit(*i as u32, 10).unwrap_or('?'),
            Provenance::Eot => 'E',
            Provenance::Pad => '_',
        })
        .collect();
    println!("layout:   {row}");
    for (i, slots) in emb.slot_sets.iter().enumerate() {
        println!("H_{i} = {slots:?}");
    }
    println!("EoT at {:?}", emb.eot_positions);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..4 {
        let dropped = drop_modalities(inputs.clone(), &mut rng, 0.3, false);
        let emb = model.embed(&dropped)?;
        println!("{:?} -> length {}", dropped.flags, emb.len());
    }
    Ok(())
}
