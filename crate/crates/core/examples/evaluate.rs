//! Scores ground-truth scenes and their empty backgrounds with the mock
//! encoders, then splits them into overlap and relation subsets.

use multicomp::datagen::relation_tag;
use multicomp::eval::{evaluate, split_subsets, Encoders, EvalItem, Relation};
use multicomp::synthetic::{generate, SyntheticConfig};

fn main() -> multicomp::Result<()> {
    let scenes = generate(&SyntheticConfig {
        count: 12,
        action_rate: 0.5,
        ..Default::default()
    })?;
    let items = |use_truth: bool| -> Vec<EvalItem> {
        scenes
            .iter()
            .map(|s| {
                let t = s.to_training_sample();
                EvalItem {
                    id: s.id.clone(),
                    generated: if use_truth { s.image.clone() } else { s.background.clone() },
                    background: t.background,
                    objects: t.object_images,
                    layout: t.layout,
                    caption: t.caption,
                    relation: match relation_tag(&s.caption.text) {
                        Some("action") => Some(Relation::Action),
                        Some("positional") => Some(Relation::Positional),
                        _ => None,
                    },
                }
            })
            .collect()
    };
    let enc = Encoders::mock(0);
    for (name, use_truth) in [("ground truth", true), ("background only", false)] {
        let report = evaluate(&items(use_truth), &enc, None);
        let m = report.aggregate.expect("scored items");
        println!(
            "{name:16} CLIP-I {:.3}  DINO {:.3}  CLIP-I_gl {:.3}  DINO_gl {:.3}  CLIP-T_loc {:.3}  CLIP-T_gl {:.3}",
            m.clip_i, m.dino, m.clip_i_gl, m.dino_gl, m.clip_t_loc, m.clip_t_gl
        );
    }
    for (key, ids) in split_subsets(&items(true)) {
        println!("{key}: {}", ids.len());
    }
    Ok(())
}
