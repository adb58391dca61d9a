use std::sync::Mutex;

use candle_core::{DType, Device};
use proptest::prelude::*;

use super::*;
use crate::backbone::NoiseSchedule;
use crate::layout::rasterize_box;
use crate::model::ModelConfig;
use crate::synthetic::{render_scene, SyntheticConfig};

fn caption(text: &str) -> GroundedCaption {
    GroundedCaption::new(text, Vec::new())
}

fn item(id: &str, boxes: Vec<BBox>, global: BBox, generated: Image, relation: Option<Relation>) -> EvalItem {
    let n = boxes.len();
    EvalItem {
        id: id.into(),
        background: Image::filled(generated.height(), generated.width(), PAD),
        generated,
        objects: (0..n).map(|_| Image::filled(8, 8, [1.0, 0.0, 0.0])).collect(),
        layout: LayoutSpec::new(boxes, global),
        caption: caption("a red circle next to a blue square"),
        relation,
    }
}

fn textured(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |r, c| [(r * 7 % 11) as f32 / 10.0, (c * 5 % 13) as f32 / 12.0, ((r + c) % 3) as f32 / 2.0])
}

/// Reads cos(theta) off the top-left red value: embeds as
/// [v, sqrt(1 - v^2)], so an all-ones object scores exactly `v`.
struct ReadOut;

impl ImageEncoder for ReadOut {
    fn input_size(&self) -> usize {
        8
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let v = image.get(0, 0)[0] as f64;
        Ok(vec![v, (1.0 - v * v).max(0.0).sqrt()])
    }
}

#[test]
fn object_tiled_at_its_box_scores_one() {
    let object = textured(8, 8);
    let bbox = BBox::from_pixels(8, 4, 16, 12, 32, 32);
    let mask = rasterize_box(&bbox, (32, 32));
    let mut generated = Image::filled(32, 32, [0.2; 3]);
    for r in 0..32 {
        for c in 0..32 {
            if mask.get(r, c) {
                generated.set(r, c, object.get(r - 4, c - 8));
            }
        }
    }
    let mut it = item("t", vec![bbox], BBox::UNIT, generated, None);
    it.objects = vec![object];
    let enc = ProjectionEncoder::new(8, 32, 1);
    let s = identity_scores(&it, &enc).unwrap();
    assert!((s.local - 1.0).abs() < 1e-12, "{}", s.local);
    assert!(s.global < 0.99);
}

#[test]
fn full_frame_boxes_make_local_equal_global() {
    let generated = textured(24, 24);
    let it = item("f", vec![BBox::UNIT, BBox::UNIT], BBox::UNIT, generated, None);
    let enc = Encoders::mock(3);
    let m = score_image(&it, &enc).unwrap();
    assert_eq!(m.clip_i, m.clip_i_gl);
    assert_eq!(m.dino, m.dino_gl);
    assert_eq!(m.clip_t_loc, m.clip_t_gl);
}

#[test]
fn per_item_score_is_mean_over_objects() {
    let left = BBox::from_pixels(0, 0, 8, 8, 8, 16);
    let right = BBox::from_pixels(8, 0, 16, 8, 8, 16);
    let generated = Image::from_fn(8, 16, |_, c| if c < 8 { [0.4; 3] } else { [0.8; 3] });
    let mut it = item("m", vec![left, right], BBox::UNIT, generated, None);
    it.objects = vec![Image::filled(8, 8, [1.0; 3]); 2];
    let s = identity_scores(&it, &ReadOut).unwrap();
    assert!((s.local - 0.6).abs() < 1e-6, "{}", s.local);
}

#[test]
fn palette_text_scores_follow_colour_words() {
    let red = PALETTE[0].1;
    let blue = PALETTE[2].1;
    let half = Image::from_fn(16, 16, |_, c| if c < 8 { red } else { blue });
    let it = item("p", vec![BBox::new(0.0, 0.0, 0.5, 1.0)], BBox::UNIT, half.clone(), None);
    let t = text_scores(&it, &PaletteEncoder::new(16)).unwrap();
    assert!((t.gl - 1.0).abs() < 1e-12);
    assert_eq!(t.loc, t.gl);

    // The 16x8 red crop is padded to 16x16, so half its pixels fall in the
    // gray bin: cos([.5 red, .5 gray], [1 red, 1 blue]) = .5 / (sqrt(.5) sqrt(2)).
    let it = item("q", vec![BBox::new(0.0, 0.0, 0.5, 1.0)], BBox::new(0.0, 0.0, 0.5, 1.0), half, None);
    let t = text_scores(&it, &PaletteEncoder::new(16)).unwrap();
    assert!((t.loc - 0.5).abs() < 1e-12, "{}", t.loc);
    assert!((t.gl - 1.0).abs() < 1e-12);

    let enc = PaletteEncoder::new(16);
    assert_eq!(enc.embed_text("Red, red and BLUE").unwrap()[..3], [2.0, 0.0, 1.0]);
}

#[test]
fn report_aggregates_are_means() {
    let a = Metrics {
        clip_i: 0.2,
        dino: 0.4,
        clip_i_gl: 0.6,
        dino_gl: 0.8,
        clip_t_loc: 0.1,
        clip_t_gl: 0.3,
    };
    let b = Metrics {
        clip_i: 0.4,
        dino: 0.0,
        clip_i_gl: 1.0,
        dino_gl: 0.2,
        clip_t_loc: 0.5,
        clip_t_gl: 0.7,
    };
    let key = |overlap| SubsetKey {
        overlap,
        relation: Some(Relation::Action),
    };
    let rows = vec![
        ItemRow {
            id: "a".into(),
            subset: key(true),
            metrics: a,
        },
        ItemRow {
            id: "b".into(),
            subset: key(false),
            metrics: b,
        },
    ];
    let r = MetricReport::from_rows(rows, Vec::new());
    let m = r.aggregate.unwrap();
    let want = [0.3, 0.2, 0.8, 0.5, 0.3, 0.5];
    for (got, want) in m.fields().iter().zip(want) {
        assert!((got - want).abs() < 1e-15);
    }
    assert_eq!(r.subsets["overlap/action"], a);
    assert_eq!(r.subsets["nonoverlap/action"], b);
    assert!(MetricReport::from_rows(Vec::new(), Vec::new()).aggregate.is_none());
}

#[test]
fn degenerate_crops_are_excluded_and_counted() {
    let tiny = BBox::new(0.0, 0.0, 0.01, 0.01);
    let bad = item("bad", vec![tiny], BBox::UNIT, textured(16, 16), None);
    let good = item("good", vec![BBox::UNIT], BBox::UNIT, textured(16, 16), None);
    assert!(matches!(identity_scores(&bad, &ReadOut), Err(Error::DegenerateCrop(_))));
    let r = evaluate(&[bad, good], &Encoders::mock(0), None);
    assert_eq!(r.items.len(), 1);
    assert_eq!(r.excluded.len(), 1);
    assert_eq!(r.excluded[0].id, "bad");
}

fn constant(v: f64) -> Metrics {
    Metrics::from_fields([v; 6])
}

#[test]
fn two_orders_average_to_their_mean() {
    let orders = insertion_orders(2);
    assert_eq!(orders, vec![vec![0, 1], vec![1, 0]]);
    let m = average_over_orders(&orders, |o| Ok(constant(if o[0] == 0 { 0.5 } else { 0.7 }))).unwrap();
    assert!((m.clip_i - 0.6).abs() < 1e-15);
    let one = average_over_orders(&insertion_orders(1), |_| Ok(constant(0.42))).unwrap();
    assert_eq!(one, constant(0.42));
}

/// Paints each object's box with a colour keyed to its index and records
/// every call.
struct Painter {
    calls: Mutex<Vec<usize>>,
    fail_on: Option<usize>,
}

impl CompositeRunner for Painter {
    fn composite(&self, canvas: &Image, item: &EvalItem, object: usize) -> Result<Image> {
        self.calls.lock().unwrap().push(object);
        if self.fail_on == Some(object) {
            return Err(Error::Config("runner refused".into()));
        }
        let mask = rasterize_box(&item.layout.object_boxes[object], canvas.dims());
        let paint = Image::filled(canvas.height(), canvas.width(), PALETTE[object].1);
        Ok(paint.composite_over(canvas, &mask))
    }
}

#[test]
fn sequential_average_visits_every_order() {
    let boxes = vec![
        BBox::new(0.0, 0.0, 0.6, 0.6),
        BBox::new(0.3, 0.3, 0.9, 0.9),
        BBox::new(0.1, 0.5, 0.5, 1.0),
    ];
    let it = item("s", boxes, BBox::UNIT, Image::filled(16, 16, PAD), None);
    let painter = Painter {
        calls: Mutex::new(Vec::new()),
        fail_on: None,
    };
    let enc = Encoders::mock(2);
    let m = sequential_average(&painter, &it, &enc).unwrap();
    let calls = painter.calls.into_inner().unwrap();
    assert_eq!(calls.len(), 18);
    let seqs: Vec<Vec<usize>> = calls.chunks(3).map(|c| c.to_vec()).collect();
    assert_eq!(seqs, insertion_orders(3));

    // Independent recomputation: paint each order by hand, score, average.
    let mut rows = Vec::new();
    for order in insertion_orders(3) {
        let mut canvas = it.background.clone();
        for &i in &order {
            let mask = rasterize_box(&it.layout.object_boxes[i], (16, 16));
            for r in 0..16 {
                for c in 0..16 {
                    if mask.get(r, c) {
                        canvas.set(r, c, PALETTE[i].1);
                    }
                }
            }
        }
        rows.push(
            score_image(
                &EvalItem {
                    generated: canvas,
                    ..it.clone()
                },
                &enc,
            )
            .unwrap(),
        );
    }
    let want = Metrics::mean(&rows).unwrap();
    for (g, w) in m.fields().iter().zip(want.fields()) {
        assert!((g - w).abs() < 1e-12);
    }

    let failing = Painter {
        calls: Mutex::new(Vec::new()),
        fail_on: Some(1),
    };
    let r = evaluate(std::slice::from_ref(&it), &enc, Some(&failing));
    assert!(r.items.is_empty());
    assert!(r.excluded[0].reason.contains("runner refused"));
}

#[test]
fn model_runner_composites_inside_global_box() {
    let mut cfg = ModelConfig::default();
    cfg.backbone.channels = [8, 16];
    cfg.backbone.groups = 4;
    let model = Model::new(cfg, NoiseSchedule::default(), 5, &Device::Cpu, DType::F32).unwrap();
    let scene = render_scene(&SyntheticConfig::default(), 0).unwrap();
    let sample = scene.to_training_sample();
    let it = EvalItem {
        id: scene.id.clone(),
        generated: scene.image.clone(),
        background: sample.background.clone(),
        objects: sample.object_images.clone(),
        layout: sample.layout.clone(),
        caption: sample.caption.clone(),
        relation: None,
    };
    let runner = ModelRunner {
        model: &model,
        steps: 2,
        guidance: 1.0,
        seed: 9,
    };
    let out = runner.composite(&it.background, &it, 0).unwrap();
    let outside = rasterize_box(&it.layout.global_box, out.dims()).complement();
    for r in 0..out.height() {
        for c in 0..out.width() {
            if outside.get(r, c) {
                assert_eq!(out.get(r, c), it.background.get(r, c));
            }
        }
    }
}

#[test]
fn subset_geometry_examples() {
    let g = |boxes| item("x", boxes, BBox::UNIT, textured(8, 8), None);
    assert!(g(vec![BBox::new(0.0, 0.0, 0.5, 0.5), BBox::new(0.4, 0.4, 0.9, 0.9)]).overlap());
    assert!(!g(vec![BBox::new(0.0, 0.0, 0.4, 0.4), BBox::new(0.5, 0.5, 0.9, 0.9)]).overlap());
    // Touching edges share no area.
    assert!(!g(vec![BBox::new(0.0, 0.0, 0.5, 0.5), BBox::new(0.5, 0.0, 1.0, 0.5)]).overlap());
}

#[test]
fn ten_item_split_matches_hand_count() {
    let ov = vec![BBox::new(0.0, 0.0, 0.6, 0.6), BBox::new(0.4, 0.4, 1.0, 1.0)];
    let no = vec![BBox::new(0.0, 0.0, 0.4, 0.4), BBox::new(0.6, 0.6, 1.0, 1.0)];
    let spec = [
        (true, Some(Relation::Action)),
        (true, Some(Relation::Action)),
        (true, Some(Relation::Positional)),
        (false, Some(Relation::Action)),
        (false, Some(Relation::Positional)),
        (false, Some(Relation::Positional)),
        (false, Some(Relation::Positional)),
        (true, None),
        (false, None),
        (false, Some(Relation::Action)),
    ];
    let items: Vec<EvalItem> = spec
        .iter()
        .enumerate()
        .map(|(k, &(o, rel))| item(&format!("i{k}"), if o { ov.clone() } else { no.clone() }, BBox::UNIT, textured(8, 8), rel))
        .collect();
    let split = split_subsets(&items);
    let count = |s: &str| split.iter().find(|(k, _)| k.to_string() == s).map_or(0, |(_, v)| v.len());
    assert_eq!(count("overlap/action"), 2);
    assert_eq!(count("overlap/positional"), 1);
    assert_eq!(count("nonoverlap/action"), 2);
    assert_eq!(count("nonoverlap/positional"), 3);
    assert_eq!(count("overlap/untagged"), 1);
    assert_eq!(count("nonoverlap/untagged"), 1);
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.05..0.2f64, 0.05..0.2f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn split_is_a_partition(
        specs in prop::collection::vec((prop::collection::vec(arb_box(), 1..4), 0u8..3), 0..30)
    ) {
        let items: Vec<EvalItem> = specs
            .iter()
            .enumerate()
            .map(|(k, (boxes, r))| {
                let rel = [None, Some(Relation::Action), Some(Relation::Positional)][*r as usize];
                item(&format!("i{k}"), boxes.clone(), BBox::UNIT, textured(4, 4), rel)
            })
            .collect();
        let split = split_subsets(&items);
        let mut seen: Vec<String> = split.values().flatten().cloned().collect();
        seen.sort();
        let mut all: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
        all.sort();
        prop_assert_eq!(seen, all);
        for (k, ids) in &split {
            for id in ids {
                let it = items.iter().find(|i| &i.id == id).unwrap();
                let overlap = (0..it.layout.object_boxes.len()).any(|i| {
                    (0..i).any(|j| it.layout.object_boxes[i].intersection(&it.layout.object_boxes[j]).is_some())
                });
                prop_assert_eq!(k.overlap, overlap);
                prop_assert_eq!(k.relation, it.relation);
            }
        }
    }

    #[test]
    fn aggregate_is_bitwise_recomputed_mean(values in prop::collection::vec(prop::array::uniform6(0.0..1.0f64), 1..20)) {
        let rows: Vec<ItemRow> = values
            .iter()
            .enumerate()
            .map(|(k, v)| ItemRow {
                id: k.to_string(),
                subset: SubsetKey { overlap: false, relation: None },
                metrics: Metrics::from_fields(*v),
            })
            .collect();
        let r = MetricReport::from_rows(rows, Vec::new());
        let agg = r.aggregate.unwrap().fields();
        for f in 0..6 {
            let mut s = 0.0;
            for v in &values {
                s += v[f];
            }
            prop_assert_eq!(agg[f].to_bits(), (s / values.len() as f64).to_bits());
        }
    }

    #[test]
    fn order_enumeration_does_not_change_average(seed in 0u64..1000, n in 1usize..5) {
        let score = |o: &[usize]| {
            let v = o.iter().enumerate().map(|(p, &i)| ((p + 1) * (i + 3)) as f64 * (seed as f64 + 1.0).ln()).sum::<f64>();
            Ok(constant(v))
        };
        let orders = insertion_orders(n);
        let mut reversed = orders.clone();
        reversed.reverse();
        let a = average_over_orders(&orders, score).unwrap();
        let b = average_over_orders(&reversed, score).unwrap();
        prop_assert!((a.clip_i - b.clip_i).abs() <= 1e-12 * a.clip_i.abs().max(1.0));
    }
}
