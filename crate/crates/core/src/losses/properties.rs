use candle_core::{Device, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Random maps with disjoint, non-empty segmentations and disjoint slots.
#[derive(Debug, Clone)]
struct Instance {
    p: usize,
    l: usize,
    cross: Vec<f64>,
    selfm: Vec<f64>,
    segs: Vec<Vec<bool>>,
    slots: Vec<Vec<usize>>,
}

fn softmax_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let e: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0f64).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

impl Instance {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(4..=16);
        let l = rng.random_range(6..=9);
        let n = rng.random_range(1..=3);
        let mut label: Vec<Option<usize>> = (0..p)
            .map(|_| {
                let k = rng.random_range(0..=n);
                (k < n).then_some(k)
            })
            .collect();
        for (i, slot) in label.iter_mut().take(n).enumerate() {
            *slot = Some(i);
        }
        label.shuffle(&mut rng);
        let segs = (0..n).map(|i| label.iter().map(|&k| k == Some(i)).collect()).collect();
        let mut positions: Vec<usize> = (0..l).collect();
        positions.shuffle(&mut rng);
        let slots = (0..n)
            .map(|i| {
                let mut s = vec![positions[2 * i]];
                if rng.random_bool(0.5) {
                    s.push(positions[2 * i + 1]);
                }
                s
            })
            .collect();
        Instance {
            p,
            l,
            cross: softmax_rows(&mut rng, p, l),
            selfm: softmax_rows(&mut rng, p, p),
            segs,
            slots,
        }
    }

    fn seg_set(&self) -> SegmentationSet {
        SegmentationSet::new(
            self.segs
                .iter()
                .map(|s| BinaryMask::from_fn(1, self.p, |_, c| s[c]))
                .collect(),
        )
        .unwrap()
    }

    fn l_c(&self, a: &[f64]) -> f64 {
        let t = Tensor::from_vec(a.to_vec(), (self.p, self.l), &Device::Cpu).unwrap();
        cross_attention_loss(&t, &self.seg_set(), &self.slots).unwrap().to_scalar().unwrap()
    }

    fn l_s(&self, a: &[f64]) -> f64 {
        let t = Tensor::from_vec(a.to_vec(), (self.p, self.p), &Device::Cpu).unwrap();
        self_attention_loss(&t, &self.seg_set()).unwrap().to_scalar().unwrap()
    }

    /// Whether self-map entry `(x, y)` links two different objects.
    fn cross_pair(&self, x: usize, y: usize) -> bool {
        let owner = |q: usize| self.segs.iter().position(|s| s[q]);
        matches!((owner(x), owner(y)), (Some(i), Some(j)) if i != j)
    }
}

fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|k| {
            x[k] = at[k] + h;
            let up = f(&x);
            x[k] = at[k] - h;
            let down = f(&x);
            x[k] = at[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn autodiff(values: &[f64], shape: (usize, usize), loss: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(&Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()).unwrap();
    let grads = loss(var.as_tensor()).backward().unwrap();
    grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

const H: f64 = 1e-6;
const INSTANCES: u64 = 24;

#[test]
fn cross_loss_gradient_three_ways() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(seed);
        let (value, analytic) = closed_form::cross_attention(&inst.cross, inst.p, inst.l, &inst.segs, &inst.slots).unwrap();
        assert!((value - inst.l_c(&inst.cross)).abs() < 1e-12, "seed {seed}");
        let fd = central_difference(|a| inst.l_c(a), &inst.cross, H);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-4, "seed {seed}: finite difference rel err {err}");
        let segs = inst.seg_set();
        let ad = autodiff(&inst.cross, (inst.p, inst.l), |t| cross_attention_loss(t, &segs, &inst.slots).unwrap());
        let err = max_rel_err(&analytic, &ad);
        assert!(err < 1e-10, "seed {seed}: autodiff rel err {err}");
    }
}

#[test]
fn self_loss_gradient_three_ways() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(seed);
        let (value, analytic) = closed_form::self_attention(&inst.selfm, inst.p, &inst.segs);
        assert!((value - inst.l_s(&inst.selfm)).abs() < 1e-12, "seed {seed}");
        let fd = central_difference(|a| inst.l_s(a), &inst.selfm, H);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-4, "seed {seed}: finite difference rel err {err}");
        let segs = inst.seg_set();
        let ad = autodiff(&inst.selfm, (inst.p, inst.p), |t| self_attention_loss(t, &segs).unwrap());
        let err = max_rel_err(&analytic, &ad);
        assert!(err < 1e-10, "seed {seed}: autodiff rel err {err}");
    }
}

#[test]
fn denoising_gradient_three_ways() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=24);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tgt = Tensor::from_vec(target.clone(), (1, n), &Device::Cpu).unwrap();
        let tensor_value = |p: &[f64]| -> f64 {
            let t = Tensor::from_vec(p.to_vec(), (1, n), &Device::Cpu).unwrap();
            denoising_loss(&t, &tgt).unwrap().to_scalar().unwrap()
        };
        let (value, analytic) = closed_form::denoising(&pred, &target);
        assert!((value - tensor_value(&pred)).abs() < 1e-12);
        let err = max_rel_err(&analytic, &central_difference(tensor_value, &pred, H));
        assert!(err < 1e-4, "seed {seed}: finite difference rel err {err}");
        let ad = autodiff(&pred, (1, n), |t| denoising_loss(t, &tgt).unwrap());
        assert!(max_rel_err(&analytic, &ad) < 1e-10);
    }
}

#[test]
fn denominator_is_total_slot_mass() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(seed);
        let mut expected = 0.0;
        for (seg, slot) in inst.segs.iter().zip(&inst.slots) {
            let (mut inside, mut outside, mut column) = (0.0, 0.0, 0.0);
            for (x, &member) in seg.iter().enumerate().take(inst.p) {
                for &h in slot {
                    let v = inst.cross[x * inst.l + h];
                    column += v;
                    if member {
                        inside += v;
                    } else {
                        outside += v;
                    }
                }
            }
            assert!((inside + outside - column).abs() < 1e-12);
            expected += 1.0 - inside / (inside + outside);
        }
        expected /= inst.segs.len() as f64;
        assert!((inst.l_c(&inst.cross) - expected).abs() < 1e-12, "seed {seed}");
    }
}

proptest! {
    #[test]
    fn losses_stay_in_range(seed in any::<u64>()) {
        let inst = Instance::random(seed);
        let lc = inst.l_c(&inst.cross);
        let ls = inst.l_s(&inst.selfm);
        prop_assert!((0.0..=1.0).contains(&lc));
        prop_assert!((0.0..1.0).contains(&ls));
    }

    #[test]
    fn cross_loss_falls_as_mass_moves_inside(seed in any::<u64>()) {
        let inst = Instance::random(seed);
        let family = |lambda: f64| -> Vec<f64> {
            let mut a = inst.cross.clone();
            for (seg, slot) in inst.segs.iter().zip(&inst.slots) {
                for x in 0..inst.p {
                    for &h in slot {
                        let v = &mut a[x * inst.l + h];
                        *v *= if seg[x] { 1.0 + lambda } else { 1.0 / (1.0 + lambda) };
                    }
                }
            }
            a
        };
        let values: Vec<f64> = (0..=10).map(|k| inst.l_c(&family(k as f64 * 0.5))).collect();
        prop_assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{values:?}");
    }

    #[test]
    fn self_loss_falls_as_cross_pairs_fade(seed in any::<u64>()) {
        let inst = Instance::random(seed);
        let family = |keep: f64| -> Vec<f64> {
            let mut a = inst.selfm.clone();
            for x in 0..inst.p {
                for y in 0..inst.p {
                    if inst.cross_pair(x, y) {
                        a[x * inst.p + y] *= keep;
                    }
                }
            }
            a
        };
        let values: Vec<f64> = (0..=10).rev().map(|k| inst.l_s(&family(k as f64 / 10.0))).collect();
        prop_assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{values:?}");
        prop_assert_eq!(*values.last().unwrap(), 0.0);
    }

    #[test]
    fn object_order_does_not_matter(seed in any::<u64>(), shift in 0usize..3) {
        let inst = Instance::random(seed);
        let mut perm = inst.clone();
        let n = perm.segs.len();
        perm.segs.rotate_left(shift % n);
        perm.slots.rotate_left(shift % n);
        perm.segs.reverse();
        perm.slots.reverse();
        prop_assert!((inst.l_c(&inst.cross) - perm.l_c(&perm.cross)).abs() < 1e-12);
        prop_assert!((inst.l_s(&inst.selfm) - perm.l_s(&perm.selfm)).abs() < 1e-12);
    }
}
