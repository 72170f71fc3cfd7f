//! Central finite-difference checks of the loss gradients in f64.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchkp::destyle::style_loss_tensor;
use sketchkp::domainadapt::{query_prototypes, transport_loss_tensor, QueryEmbeddings};
use sketchkp::locator::{classification_loss_tensor, offset_loss_tensor};

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const INSTANCES: usize = 20;

fn var(rng: &mut ChaCha8Rng, shape: (usize, usize), r: f64) -> Var {
    let n = shape.0 * shape.1;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-r..r)).collect();
    Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between backprop and central differences over every
/// entry of every input in `inputs`.
fn check(inputs: &[&Var], loss: impl Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let mut worst: f64 = 0.0;
    for v in inputs {
        let analytic: Vec<f64> = grads
            .get(v.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
            .unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = v.as_tensor().shape().clone();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + STEP;
            v.set(&Tensor::from_vec(probe.clone(), &shape, &Device::Cpu).unwrap()).unwrap();
            let plus = scalar(&loss());
            probe[i] = base[i] - STEP;
            v.set(&Tensor::from_vec(probe, &shape, &Device::Cpu).unwrap()).unwrap();
            let minus = scalar(&loss());
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
        v.set(&Tensor::from_vec(base, &shape, &Device::Cpu).unwrap()).unwrap();
    }
    worst
}

/// Cross-entropy over random logits and labels.
pub fn classification(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let rows = rng.random_range(1..4);
        let classes = [4, 9, 16][rng.random_range(0..3)];
        let logits = var(&mut rng, (rows, classes), 2.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        worst = worst.max(check(&[&logits], || {
            classification_loss_tensor(logits.as_tensor(), &labels).unwrap()
        }));
    }
    worst
}

/// L1 offset deviation; targets stay away from the kink at zero.
pub fn deviation(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let rows = rng.random_range(1..5);
        let pred = var(&mut rng, (rows, 2), 1.0);
        let p: Vec<f64> = pred.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let gt: Vec<f64> = p
            .iter()
            .map(|x| {
                let d = rng.random_range(0.01..0.5);
                if rng.random_bool(0.5) { x + d } else { x - d }
            })
            .collect();
        let gt = Tensor::from_vec(gt, (rows, 2), &Device::Cpu).unwrap();
        worst = worst.max(check(&[&pred], || offset_loss_tensor(pred.as_tensor(), &gt).unwrap()));
    }
    worst
}

struct TransportInstance {
    mu: Var,
    phi: Var,
    visible: Vec<bool>,
    tags: Vec<usize>,
}

fn transport_instance(rng: &mut ChaCha8Rng) -> TransportInstance {
    let n = rng.random_range(1..4);
    let c = rng.random_range(1..4);
    let mut tags: Vec<usize> = (0..n).collect();
    for _ in 0..rng.random_range(0..4) {
        tags.push(rng.random_range(0..n));
    }
    TransportInstance {
        mu: var(rng, (n, c), 0.6),
        phi: var(rng, (tags.len(), c), 0.6),
        visible: (0..n).map(|i| i == 0 || rng.random_bool(0.7)).collect(),
        tags,
    }
}

/// Transport loss w.r.t. prototypes and query embeddings. Query means are
/// detached, so the finite differences hold them at their unperturbed value.
pub fn transport(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let t = transport_instance(&mut rng);
        let n = t.visible.len();
        let frozen = {
            let q = QueryEmbeddings { values: t.phi.as_tensor(), keypoint: &t.tags };
            query_prototypes(&q, n).unwrap().0.copy().unwrap()
        };
        worst = worst.max(check(&[&t.mu, &t.phi], || {
            let q = QueryEmbeddings { values: t.phi.as_tensor(), keypoint: &t.tags };
            transport_loss_tensor(t.mu.as_tensor(), &t.visible, &q, &frozen).unwrap()
        }));
    }
    worst
}

/// Style loss w.r.t. all three variants.
pub fn style(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..4);
        let c = rng.random_range(1..5);
        let (a, b, d) = (var(&mut rng, (n, c), 1.0), var(&mut rng, (n, c), 1.0), var(&mut rng, (n, c), 1.0));
        let visible: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.7)).collect();
        worst = worst.max(check(&[&a, &b, &d], || {
            style_loss_tensor([a.as_tensor(), b.as_tensor(), d.as_tensor()], &visible).unwrap()
        }));
    }
    worst
}

/// Largest gap between transport gradients computed with query means
/// recomputed from the live embeddings and with a frozen copy of them.
pub fn isolation(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let t = transport_instance(&mut rng);
        let n = t.visible.len();
        let q = QueryEmbeddings { values: t.phi.as_tensor(), keypoint: &t.tags };
        // Means built straight from the live embeddings, still on the graph.
        let c = t.mu.as_tensor().dim(1).unwrap();
        let means: Vec<Tensor> = (0..n)
            .map(|k| {
                let rows: Vec<u32> = (0..t.tags.len()).filter(|r| t.tags[*r] == k).map(|r| r as u32).collect();
                let idx = Tensor::new(rows.as_slice(), &Device::Cpu).unwrap();
                t.phi.as_tensor().index_select(&idx, 0).unwrap().mean(0).unwrap()
            })
            .collect();
        let recomputed = Tensor::stack(&means, 0).unwrap().reshape((n, c)).unwrap();
        let frozen = Tensor::from_vec(
            recomputed.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            recomputed.shape(),
            &Device::Cpu,
        )
        .unwrap();
        let g1 = transport_loss_tensor(t.mu.as_tensor(), &t.visible, &q, &recomputed).unwrap().backward().unwrap();
        let g2 = transport_loss_tensor(t.mu.as_tensor(), &t.visible, &q, &frozen).unwrap().backward().unwrap();
        for v in [&t.mu, &t.phi] {
            let a = flat(g1.get(v.as_tensor()), v.elem_count());
            let b = flat(g2.get(v.as_tensor()), v.elem_count());
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

fn flat(g: Option<&Tensor>, n: usize) -> Vec<f64> {
    g.map(|g| g.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap())
        .unwrap_or_else(|| vec![0.0; n])
}
