//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use morphoclass::attention::{Cbam, CbamConfig};
use morphoclass::data::ClassLabel;
use morphoclass::nn::{to_vec, Init, ParamStore};
use morphoclass::seeding::stream_rng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hand-set parameters for a 2-channel CBAM with one hidden unit and a 3x3 spatial filter.
pub struct TinyCbam {
    pub w1: [f64; 2],
    pub w2: [f64; 2],
    /// `[mean plane 3x3, max plane 3x3]`, row-major.
    pub kernel: [f64; 18],
    pub bias: f64,
}

pub const TINY: TinyCbam = TinyCbam {
    w1: [0.8, -0.5],
    w2: [1.5, -0.7],
    kernel: [
        0.1, -0.2, 0.3, 0.05, 0.4, -0.1, 0.2, 0.0, -0.3, //
        -0.15, 0.25, 0.1, 0.3, -0.2, 0.05, 0.0, 0.1, 0.2,
    ],
    bias: -0.1,
};

/// Values of the 2x4x4 input map.
pub fn tiny_input() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Channel gates, spatial gates and output, by scalar loops.
pub fn tiny_oracle(f: &[f64], p: &TinyCbam) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = (2, 4, 4);
    let mlp = |v: [f64; 2]| {
        let hidden = (p.w1[0] * v[0] + p.w1[1] * v[1]).max(0.0);
        [p.w2[0] * hidden, p.w2[1] * hidden]
    };
    let mut avg = [0.0; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for ch in 0..c {
        for i in 0..h * w {
            let v = f[ch * h * w + i];
            avg[ch] += v / (h * w) as f64;
            max[ch] = max[ch].max(v);
        }
    }
    let (a, m) = (mlp(avg), mlp(max));
    let mc: Vec<f64> = (0..c).map(|ch| sigmoid(a[ch] + m[ch])).collect();
    let refined: Vec<f64> = (0..c * h * w).map(|i| f[i] * mc[i / (h * w)]).collect();
    let mut planes = [vec![0.0; h * w], vec![0.0; h * w]];
    for i in 0..h * w {
        planes[0][i] = (refined[i] + refined[h * w + i]) / 2.0;
        planes[1][i] = refined[i].max(refined[h * w + i]);
    }
    let mut ms = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = p.bias;
            for (plane, values) in planes.iter().enumerate() {
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (iy, ix) = (y + ky - 1, x + kx - 1);
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        acc += p.kernel[plane * 9 + (ky * 3 + kx) as usize] * values[(iy * w as i64 + ix) as usize];
                    }
                }
            }
            ms[(y * w as i64 + x) as usize] = sigmoid(acc);
        }
    }
    let out = (0..c * h * w).map(|i| refined[i] * ms[i % (h * w)]).collect();
    (mc, ms, out)
}

/// An f64 CBAM module carrying the hand-set parameters.
pub fn tiny_module(p: &TinyCbam) -> (ParamStore, Cbam) {
    let dev = Device::Cpu;
    let mut store = ParamStore::new(DType::F64, dev.clone());
    let mut init = Init::new(stream_rng(0, 0));
    let config = CbamConfig { channels: 2, reduction_ratio: 2, spatial_kernel: 3, channel_bias: false };
    let cbam = Cbam::new(&mut store, &mut init, "cbam", config).unwrap();
    store.assign("cbam.channel.fc1.weight", &Tensor::from_vec(p.w1.to_vec(), (1, 2), &dev).unwrap()).unwrap();
    store.assign("cbam.channel.fc2.weight", &Tensor::from_vec(p.w2.to_vec(), (2, 1), &dev).unwrap()).unwrap();
    store.assign("cbam.spatial.weight", &Tensor::from_vec(p.kernel.to_vec(), (1, 2, 3, 3), &dev).unwrap()).unwrap();
    store.assign("cbam.spatial.bias", &Tensor::new(&[p.bias], &dev).unwrap()).unwrap();
    (store, cbam)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst relative error between analytic and central-difference gradients of
/// `loss` with respect to every parameter in `store`.
pub fn gradient_check(store: &ParamStore, step: f64, loss: impl Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let scalar = |t: Tensor| t.to_scalar::<f64>().unwrap();
    let mut worst = 0.0f64;
    for (name, var) in store.params() {
        let analytic: Vec<f64> = to_vec(grads.get(var).unwrap()).unwrap();
        let base: Vec<f64> = to_vec(var.as_tensor()).unwrap();
        let shape = var.as_tensor().shape().clone();
        for i in 0..base.len() {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                store.assign(name, &Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                scalar(loss())
            };
            let numeric = (probe(step) - probe(-step)) / (2.0 * step);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
        store.assign(name, &Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
    }
    worst
}

/// Brute-force k-NN over integer coordinates: squared distances are exact.
/// Neighbours rank by (distance, label ordinal, row index); the vote is the
/// majority, then the smaller distance sum, then the lower ordinal.
pub fn brute_knn(rows: &[Vec<i64>], labels: &[ClassLabel], query: &[i64], k: usize) -> ClassLabel {
    let mut order: Vec<(i64, usize, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), labels[i].ordinal(), i))
        .collect();
    order.sort();
    let mut count = [0usize; 4];
    let mut sum = [0f64; 4];
    for &(d2, ord, _) in order.iter().take(k.min(rows.len())) {
        count[ord] += 1;
        sum[ord] += (d2 as f64).sqrt();
    }
    let mut best = None::<usize>;
    for ord in 0..4 {
        if count[ord] == 0 {
            continue;
        }
        best = match best {
            None => Some(ord),
            Some(b) if count[ord] > count[b] || (count[ord] == count[b] && sum[ord] < sum[b]) => Some(ord),
            keep => keep,
        };
    }
    ClassLabel::from_ordinal(best.unwrap()).unwrap()
}

pub fn label(rng: &mut impl Rng) -> ClassLabel {
    ClassLabel::from_ordinal(rng.random_range(0..4)).unwrap()
}

/// Neighbours of the origin at distances 1,2 (class A), 1,2 (class B) and a
/// farther fifth (class C), plus one distant C row. With k = 5, A and B tie on
/// count and summed distance so the lower ordinal wins; `shift_b > 0` moves B
/// outward and A wins on distance.
pub fn two_two_one(a: ClassLabel, b: ClassLabel, c: ClassLabel, shift_b: i64) -> (Vec<Vec<i64>>, Vec<ClassLabel>) {
    let rows = vec![
        vec![1, 0, 0, 0],
        vec![0, 2, 0, 0],
        vec![0, 0, -1 - shift_b, 0],
        vec![0, 0, 0, -2 - shift_b],
        vec![0, 0, 0, 5 + 2 * shift_b],
        vec![9, 9, 9, 9],
    ];
    (rows, vec![a, a, b, b, c, c])
}

pub fn as_f64(rows: &[Vec<i64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}
