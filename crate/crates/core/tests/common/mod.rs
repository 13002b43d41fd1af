#![allow(dead_code)]

use std::path::Path;

use delta_core::data::SyntheticSpec;
use delta_core::experiment::ExperimentConfig;
use delta_core::model::{ConvNetModel, LayerSpec, ModelSpec};
use delta_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Two tapped 3x3 convs, one pool, global pooling and a linear head.
pub fn two_conv_spec(channels: usize, size: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input: [channels, size, size],
        layers: vec![
            LayerSpec::conv(3, 3, 1, 1).tapped(),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::conv(4, 3, 1, 1).tapped(),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { out_features: classes },
        ],
    }
}

/// A transferred model whose shared parameters have drifted from ω*.
pub fn drifted_transfer_model(seed: u64, channels: usize, size: usize, classes: usize) -> ConvNetModel {
    let source = ConvNetModel::build(two_conv_spec(channels, size, 5), seed).unwrap();
    let mut m = source.replace_head(classes, seed + 1).unwrap();
    let mut r = rng(seed + 2);
    for p in m.params_mut() {
        if !p.head {
            for v in p.value.data_mut() {
                *v += r.random_range(-0.05..0.05);
            }
        }
    }
    m
}

/// Small end-to-end configuration that runs in a few seconds.
pub fn tiny_experiment(out_dir: impl AsRef<Path>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(out_dir.as_ref());
    let mut spec = SyntheticSpec::new(4, 3, 12, 12);
    spec.target_per_class = 12;
    cfg.data.synthetic.spec = spec;
    cfg.data.synthetic.test_per_class = 4;
    cfg.data.crop = 10;
    cfg.model.widths = [4, 6, 6];
    cfg.pretrain.iterations = 60;
    cfg.pretrain.log_interval = 20;
    cfg.fe_head.epochs = 5;
    cfg.finetune.iterations = 30;
    cfg.finetune.log_interval = 10;
    cfg.finetune.alpha_grid.clear();
    cfg.finetune
        .alpha
        .insert(delta_core::regularizers::RegularizerKind::Delta, 0.001);
    cfg
}

/// Attention weights by physically zeroing each filter of a model copy and
/// re-running the whole forward pass.
pub fn rebuilt_attention(fe: &ConvNetModel, image: &Tensor, label: usize, layer: usize) -> Vec<f64> {
    use delta_core::data::Dataset;
    use delta_core::tensor::ops;
    let batch = Dataset::stack(std::slice::from_ref(image)).unwrap();
    let loss = |m: &ConvNetModel| ops::cross_entropy_per_sample(&m.forward(&batch).unwrap(), &[label]).unwrap()[0];
    let base = loss(fe);
    let (_, bias) = fe.layer_param_ids(layer).unwrap();
    let n = fe.params()[bias].value.numel();
    let gaps: Vec<f64> = (0..n)
        .map(|j| {
            let mut m = fe.clone();
            m.zero_filter(layer, j).unwrap();
            loss(&m) - base
        })
        .collect();
    ops::softmax(&gaps)
}

/// Direct sextuple-loop convolution.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for s in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[f];
                    for ch in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let (y, xx) = (
                                    (i * stride + u) as isize - pad as isize,
                                    (j * stride + v) as isize - pad as isize,
                                );
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * c + ch) * h + y as usize) * wd + xx as usize;
                                let wi = ((f * c + ch) * k + u) * k + v;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Unstabilized `log Σ exp(z) - z_y` with the sum carried in double-double
/// precision.
pub fn extended_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &z in logits {
        let e = z.exp();
        let s = hi + e;
        let bp = s - hi;
        lo += (hi - (s - bp)) + (e - bp);
        hi = s;
    }
    hi.ln() + lo / hi - logits[label]
}

/// Largest deviation of the conv kernel from [`naive_conv`] over `shapes`
/// random geometries.
pub fn conv_sweep_deviation(seed: u64, shapes: usize) -> f64 {
    use delta_core::tensor::ops;
    let mut r = rng(seed);
    let mut worst = 0f64;
    for _ in 0..shapes {
        let (n, c, o) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(3..=9), r.random_range(3..=9));
        let pad = r.random_range(0..=2);
        let k = r.random_range(1..=3.min(h + 2 * pad).min(w + 2 * pad));
        let mut stride = r.random_range(1..=2);
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            stride = 1;
        }
        let x = random_tensor(&[n, c, h, w], &mut r, 1.0);
        let wt = random_tensor(&[o, c, k, k], &mut r, 1.0);
        let b = random_tensor(&[o], &mut r, 1.0);
        let expect = naive_conv(&x, &wt, &b, stride, pad);
        let kernel = ops::ConvKernel::new(wt, b, stride, pad).unwrap();
        let got = ops::conv2d(&x, &kernel).unwrap();
        assert_eq!(got.numel(), expect.len());
        for (a, e) in got.data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
    }
    worst
}

/// Largest deviation of batch-mean cross-entropy from the double-double
/// oracle across small, moderate and large logit scales.
pub fn cross_entropy_deviation(seed: u64) -> f64 {
    use delta_core::tensor::ops;
    let mut r = rng(seed);
    let mut worst = 0f64;
    for scale in [0.1, 3.0, 20.0, 300.0] {
        let (b, k) = (7, 5);
        let logits = random_tensor(&[b, k], &mut r, scale);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let got = ops::softmax_cross_entropy(&logits, &labels).unwrap();
        let expect = (0..b)
            .map(|i| extended_cross_entropy(&logits.data()[i * k..(i + 1) * k], labels[i]))
            .sum::<f64>()
            / b as f64;
        worst = worst.max((got - expect).abs());
    }
    worst
}
