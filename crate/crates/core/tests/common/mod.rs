//! Checks shared by the focused test targets and the acceptance report.
#![allow(dead_code)]

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spfl_core::eval::compute_miou;
use spfl_core::gradcheck::{finite_difference_check_guarded, GradCheck};
use spfl_core::image::Mask;
use spfl_core::layers::{activation_signature, Layer, Mode, Sequential};
use spfl_core::model::{DecoderModel, EncoderModel};
use spfl_core::ops::{
    binary_cross_entropy, cosine_with_grad, cross_entropy_loss, mask_average_pool, sigmoid_bce_with_logits,
};
use spfl_core::prototypes::{PrototypeHierarchy, PrototypeLevel};
use spfl_core::pseudo_label::assign_pseudo_labels;
use spfl_core::spfl::{episode_seg_loss, pseudo_cls_loss, seg_loss, MaskPrototypes};
use spfl_core::srofb::{select_confident_pixels, OFBClassifier, RefineConfig};
use spfl_core::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const GRAD_SEEDS: u64 = 20;
pub const ORACLE_CASES: u64 = 50;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst result of one gradient check over all seeds.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradReport {
    fn new(name: &'static str) -> Self {
        GradReport {
            name,
            seeds: 0,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn add(&mut self, g: GradCheck) {
        self.max_rel_error = self.max_rel_error.max(g.max_rel_error);
        self.checked += g.checked;
        self.skipped += g.skipped;
    }

    pub fn passed(&self) -> bool {
        self.seeds >= GRAD_SEEDS && self.checked > 0 && self.max_rel_error < GRAD_TOLERANCE
    }
}

fn dot(y: &[f32], r: &[f32]) -> f64 {
    y.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Up to `n` distinct coordinates of a length-`len` vector.
fn coords(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, n).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks `analytic` on a subset of coordinates of `values`, evaluating
/// `loss` on a full copy with the subset perturbed.
fn check_subset(
    values: &[f32],
    analytic: &[f32],
    picked: &[usize],
    eps: f32,
    mut loss: impl FnMut(&[f32]) -> (f64, u64),
) -> GradCheck {
    let mut sub: Vec<f32> = picked.iter().map(|&i| values[i]).collect();
    let sub_grad: Vec<f32> = picked.iter().map(|&i| analytic[i]).collect();
    let mut full = values.to_vec();
    finite_difference_check_guarded(&mut sub, &sub_grad, eps, |p| {
        for (&i, &v) in picked.iter().zip(p) {
            full[i] = v;
        }
        loss(&full)
    })
}

#[derive(Clone, Copy)]
enum Slot {
    Weights(usize),
    Bias(usize),
}

/// Gradient of `sum(r * net(x))` for the input and every parameter tensor
/// of `net`, on at most `per_tensor` coordinates each. Every evaluation
/// runs on a fresh clone, so dropout draws the same mask each time.
pub fn check_sequential(net: &Sequential, x: &Tensor, mode: Mode, eps: f32, per_tensor: usize, rng: &mut ChaCha8Rng) -> GradCheck {
    let mut n = net.clone();
    n.zero_grad();
    let (y, caches) = n.forward(x, mode).unwrap();
    let r = Tensor::randn(y.shape(), 1.0, rng);
    let gx = n.backward(&caches, &r).unwrap();
    let eval = |net: &Sequential, x: &Tensor| -> (f64, u64) {
        let mut m = net.clone();
        let (y, caches) = m.forward(x, mode).unwrap();
        (dot(y.data(), r.data()), activation_signature(&caches))
    };
    let mut total = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut merge = |g: GradCheck| {
        total.max_rel_error = total.max_rel_error.max(g.max_rel_error);
        total.checked += g.checked;
        total.skipped += g.skipped;
    };
    let picked = coords(x.len(), per_tensor, rng);
    merge(check_subset(x.data(), gx.data(), &picked, eps, |p| {
        eval(net, &Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap())
    }));
    for (li, layer) in n.layers.iter().enumerate() {
        for slot in [Slot::Weights(li), Slot::Bias(li)] {
            let (values, grad) = match slot {
                Slot::Weights(_) => (&layer.params.weights, &layer.params.grad_weights),
                Slot::Bias(_) => (&layer.params.bias, &layer.params.grad_bias),
            };
            if values.is_empty() {
                continue;
            }
            let picked = coords(values.len(), per_tensor, rng);
            merge(check_subset(values.data(), grad.data(), &picked, eps, |p| {
                let mut m = net.clone();
                let t = match slot {
                    Slot::Weights(i) => &mut m.layers[i].params.weights,
                    Slot::Bias(i) => &mut m.layers[i].params.bias,
                };
                t.data_mut().copy_from_slice(p);
                eval(&m, x)
            }));
        }
    }
    total
}

fn plain(values: &mut [f32], analytic: &[f32], eps: f32, mut loss: impl FnMut(&[f32]) -> f64) -> GradCheck {
    finite_difference_check_guarded(values, analytic, eps, |p| (loss(p), 0))
}

/// Random binary mask with at least one foreground and one background cell.
pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Mask {
    let mut m = Mask::from_fn(h, w, |_, _| false);
    for v in m.data.iter_mut() {
        *v = rng.random_bool(p) as u8;
    }
    let n = h * w;
    m.data[rng.random_range(0..n / 2)] = 1;
    m.data[n / 2 + rng.random_range(0..n - n / 2)] = 0;
    m
}

fn layer_case(name: &'static str, eps: f32, per_tensor: usize, build: impl Fn(&mut ChaCha8Rng) -> (Sequential, Tensor, Mode)) -> GradReport {
    let mut rep = GradReport::new(name);
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let (net, x, mode) = build(&mut r);
        rep.add(check_sequential(&net, &x, mode, eps, per_tensor, &mut r));
        rep.seeds += 1;
    }
    rep
}

pub fn grad_conv() -> GradReport {
    layer_case("conv2d", 1e-2, 64, |r| {
        let stride = 1 + r.random_range(0..2usize);
        let net = Sequential::new(vec![Layer::conv2d(2, 3, 3, stride, r)]);
        let mut net = net;
        net.layers[0].params.bias = Tensor::randn(&[3], 0.5, r);
        (net, Tensor::randn(&[2, 2, 5, 5], 1.0, r), Mode::Train)
    })
}

pub fn grad_linear() -> GradReport {
    layer_case("linear", 1e-2, 64, |r| {
        let mut net = Sequential::new(vec![Layer::linear(5, 4, r)]);
        net.layers[0].params.bias = Tensor::randn(&[4], 0.5, r);
        (net, Tensor::randn(&[3, 5], 1.0, r), Mode::Train)
    })
}

pub fn grad_relu() -> GradReport {
    layer_case("relu", 1e-3, 64, |r| {
        (Sequential::new(vec![Layer::relu()]), Tensor::randn(&[2, 3, 4, 4], 1.0, r), Mode::Train)
    })
}

pub fn grad_batch_norm() -> GradReport {
    layer_case("batch_norm2d (batch statistics)", 1e-2, 64, |r| {
        let mut net = Sequential::new(vec![Layer::batch_norm2d(3)]);
        net.layers[0].params.weights = Tensor::randn(&[3], 1.0, r);
        net.layers[0].params.bias = Tensor::randn(&[3], 1.0, r);
        (net, Tensor::randn(&[2, 3, 3, 3], 1.0, r), Mode::Train)
    })
}

pub fn grad_dropout() -> GradReport {
    layer_case("dropout", 1e-2, 64, |r| {
        let seed = r.random();
        (Sequential::new(vec![Layer::dropout(0.3, seed)]), Tensor::randn(&[4, 6], 1.0, r), Mode::Train)
    })
}

pub fn grad_upsample() -> GradReport {
    layer_case("bilinear upsample", 1e-2, 64, |r| {
        let (h, w) = (r.random_range(5..9usize), r.random_range(5..9usize));
        (Sequential::new(vec![Layer::bilinear_upsample(h, w)]), Tensor::randn(&[1, 2, 3, 4], 1.0, r), Mode::Train)
    })
}

pub fn grad_cross_entropy() -> GradReport {
    let mut rep = GradReport::new("cross-entropy");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let (k, n) = (4, 6);
        let mut logits = Tensor::randn(&[k, n], 2.0, &mut r);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..k as u32)).collect();
        let (_, g) = cross_entropy_loss(&logits, &labels).unwrap();
        rep.add(plain(logits.data_mut(), g.data(), 1e-2, |p| {
            cross_entropy_loss(&Tensor::new(vec![k, n], p.to_vec()).unwrap(), &labels).unwrap().0
        }));
        rep.seeds += 1;
    }
    rep
}

pub fn grad_pseudo_cls() -> GradReport {
    let mut rep = GradReport::new("pseudo-label classification loss");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let (n, k, h, w) = (2, 3, 4, 4);
        let mut logits = Tensor::randn(&[n, k, h, w], 2.0, &mut r);
        let labels: Vec<Vec<u32>> = (0..n).map(|_| (0..4).map(|_| r.random_range(0..k as u32)).collect()).collect();
        let lr: Vec<&[u32]> = labels.iter().map(Vec::as_slice).collect();
        let (_, g) = pseudo_cls_loss(&logits, &lr, 2, 2).unwrap();
        rep.add(plain(logits.data_mut(), g.data(), 1e-2, |p| {
            pseudo_cls_loss(&Tensor::new(vec![n, k, h, w], p.to_vec()).unwrap(), &lr, 2, 2).unwrap().0
        }));
        rep.seeds += 1;
    }
    rep
}

pub fn grad_cosine() -> GradReport {
    let mut rep = GradReport::new("cosine similarity");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let a = Tensor::randn(&[6], 1.0, &mut r).into_data();
        let b = Tensor::randn(&[6], 1.0, &mut r).into_data();
        let (_, ga, gb) = cosine_with_grad(&a, &b);
        let ga: Vec<f32> = ga.iter().map(|&v| v as f32).collect();
        let gb: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
        rep.add(plain(&mut a.clone(), &ga, 1e-3, |p| cosine_with_grad(p, &b).0));
        rep.add(plain(&mut b.clone(), &gb, 1e-3, |p| cosine_with_grad(&a, p).0));
        rep.seeds += 1;
    }
    rep
}

pub fn grad_seg_loss() -> GradReport {
    let mut rep = GradReport::new("segmentation loss (query and prototypes)");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let (c, h, w) = (5, 3, 3);
        let t = 0.2 + r.random::<f32>() * 0.8;
        let mut q = Tensor::randn(&[c, h, w], 1.0, &mut r);
        let protos = MaskPrototypes {
            fg: Tensor::randn(&[c], 1.0, &mut r).into_data(),
            bg: Tensor::randn(&[c], 1.0, &mut r).into_data(),
        };
        let gt = random_mask(h, w, 0.5, &mut r);
        let sl = seg_loss(&q, &protos, &gt, t).unwrap();
        rep.add(plain(q.data_mut(), sl.grad_query.data(), 1e-3, |p| {
            seg_loss(&Tensor::new(vec![c, h, w], p.to_vec()).unwrap(), &protos, &gt, t).unwrap().loss
        }));
        let gf: Vec<f32> = sl.grad_fg.iter().map(|&v| v as f32).collect();
        let gb: Vec<f32> = sl.grad_bg.iter().map(|&v| v as f32).collect();
        rep.add(plain(&mut protos.fg.clone(), &gf, 1e-3, |p| {
            let pr = MaskPrototypes { fg: p.to_vec(), bg: protos.bg.clone() };
            seg_loss(&q, &pr, &gt, t).unwrap().loss
        }));
        rep.add(plain(&mut protos.bg.clone(), &gb, 1e-3, |p| {
            let pr = MaskPrototypes { fg: protos.fg.clone(), bg: p.to_vec() };
            seg_loss(&q, &pr, &gt, t).unwrap().loss
        }));
        rep.seeds += 1;
    }
    rep
}

pub fn grad_episode_loss() -> GradReport {
    let mut rep = GradReport::new("segmentation loss through mask average pooling");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let (c, h, w) = (4, 3, 3);
        let t = 0.5;
        let q = Tensor::randn(&[c, h, w], 1.0, &mut r);
        let s: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[c, h, w], 1.0, &mut r)).collect();
        let m: Vec<Mask> = (0..2).map(|_| random_mask(h, w, 0.4, &mut r)).collect();
        let gt = random_mask(h, w, 0.5, &mut r);
        let mr: Vec<&Mask> = m.iter().collect();
        let sr: Vec<&Tensor> = s.iter().collect();
        let el = episode_seg_loss(&q, &gt, &sr, &mr, t).unwrap();
        for i in 0..2 {
            rep.add(plain(&mut s[i].data().to_vec(), el.grad_supports[i].data(), 1e-3, |p| {
                let mut s2 = s.clone();
                s2[i] = Tensor::new(vec![c, h, w], p.to_vec()).unwrap();
                let sr: Vec<&Tensor> = s2.iter().collect();
                episode_seg_loss(&q, &gt, &sr, &mr, t).unwrap().loss
            }));
        }
        rep.add(plain(&mut q.data().to_vec(), el.grad_query.data(), 1e-3, |p| {
            episode_seg_loss(&Tensor::new(vec![c, h, w], p.to_vec()).unwrap(), &gt, &sr, &mr, t).unwrap().loss
        }));
        rep.seeds += 1;
    }
    rep
}

/// Encoder parameters and input pixels through the episode loss, with
/// batch statistics and ReLU kink guarding.
pub fn grad_seg_end_to_end() -> GradReport {
    let mut rep = GradReport::new("segmentation loss end-to-end through the encoder");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let enc = EncoderModel::tiny(seed);
        let x = Tensor::randn(&[2, 3, 8, 8], 0.5, &mut r).map(|v| v + 0.5);
        let sm = random_mask(4, 4, 0.4, &mut r);
        let gt = random_mask(4, 4, 0.4, &mut r);
        let t = 0.5;
        let run = |net: &Sequential, x: &Tensor| -> (f64, Tensor, u64) {
            let mut n = net.clone();
            let (f, caches) = n.forward(x, Mode::Train).unwrap();
            let (s, q) = (f.select(0), f.select(1));
            let el = episode_seg_loss(&q, &gt, &[&s], &[&sm], t).unwrap();
            let g = Tensor::stack(&[&el.grad_supports[0], &el.grad_query]).unwrap();
            (el.loss, g, activation_signature(&caches))
        };
        let (_, g, _) = run(&enc.net, &x);
        let mut n = enc.net.clone();
        n.zero_grad();
        let (_, caches) = n.forward(&x, Mode::Train).unwrap();
        let gx = n.backward(&caches, &g).unwrap();
        let picked = coords(x.len(), 24, &mut r);
        rep.add(check_subset(x.data(), gx.data(), &picked, 1e-2, |p| {
            let (l, _, s) = run(&enc.net, &Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap());
            (l, s)
        }));
        for li in 0..n.layers.len() {
            for bias in [false, true] {
                let (v, gr) = if bias {
                    (&n.layers[li].params.bias, &n.layers[li].params.grad_bias)
                } else {
                    (&n.layers[li].params.weights, &n.layers[li].params.grad_weights)
                };
                if v.is_empty() {
                    continue;
                }
                let picked = coords(v.len(), 8, &mut r);
                rep.add(check_subset(v.data(), gr.data(), &picked, 1e-2, |p| {
                    let mut m = enc.net.clone();
                    let t = if bias { &mut m.layers[li].params.bias } else { &mut m.layers[li].params.weights };
                    t.data_mut().copy_from_slice(p);
                    let (l, _, s) = run(&m, &x);
                    (l, s)
                }));
            }
        }
        rep.seeds += 1;
    }
    rep
}

/// Decoder head parameters and input features through the
/// pseudo-label classification loss.
pub fn grad_pseudo_end_to_end() -> GradReport {
    let mut rep = GradReport::new("pseudo-label loss end-to-end through a decoder head");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let dec = DecoderModel::new(4, &[3], (6, 6), seed);
        let head = &dec.heads[0];
        let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r);
        let labels: Vec<Vec<u32>> = (0..2).map(|_| (0..9).map(|_| r.random_range(0..3)).collect()).collect();
        let lr: Vec<&[u32]> = labels.iter().map(Vec::as_slice).collect();
        let run = |net: &Sequential, x: &Tensor| -> (f64, Tensor, u64) {
            let mut n = net.clone();
            let (z, caches) = n.forward(x, Mode::Train).unwrap();
            let (l, g) = pseudo_cls_loss(&z, &lr, 3, 3).unwrap();
            (l, g, activation_signature(&caches))
        };
        let (_, g, _) = run(head, &x);
        let mut n = head.clone();
        n.zero_grad();
        let (_, caches) = n.forward(&x, Mode::Train).unwrap();
        let gx = n.backward(&caches, &g).unwrap();
        let picked = coords(x.len(), 24, &mut r);
        rep.add(check_subset(x.data(), gx.data(), &picked, 1e-2, |p| {
            let (l, _, s) = run(head, &Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap());
            (l, s)
        }));
        for li in 0..n.layers.len() {
            for bias in [false, true] {
                let (v, gr) = if bias {
                    (&n.layers[li].params.bias, &n.layers[li].params.grad_bias)
                } else {
                    (&n.layers[li].params.weights, &n.layers[li].params.grad_weights)
                };
                if v.is_empty() {
                    continue;
                }
                let picked = coords(v.len(), 8, &mut r);
                rep.add(check_subset(v.data(), gr.data(), &picked, 1e-2, |p| {
                    let mut m = head.clone();
                    let t = if bias { &mut m.layers[li].params.bias } else { &mut m.layers[li].params.weights };
                    t.data_mut().copy_from_slice(p);
                    let (l, _, s) = run(&m, &x);
                    (l, s)
                }));
            }
        }
        rep.seeds += 1;
    }
    rep
}

pub fn grad_bce() -> GradReport {
    let mut rep = GradReport::new("binary cross-entropy");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let labels: Vec<f32> = (0..8).map(|_| r.random_range(0..2) as f32).collect();
        let z = Tensor::randn(&[8], 2.0, &mut r).into_data();
        let (_, g) = sigmoid_bce_with_logits(&z, &labels).unwrap();
        rep.add(plain(&mut z.clone(), &g, 1e-3, |p| sigmoid_bce_with_logits(p, &labels).unwrap().0));
        let s: Vec<f32> = (0..8).map(|_| r.random_range(0.05..0.95)).collect();
        let (_, g) = binary_cross_entropy(&s, &labels).unwrap();
        rep.add(plain(&mut s.clone(), &g, 1e-4, |p| binary_cross_entropy(p, &labels).unwrap().0));
        rep.seeds += 1;
    }
    rep
}

/// The online classifier's training objective: balanced BCE on the
/// classifier's logits, through both linear layers, ReLU and dropout.
pub fn grad_refinement() -> GradReport {
    let mut rep = GradReport::new("online classifier objective");
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let clf = OFBClassifier::new(6, 8, 0.1, seed);
        let x = Tensor::randn(&[10, 6], 1.0, &mut r);
        let labels: Vec<f32> = (0..10).map(|i| (i < 5) as u8 as f32).collect();
        let run = |net: &Sequential, x: &Tensor| -> (f64, Vec<f32>, u64) {
            let mut n = net.clone();
            let (z, caches) = n.forward(x, Mode::Train).unwrap();
            let (l, g) = sigmoid_bce_with_logits(z.data(), &labels).unwrap();
            (l, g, activation_signature(&caches))
        };
        let (_, g, _) = run(&clf.net, &x);
        let mut n = clf.net.clone();
        n.zero_grad();
        let (_, caches) = n.forward(&x, Mode::Train).unwrap();
        let gx = n.backward(&caches, &Tensor::new(vec![10, 1], g).unwrap()).unwrap();
        let all = |len| (0..len).collect::<Vec<_>>();
        rep.add(check_subset(x.data(), gx.data(), &all(x.len()), 1e-3, |p| {
            let (l, _, s) = run(&clf.net, &Tensor::new(vec![10, 6], p.to_vec()).unwrap());
            (l, s)
        }));
        for li in [0, 3] {
            for bias in [false, true] {
                let (v, gr) = if bias {
                    (&n.layers[li].params.bias, &n.layers[li].params.grad_bias)
                } else {
                    (&n.layers[li].params.weights, &n.layers[li].params.grad_weights)
                };
                rep.add(check_subset(v.data(), gr.data(), &all(v.len()), 1e-3, |p| {
                    let mut m = clf.net.clone();
                    let t = if bias { &mut m.layers[li].params.bias } else { &mut m.layers[li].params.weights };
                    t.data_mut().copy_from_slice(p);
                    let (l, _, s) = run(&m, &x);
                    (l, s)
                }));
            }
        }
        rep.seeds += 1;
    }
    rep
}

pub fn gradient_suite() -> Vec<GradReport> {
    vec![
        grad_conv(),
        grad_linear(),
        grad_relu(),
        grad_batch_norm(),
        grad_dropout(),
        grad_upsample(),
        grad_cosine(),
        grad_cross_entropy(),
        grad_pseudo_cls(),
        grad_bce(),
        grad_seg_loss(),
        grad_episode_loss(),
        grad_seg_end_to_end(),
        grad_pseudo_end_to_end(),
        grad_refinement(),
    ]
}

/// Outcome of one oracle comparison over randomized cases.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub cases: u64,
    pub mismatches: u64,
    pub max_abs_error: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.cases >= ORACLE_CASES && self.mismatches == 0 && self.max_abs_error <= 1e-5
    }
}

fn random_features(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[c, h, w], 1.0, rng)
}

/// Mask average pooling against a per-pixel double loop.
pub fn oracle_map() -> OracleReport {
    let mut rep = OracleReport {
        name: "mask average pooling",
        cases: 0,
        mismatches: 0,
        max_abs_error: 0.0,
    };
    for seed in 0..ORACLE_CASES {
        let mut r = rng(1000 + seed);
        let c = r.random_range(1..6);
        let f = random_features(c, 8, 8, &mut r);
        let labels: Vec<u32> = (0..64).map(|_| r.random_range(0..4)).collect();
        let id = labels[r.random_range(0..64)];
        let got = mask_average_pool(&f, &labels, id).unwrap();
        for (k, g) in got.iter().enumerate() {
            let (mut s, mut n) = (0f64, 0usize);
            for y in 0..8 {
                for x in 0..8 {
                    if labels[y * 8 + x] == id {
                        s += f.data()[(k * 8 + y) * 8 + x] as f64;
                        n += 1;
                    }
                }
            }
            rep.max_abs_error = rep.max_abs_error.max((*g as f64 - s / n as f64).abs());
        }
        rep.cases += 1;
    }
    rep
}

fn brute_cos(a: &[f64], b: &[f32]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, &y)| x * y as f64).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Pseudo-label assignment against an exhaustive cosine search.
pub fn oracle_pseudo_labels() -> OracleReport {
    let mut rep = OracleReport {
        name: "pseudo-label assignment",
        cases: 0,
        mismatches: 0,
        max_abs_error: 0.0,
    };
    for seed in 0..ORACLE_CASES {
        let mut r = rng(2000 + seed);
        let c = r.random_range(2..6);
        let f = random_features(c, 8, 8, &mut r);
        let fg = random_mask(8, 8, 0.3, &mut r);
        let levels: Vec<PrototypeLevel> = (0..r.random_range(1..4))
            .map(|_| PrototypeLevel {
                fg: (0..r.random_range(1..5)).map(|_| Tensor::randn(&[c], 1.0, &mut r).into_data()).collect(),
                bg: (0..r.random_range(1..5)).map(|_| Tensor::randn(&[c], 1.0, &mut r).into_data()).collect(),
            })
            .collect();
        let h = PrototypeHierarchy { levels };
        let stack = assign_pseudo_labels(&f, &fg, &h).unwrap();
        for (l, level) in h.levels.iter().enumerate() {
            for p in 0..64 {
                let v: Vec<f64> = (0..c).map(|k| f.data()[k * 64 + p] as f64).collect();
                let (set, offset) = if fg.data[p] != 0 { (&level.fg, 0) } else { (&level.bg, level.fg.len()) };
                let mut best = 0;
                for j in 1..set.len() {
                    if brute_cos(&v, &set[j]) > brute_cos(&v, &set[best]) {
                        best = j;
                    }
                }
                if stack.levels[l][p] as usize != offset + best {
                    rep.mismatches += 1;
                }
            }
        }
        rep.cases += 1;
    }
    rep
}

/// Confident-pixel harvesting against enumeration of the score map.
pub fn oracle_harvest() -> OracleReport {
    let mut rep = OracleReport {
        name: "confident-pixel selection",
        cases: 0,
        mismatches: 0,
        max_abs_error: 0.0,
    };
    for seed in 0..ORACLE_CASES {
        let mut r = rng(3000 + seed);
        let f = random_features(3, 8, 8, &mut r);
        let fgs: Vec<f32> = (0..64).map(|_| r.random::<f32>()).collect();
        let mut data: Vec<f32> = fgs.iter().map(|v| 1.0 - v).collect();
        data.extend(&fgs);
        let scores = Tensor::new(vec![2, 8, 8], data.clone()).unwrap();
        let cfg = RefineConfig {
            tau_fg: r.random_range(0.3..0.9),
            tau_bg: r.random_range(0.3..0.9),
            max_pixels_per_class: r.random_range(1..80),
            ..RefineConfig::default()
        };
        let got = select_confident_pixels(&scores, &f, &cfg).unwrap();
        for (side, (tau, chosen)) in [(cfg.tau_bg, &got.negatives), (cfg.tau_fg, &got.positives)].into_iter().enumerate() {
            let s = &data[side * 64..(side + 1) * 64];
            let mut want: Vec<usize> = (0..64).filter(|&p| s[p] > tau).collect();
            // Selection sort by descending score, lower index first on ties.
            for i in 0..want.len() {
                let mut b = i;
                for j in i + 1..want.len() {
                    if s[want[j]] > s[want[b]] || (s[want[j]] == s[want[b]] && want[j] < want[b]) {
                        b = j;
                    }
                }
                want.swap(i, b);
            }
            want.truncate(cfg.max_pixels_per_class);
            let want: Vec<Vec<f32>> = want.iter().map(|&p| (0..3).map(|k| f.data()[k * 64 + p]).collect()).collect();
            let have: Vec<Vec<f32>> = chosen.iter().map(|s| s.feature.clone()).collect();
            if want != have {
                rep.mismatches += 1;
            }
        }
        rep.cases += 1;
    }
    rep
}

/// Count-sum mIoU against per-pixel counting.
pub fn oracle_miou() -> OracleReport {
    let mut rep = OracleReport {
        name: "mean IoU",
        cases: 0,
        mismatches: 0,
        max_abs_error: 0.0,
    };
    for seed in 0..ORACLE_CASES {
        let mut r = rng(4000 + seed);
        let n = r.random_range(5..12);
        let preds: Vec<Mask> = (0..n).map(|_| random_mask(8, 8, r.random_range(0.1..0.9), &mut r)).collect();
        let gts: Vec<Mask> = (0..n).map(|_| random_mask(8, 8, r.random_range(0.1..0.9), &mut r)).collect();
        let ids: Vec<u32> = (0..n).map(|_| r.random_range(0..3)).collect();
        let got = compute_miou(&preds, &gts, &ids).unwrap();
        let mut per = std::collections::BTreeMap::<u32, (u64, u64)>::new();
        for i in 0..n {
            let e = per.entry(ids[i]).or_default();
            for p in 0..64 {
                let (a, b) = (preds[i].data[p] != 0, gts[i].data[p] != 0);
                e.0 += (a && b) as u64;
                e.1 += (a || b) as u64;
            }
        }
        let want = per.values().map(|&(i, u)| i as f64 / u as f64).sum::<f64>() / per.len() as f64;
        for (c, &(i, u)) in &per {
            let g = &got.per_class[c];
            if (g.intersection, g.union) != (i, u) {
                rep.mismatches += 1;
            }
        }
        rep.max_abs_error = rep.max_abs_error.max((got.miou - want).abs());
        rep.cases += 1;
    }
    rep
}

pub fn oracle_suite() -> Vec<OracleReport> {
    vec![oracle_map(), oracle_pseudo_labels(), oracle_harvest(), oracle_miou()]
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x as f64 / n) as f32).collect()
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - brute_cos(&a.iter().map(|&x| x as f64).collect::<Vec<_>>(), b)
}

/// Outcome of the clustering checks.
#[derive(Clone, Debug)]
pub struct ClusterReport {
    pub runs: usize,
    pub monotone_runs: usize,
    pub worst_center_distance: f64,
    pub hierarchy_identical: bool,
}

impl ClusterReport {
    pub fn passed(&self) -> bool {
        self.monotone_runs == self.runs && self.worst_center_distance <= 0.05 && self.hierarchy_identical
    }
}

/// Four unit directions with `per` noisy unit-norm samples around each.
pub fn planted_corpus(dim: usize, per: usize, noise: f32, rng: &mut ChaCha8Rng) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let centers: Vec<Vec<f32>> = (0..4).map(|_| unit(Tensor::randn(&[dim], 1.0, rng).into_data())).collect();
    let mut points = Vec::new();
    for c in &centers {
        for _ in 0..per {
            let e = Tensor::randn(&[dim], noise, rng);
            points.push(unit(c.iter().zip(e.data()).map(|(a, b)| a + b).collect()));
        }
    }
    (centers, points)
}

fn random_corpus(n_fg: usize, n_bg: usize, dim: usize, rng: &mut ChaCha8Rng) -> spfl_core::prototypes::RegionCorpus {
    use spfl_core::prototypes::{RegionCorpus, RegionDescriptor};
    let d = |foreground: bool, i: usize, rng: &mut ChaCha8Rng| RegionDescriptor {
        vector: unit(Tensor::randn(&[dim], 1.0, rng).into_data()),
        image_id: i,
        region_id: 0,
        foreground,
        pixel_count: 1,
    };
    RegionCorpus {
        fg: (0..n_fg).map(|i| d(true, i, rng)).collect(),
        bg: (0..n_bg).map(|i| d(false, i, rng)).collect(),
        skipped: 0,
    }
}

pub fn clustering_report() -> ClusterReport {
    use spfl_core::kmeans::{kmeans, KMeansConfig};
    use spfl_core::prototypes::{build_hierarchy, ClusterConfig};
    let mut runs = 0;
    let mut monotone_runs = 0;
    let mut worst = 0f64;
    for seed in 0..20u64 {
        let mut r = rng(5000 + seed);
        let (centers, points) = planted_corpus(16, 40, 0.05, &mut r);
        let res = kmeans(&points, 4, &KMeansConfig { seed, ..KMeansConfig::default() }).unwrap();
        runs += 1;
        monotone_runs += res.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()) as usize;
        for c in &centers {
            let d = res.centers.iter().map(|f| cosine_distance(c, f)).fold(f64::INFINITY, f64::min);
            worst = worst.max(d);
        }
        // Unstructured data exercises more Lloyd iterations.
        let noise: Vec<Vec<f32>> = (0..120).map(|_| Tensor::randn(&[6], 1.0, &mut r).into_data()).collect();
        let res = kmeans(&noise, 7, &KMeansConfig { seed, ..KMeansConfig::default() }).unwrap();
        runs += 1;
        monotone_runs += res.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()) as usize;
    }
    let corpus = random_corpus(60, 90, 12, &mut rng(5100));
    let cfg = ClusterConfig::default();
    let a = build_hierarchy(&corpus, &cfg).unwrap();
    let b = build_hierarchy(&corpus, &cfg).unwrap();
    let bits = |h: &PrototypeHierarchy| -> Vec<u32> {
        h.levels
            .iter()
            .flat_map(|l| l.fg.iter().chain(&l.bg))
            .flat_map(|v| v.iter().map(|x| x.to_bits()))
            .collect()
    };
    ClusterReport {
        runs,
        monotone_runs,
        worst_center_distance: worst,
        hierarchy_identical: bits(&a) == bits(&b) && a.level_sizes() == b.level_sizes(),
    }
}

/// Piecewise-constant rectangles in random colors plus pixel noise.
pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> spfl_core::image::Image {
    let mut img = spfl_core::image::Image::filled(h, w, [rng.random(), rng.random(), rng.random()]);
    for _ in 0..rng.random_range(1..6) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        let c: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        for y in y0..y1 {
            for x in x0..x1 {
                img.set(y, x, c);
            }
        }
    }
    let noise = rng.random_range(0.0..0.08f32);
    for v in img.pixels.iter_mut() {
        *v = (*v + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0);
    }
    img
}

/// Outcome of the region segmentation checks.
#[derive(Clone, Debug)]
pub struct RegionReport {
    pub images: usize,
    pub partition_failures: usize,
    /// Mean region count at each tested `scale_k`, ascending in `k`.
    pub mean_counts: Vec<(f32, f64)>,
}

impl RegionReport {
    pub fn monotone(&self) -> bool {
        self.mean_counts.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn passed(&self) -> bool {
        self.images >= 100 && self.partition_failures == 0 && self.monotone()
    }
}

pub fn region_report() -> RegionReport {
    use spfl_core::region::{segment_regions, SegConfig};
    let mut failures = 0;
    for seed in 0..100 {
        let mut r = rng(6000 + seed);
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let img = random_image(h, w, &mut r);
        let cfg = SegConfig {
            scale_k: r.random_range(10.0..400.0),
            min_region_size: r.random_range(1..30),
            gaussian_sigma: r.random_range(0.0..1.5),
            ..SegConfig::default()
        };
        let map = segment_regions(&img, &cfg).unwrap();
        let sizes = map.region_sizes();
        let ok = map.verify_invariants().is_ok()
            && (map.num_regions == 1 || sizes.iter().all(|&s| s >= cfg.min_region_size))
            && segment_regions(&img, &cfg).unwrap() == map;
        failures += (!ok) as usize;
    }
    let images: Vec<_> = (0..20).map(|s| random_image(48, 48, &mut rng(7000 + s))).collect();
    let mean_counts = [25.0f32, 100.0, 400.0, 1600.0]
        .into_iter()
        .map(|k| {
            let cfg = SegConfig {
                scale_k: k,
                min_region_size: 4,
                ..SegConfig::default()
            };
            let total: usize = images.iter().map(|i| segment_regions(i, &cfg).unwrap().num_regions).sum();
            (k, total as f64 / images.len() as f64)
        })
        .collect();
    RegionReport {
        images: 100,
        partition_failures: failures,
        mean_counts,
    }
}
