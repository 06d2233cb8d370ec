//! 3D ResNet-18 style classifier with explicit forward and backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, Act, BnCache, ConvSpec};
use super::scalar::{gemm, Scalar};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub input_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetworkConfig {
    pub fn full() -> Self {
        NetworkConfig {
            channels: [64, 128, 256, 512],
            blocks: [2, 2, 2, 2],
            stem_kernel: 7,
            stem_stride: 2,
            input_dim: crate::sampling::INSTANCE_DIM,
        }
    }

    pub fn tiny() -> Self {
        NetworkConfig {
            channels: [8, 16, 32, 64],
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::InvalidArgument(format!(
                "unknown network preset `{other}` (expected full or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().chain(&self.blocks).any(|&v| v == 0) {
            return Err(Error::InvalidArgument("channel widths and block counts must be positive".into()));
        }
        if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 || self.stem_stride == 0 {
            return Err(Error::InvalidArgument("stem kernel must be odd and stride positive".into()));
        }
        if self.input_dim < 16 {
            return Err(Error::InvalidArgument("input dimension must be at least 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: ConvSpec,
    w: usize,
}

#[derive(Debug, Clone)]
struct BnLayer {
    c: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    down: Option<(ConvLayer, BnLayer)>,
}

struct BlockTape<T> {
    x: Act<T>,
    bn1: BnCache<T>,
    h1: Act<T>,
    bn2: BnCache<T>,
    down_bn: Option<BnCache<T>>,
    out: Act<T>,
}

/// Activations retained by a training-mode forward pass.
pub struct Tape<T> {
    input: Act<T>,
    stem_bn: BnCache<T>,
    stem_out: Act<T>,
    pool_arg: Vec<u32>,
    blocks: Vec<BlockTape<T>>,
    feat_dims: [usize; 3],
    pooled: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ResNet3d<T> {
    config: NetworkConfig,
    stem: ConvLayer,
    stem_bn: BnLayer,
    blocks: Vec<Block>,
    fc_w: usize,
    fc_b: usize,
    features: usize,
    params: Vec<T>,
    buffers: Vec<T>,
}

struct Layout {
    params: usize,
    buffers: usize,
}

impl Layout {
    fn conv(&mut self, spec: ConvSpec) -> ConvLayer {
        let w = self.params;
        self.params += spec.weight_len();
        ConvLayer { spec, w }
    }

    fn bn(&mut self, c: usize) -> BnLayer {
        let l = BnLayer {
            c,
            gamma: self.params,
            beta: self.params + c,
            mean: self.buffers,
            var: self.buffers + c,
        };
        self.params += 2 * c;
        self.buffers += 2 * c;
        l
    }
}

impl<T: Scalar> ResNet3d<T> {
    /// Builds the network and draws initial weights: Kaiming-normal
    /// (fan-out) convolutions, unit BN scale, uniform ±1/√fan_in for the head.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut lay = Layout { params: 0, buffers: 0 };
        let c0 = config.channels[0];
        let stem = lay.conv(ConvSpec {
            cin: 1,
            cout: c0,
            k: config.stem_kernel,
            stride: config.stem_stride,
            pad: config.stem_kernel / 2,
        });
        let stem_bn = lay.bn(c0);
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (stage, (&cout, &nb)) in config.channels.iter().zip(&config.blocks).enumerate() {
            for bi in 0..nb {
                let stride = if stage > 0 && bi == 0 { 2 } else { 1 };
                let conv1 = lay.conv(ConvSpec { cin, cout, k: 3, stride, pad: 1 });
                let bn1 = lay.bn(cout);
                let conv2 = lay.conv(ConvSpec { cin: cout, cout, k: 3, stride: 1, pad: 1 });
                let bn2 = lay.bn(cout);
                let down = if stride != 1 || cin != cout {
                    let c = lay.conv(ConvSpec { cin, cout, k: 1, stride, pad: 0 });
                    let b = lay.bn(cout);
                    Some((c, b))
                } else {
                    None
                };
                blocks.push(Block { conv1, bn1, conv2, bn2, down });
                cin = cout;
            }
        }
        let features = cin;
        let fc_w = lay.params;
        let fc_b = fc_w + NUM_CLASSES * features;
        lay.params = fc_b + NUM_CLASSES;

        let mut net = ResNet3d {
            config,
            stem,
            stem_bn,
            blocks,
            fc_w,
            fc_b,
            features,
            params: vec![T::zero(); lay.params],
            buffers: vec![T::zero(); lay.buffers],
        };
        net.initialise(seed);
        Ok(net)
    }

    fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.stem];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
            if let Some((c, _)) = &b.down {
                v.push(c);
            }
        }
        v
    }

    fn bn_layers(&self) -> Vec<&BnLayer> {
        let mut v = vec![&self.stem_bn];
        for b in &self.blocks {
            v.push(&b.bn1);
            v.push(&b.bn2);
            if let Some((_, n)) = &b.down {
                v.push(n);
            }
        }
        v
    }

    fn initialise(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs: Vec<ConvLayer> = self.conv_layers().into_iter().cloned().collect();
        for c in convs {
            let fan_out = c.spec.cout * c.spec.k.pow(3);
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).unwrap();
            for v in &mut self.params[c.w..c.w + c.spec.weight_len()] {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        let bns: Vec<BnLayer> = self.bn_layers().into_iter().cloned().collect();
        for b in bns {
            self.params[b.gamma..b.gamma + b.c].fill(T::one());
            self.params[b.beta..b.beta + b.c].fill(T::zero());
            self.buffers[b.mean..b.mean + b.c].fill(T::zero());
            self.buffers[b.var..b.var + b.c].fill(T::one());
        }
        let bound = 1.0 / (self.features as f64).sqrt();
        for v in &mut self.params[self.fc_w..self.fc_b + NUM_CLASSES] {
            *v = T::from_f64(rng.gen_range(-bound..bound));
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[T] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [T] {
        &mut self.buffers
    }

    /// Index range of the classifier bias inside the flat parameter vector.
    pub fn head_bias_range(&self) -> std::ops::Range<usize> {
        self.fc_b..self.fc_b + NUM_CLASSES
    }

    /// Index range of the classifier weight matrix `[class][feature]`.
    pub fn head_weight_range(&self) -> std::ops::Range<usize> {
        self.fc_w..self.fc_b
    }

    /// Packs instances into a batch, checking each is `input_dim³`.
    pub fn batch_from(&self, instances: &[&[f32]]) -> Result<Act<T>> {
        let d = self.config.input_dim;
        let len = d * d * d;
        let mut data = Vec::with_capacity(instances.len() * len);
        for inst in instances {
            if inst.len() != len {
                return Err(Error::ShapeMismatch {
                    expected: format!("{d}x{d}x{d} ({len} voxels)"),
                    got: format!("{} voxels", inst.len()),
                });
            }
            data.extend(inst.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Act { n: instances.len(), c: 1, dims: [d; 3], data })
    }

    fn check_input(&self, x: &Act<T>) -> Result<()> {
        let d = self.config.input_dim;
        if x.c != 1 || x.dims != [d; 3] {
            return Err(Error::ShapeMismatch {
                expected: format!("1x{d}x{d}x{d}"),
                got: format!("{}x{}x{}x{}", x.c, x.dims[0], x.dims[1], x.dims[2]),
            });
        }
        Ok(())
    }

    fn p(&self, start: usize, len: usize) -> &[T] {
        &self.params[start..start + len]
    }

    fn bn_eval(&self, x: &Act<T>, l: &BnLayer) -> Act<T> {
        layers::bn_forward_eval(
            x,
            self.p(l.gamma, l.c),
            self.p(l.beta, l.c),
            &self.buffers[l.mean..l.mean + l.c],
            &self.buffers[l.var..l.var + l.c],
        )
    }

    fn bn_train(&mut self, x: &Act<T>, l: &BnLayer) -> (Act<T>, BnCache<T>) {
        let (params, buffers) = (&self.params, &mut self.buffers);
        let (rm, rv) = buffers[l.mean..l.var + l.c].split_at_mut(l.c);
        layers::bn_forward_train(x, &params[l.gamma..l.gamma + l.c], &params[l.beta..l.beta + l.c], rm, rv)
    }

    fn conv(&self, x: &Act<T>, l: &ConvLayer) -> Act<T> {
        layers::conv_forward(x, self.p(l.w, l.spec.weight_len()), &l.spec)
    }

    fn head(&self, pooled: &[T], n: usize) -> Vec<[T; 2]> {
        let mut logits = vec![T::zero(); n * NUM_CLASSES];
        gemm(
            n,
            self.features,
            NUM_CLASSES,
            pooled,
            false,
            self.p(self.fc_w, NUM_CLASSES * self.features),
            true,
            T::zero(),
            &mut logits,
        );
        logits
            .chunks(NUM_CLASSES)
            .map(|r| [r[0] + self.params[self.fc_b], r[1] + self.params[self.fc_b + 1]])
            .collect()
    }

    /// Evaluation-mode forward pass (running BN statistics).
    pub fn forward(&self, x: &Act<T>) -> Result<Vec<[T; 2]>> {
        self.check_input(x)?;
        let mut h = self.conv(x, &self.stem);
        h = self.bn_eval(&h, &self.stem_bn);
        layers::relu_inplace(&mut h);
        let (mut h, _) = layers::maxpool_forward(&h);
        for b in &self.blocks {
            let mut t = self.conv(&h, &b.conv1);
            t = self.bn_eval(&t, &b.bn1);
            layers::relu_inplace(&mut t);
            t = self.conv(&t, &b.conv2);
            t = self.bn_eval(&t, &b.bn2);
            match &b.down {
                Some((c, n)) => {
                    let s = self.bn_eval(&self.conv(&h, c), n);
                    for (a, v) in t.data.iter_mut().zip(&s.data) {
                        *a += *v;
                    }
                }
                None => {
                    for (a, v) in t.data.iter_mut().zip(&h.data) {
                        *a += *v;
                    }
                }
            }
            layers::relu_inplace(&mut t);
            h = t;
        }
        let pooled = layers::gap_forward(&h);
        Ok(self.head(&pooled, x.n))
    }

    /// Training-mode forward pass: batch statistics, running statistics
    /// updated, activations retained for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Act<T>) -> Result<(Vec<[T; 2]>, Tape<T>)> {
        self.check_input(x)?;
        let stem = self.stem.clone();
        let stem_bn_l = self.stem_bn.clone();
        let h = self.conv(x, &stem);
        let (mut h, stem_bn) = self.bn_train(&h, &stem_bn_l);
        layers::relu_inplace(&mut h);
        let stem_out = h;
        let (mut h, pool_arg) = layers::maxpool_forward(&stem_out);
        let blocks = self.blocks.clone();
        let mut tapes = Vec::with_capacity(blocks.len());
        for b in &blocks {
            let t = self.conv(&h, &b.conv1);
            let (mut t, bn1) = self.bn_train(&t, &b.bn1);
            layers::relu_inplace(&mut t);
            let h1 = t;
            let t = self.conv(&h1, &b.conv2);
            let (mut t, bn2) = self.bn_train(&t, &b.bn2);
            let down_bn = match &b.down {
                Some((c, n)) => {
                    let s = self.conv(&h, c);
                    let (s, cache) = self.bn_train(&s, n);
                    for (a, v) in t.data.iter_mut().zip(&s.data) {
                        *a += *v;
                    }
                    Some(cache)
                }
                None => {
                    for (a, v) in t.data.iter_mut().zip(&h.data) {
                        *a += *v;
                    }
                    None
                }
            };
            layers::relu_inplace(&mut t);
            tapes.push(BlockTape { x: h, bn1, h1, bn2, down_bn, out: t.clone() });
            h = t;
        }
        let pooled = layers::gap_forward(&h);
        let logits = self.head(&pooled, x.n);
        let tape = Tape {
            input: x.clone(),
            stem_bn,
            stem_out,
            pool_arg,
            blocks: tapes,
            feat_dims: h.dims,
            pooled,
        };
        Ok((logits, tape))
    }

    /// Gradient of all parameters given the gradient of the logits.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[[T; 2]]) -> Vec<T> {
        let n = dlogits.len();
        let mut grad = vec![T::zero(); self.params.len()];
        let dl: Vec<T> = dlogits.iter().flat_map(|r| r.iter().copied()).collect();
        // Head: logits = pooled · Wᵀ + b
        {
            let (gw, gb) = grad[self.fc_w..].split_at_mut(self.fc_b - self.fc_w);
            gemm(NUM_CLASSES, n, self.features, &dl, true, &tape.pooled, false, T::one(), gw);
            for r in dlogits {
                gb[0] += r[0];
                gb[1] += r[1];
            }
        }
        let mut dpooled = vec![T::zero(); n * self.features];
        gemm(
            n,
            NUM_CLASSES,
            self.features,
            &dl,
            false,
            self.p(self.fc_w, NUM_CLASSES * self.features),
            false,
            T::zero(),
            &mut dpooled,
        );
        let mut dh = layers::gap_backward(&dpooled, n, self.features, tape.feat_dims);

        for (b, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            layers::relu_backward_inplace(&bt.out, &mut dh);
            // Main branch.
            let d2 = self.bn_back(&dh, &bt.bn2, &b.bn2, &mut grad);
            let mut d1 = self
                .conv_back(&bt.h1, &d2, &b.conv2, &mut grad, true)
                .expect("dx requested");
            layers::relu_backward_inplace(&bt.h1, &mut d1);
            let d1 = self.bn_back(&d1, &bt.bn1, &b.bn1, &mut grad);
            let mut dx = self
                .conv_back(&bt.x, &d1, &b.conv1, &mut grad, true)
                .expect("dx requested");
            // Shortcut.
            match (&b.down, &bt.down_bn) {
                (Some((c, nl)), Some(cache)) => {
                    let ds = self.bn_back(&dh, cache, nl, &mut grad);
                    let dsx = self.conv_back(&bt.x, &ds, c, &mut grad, true).expect("dx requested");
                    for (a, v) in dx.data.iter_mut().zip(&dsx.data) {
                        *a += *v;
                    }
                }
                _ => {
                    for (a, v) in dx.data.iter_mut().zip(&dh.data) {
                        *a += *v;
                    }
                }
            }
            dh = dx;
        }
        let mut ds = layers::maxpool_backward(&dh, &tape.pool_arg, tape.stem_out.dims);
        layers::relu_backward_inplace(&tape.stem_out, &mut ds);
        let ds = self.bn_back(&ds, &tape.stem_bn, &self.stem_bn, &mut grad);
        self.conv_back(&tape.input, &ds, &self.stem, &mut grad, false);
        grad
    }

    fn bn_back(&self, dy: &Act<T>, cache: &BnCache<T>, l: &BnLayer, grad: &mut [T]) -> Act<T> {
        let (gg, gb) = grad[l.gamma..l.beta + l.c].split_at_mut(l.c);
        layers::bn_backward(dy, cache, self.p(l.gamma, l.c), gg, gb)
    }

    fn conv_back(&self, x: &Act<T>, dy: &Act<T>, l: &ConvLayer, grad: &mut [T], need_dx: bool) -> Option<Act<T>> {
        let len = l.spec.weight_len();
        layers::conv_backward(x, dy, self.p(l.w, len), &l.spec, &mut grad[l.w..l.w + len], need_dx)
    }

    /// Training-mode cross-entropy loss and its parameter gradient.
    pub fn loss_and_grad(
        &mut self,
        x: &Act<T>,
        labels: &[usize],
        class_weights: Option<[f64; 2]>,
    ) -> Result<(f64, Vec<T>)> {
        let (logits, tape) = self.forward_train(x)?;
        let (loss, dlogits) = cross_entropy(&logits, labels, class_weights);
        let grad = self.backward(&tape, &dlogits);
        Ok((loss, grad))
    }
}

/// Softmax probabilities computed in f64.
pub fn softmax2<T: Scalar>(logits: [T; 2]) -> [f64; 2] {
    let a = logits[0].as_f64();
    let b = logits[1].as_f64();
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    [ea / s, eb / s]
}

/// Mean (optionally class-weighted) cross-entropy and its logit gradient.
/// Weighted reduction divides by the summed sample weights.
pub fn cross_entropy<T: Scalar>(
    logits: &[[T; 2]],
    labels: &[usize],
    class_weights: Option<[f64; 2]>,
) -> (f64, Vec<[T; 2]>) {
    assert_eq!(logits.len(), labels.len());
    let w = class_weights.unwrap_or([1.0, 1.0]);
    let total: f64 = labels.iter().map(|&y| w[y]).sum();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        let a = l[0].as_f64();
        let b = l[1].as_f64();
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let p = [(a - lse).exp(), (b - lse).exp()];
        let z = if y == 0 { a } else { b };
        loss += w[y] * (lse - z);
        let s = w[y] / total;
        grad.push([
            T::from_f64(s * (p[0] - if y == 0 { 1.0 } else { 0.0 })),
            T::from_f64(s * (p[1] - if y == 1 { 1.0 } else { 0.0 })),
        ]);
    }
    (loss / total, grad)
}
