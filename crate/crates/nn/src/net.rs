//! U-Net style encoder-decoder.
//!
//! Each encoder stage is two 3×3(×3) conv+ReLU layers followed by max
//! pooling; the decoder upsamples with a stride-2 transposed convolution,
//! concatenates the skip connection and applies two more conv+ReLU layers.
//! A 1×1 convolution and softmax produce class probabilities. The 2D variant
//! is the same graph with kernels and pooling of extent 1 along the last
//! axis, so every index of that axis is processed as an independent slice.

use crossseg_core::{Dims, Error, Execution, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gemm::Gemm;
use crate::layers::{self, ConvShape, UpShape};
use crate::tensor::Feature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    /// Encoder stages, counting the bottleneck.
    pub depth: usize,
    pub dimensionality: Dimensionality,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Validation(format!("depth {} < 2", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Validation(format!("base_channels {} < 4", self.base_channels)));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.depth > 8 {
            return Err(Error::Validation(format!("depth {} > 8", self.depth)));
        }
        Ok(())
    }

    fn kernel(&self) -> [usize; 3] {
        match self.dimensionality {
            Dimensionality::Two => [3, 3, 1],
            Dimensionality::Three => [3, 3, 3],
        }
    }

    fn pool(&self) -> [usize; 3] {
        match self.dimensionality {
            Dimensionality::Two => [2, 2, 1],
            Dimensionality::Three => [2, 2, 2],
        }
    }

    /// Checks that every pooled axis is divisible by `2^(depth-1)`.
    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        let pool = self.pool();
        for a in 0..3 {
            if dims[a] == 0 || (pool[a] > 1 && !dims[a].is_multiple_of(f)) {
                return Err(Error::Shape(format!(
                    "input {dims:?}: axis {a} not divisible by {f} for depth {}",
                    self.depth
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    shape: ConvShape,
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Up {
    shape: UpShape,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<[Conv; 2]>,
    up: Vec<Up>,
    dec: Vec<[Conv; 2]>,
    head: Conv,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let mut total = 0;
        let mut conv = |kernel, cin, cout| {
            let shape = ConvShape { kernel, cin, cout };
            let c = Conv { shape, w: total, b: total + shape.weight_len() };
            total += shape.weight_len() + cout;
            c
        };
        let k = cfg.kernel();
        let ch = |s: usize| cfg.base_channels << s;
        let mut enc = Vec::new();
        for s in 0..cfg.depth {
            let cin = if s == 0 { 1 } else { ch(s - 1) };
            enc.push([conv(k, cin, ch(s)), conv(k, ch(s), ch(s))]);
        }
        let mut dec = Vec::new();
        for s in 0..cfg.depth - 1 {
            dec.push([conv(k, 2 * ch(s), ch(s)), conv(k, ch(s), ch(s))]);
        }
        let head = conv([1, 1, 1], ch(0), cfg.num_classes);
        let mut up = Vec::new();
        for s in 0..cfg.depth - 1 {
            let shape = UpShape { factor: cfg.pool(), cin: ch(s + 1), cout: ch(s) };
            up.push(Up { shape, w: total, b: total + shape.weight_len() });
            total += shape.weight_len() + shape.cout;
        }
        Layout { enc, up, dec, head, total }
    }
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    enc_in: Vec<Feature<T>>,
    enc_a: Vec<Feature<T>>,
    enc_b: Vec<Feature<T>>,
    pool_arg: Vec<Vec<u32>>,
    dec_in: Vec<Feature<T>>,
    dec_cat: Vec<Feature<T>>,
    dec_a: Vec<Feature<T>>,
    dec_b: Vec<Feature<T>>,
    probs: Feature<T>,
}

impl<T> Cache<T> {
    pub fn probs(&self) -> &Feature<T> {
        &self.probs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<T>,
}

/// Seeded network of the configured architecture.
pub fn build_network<T: Gemm>(config: NetworkConfig) -> Result<Network<T>> {
    Network::new(config)
}

impl<T: Gemm> Network<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |start: usize, len: usize, fan_in: usize, gain: f64| {
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[start..start + len] {
                *p = T::of(normal.sample(&mut rng));
            }
        };
        for c in layout.enc.iter().chain(&layout.dec).flatten() {
            fill(c.w, c.shape.weight_len(), c.shape.taps() * c.shape.cin, 2.0);
        }
        fill(layout.head.w, layout.head.shape.weight_len(), layout.head.shape.cin, 1.0);
        for u in &layout.up {
            fill(u.w, u.shape.weight_len(), u.shape.cin, 1.0);
        }
        Ok(Network { config, params })
    }

    /// Wraps an existing parameter vector.
    pub fn from_params(config: NetworkConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let want = Layout::new(&config).total;
        if params.len() != want {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture of {want}",
                params.len()
            )));
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn conv(&self, x: &Feature<T>, c: &Conv, relu: bool, exec: Execution) -> Feature<T> {
        let w = &self.params[c.w..c.w + c.shape.weight_len()];
        let b = &self.params[c.b..c.b + c.shape.cout];
        layers::conv_forward(x, w, b, c.shape, relu, exec)
    }

    /// Class probabilities for a single-channel input, plus the activations
    /// needed by [`Network::backward`].
    pub fn forward(&self, input: &Feature<T>, exec: Execution) -> Result<Cache<T>> {
        if input.channels() != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {}", input.channels())));
        }
        self.config.check_input(input.dims())?;
        let l = Layout::new(&self.config);
        let depth = self.config.depth;
        let pool = self.config.pool();
        let mut enc_in = vec![input.clone()];
        let (mut enc_a, mut enc_b, mut pool_arg) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..depth {
            let a = self.conv(&enc_in[s], &l.enc[s][0], true, exec);
            let b = self.conv(&a, &l.enc[s][1], true, exec);
            if s + 1 < depth {
                let (p, arg) = layers::maxpool_forward(&b, pool);
                enc_in.push(p);
                pool_arg.push(arg);
            }
            enc_a.push(a);
            enc_b.push(b);
        }
        let n = depth - 1;
        let mut dec_in = vec![None; n];
        let mut dec_cat = vec![None; n];
        let mut dec_a = vec![None; n];
        let mut dec_b: Vec<Option<Feature<T>>> = vec![None; n];
        for s in (0..n).rev() {
            let y = if s + 1 == n { enc_b[n].clone() } else { dec_b[s + 1].clone().expect("deeper stage done") };
            let u = &l.up[s];
            let up = layers::upconv_forward(
                &y,
                &self.params[u.w..u.w + u.shape.weight_len()],
                &self.params[u.b..u.b + u.shape.cout],
                u.shape,
            );
            let cat = layers::concat(&enc_b[s], &up);
            let a = self.conv(&cat, &l.dec[s][0], true, exec);
            let b = self.conv(&a, &l.dec[s][1], true, exec);
            dec_in[s] = Some(y);
            dec_cat[s] = Some(cat);
            dec_a[s] = Some(a);
            dec_b[s] = Some(b);
        }
        let unwrap = |v: Vec<Option<Feature<T>>>| v.into_iter().map(|f| f.expect("filled")).collect::<Vec<_>>();
        let dec_b = unwrap(dec_b);
        let mut probs = self.conv(&dec_b[0], &l.head, false, exec);
        layers::softmax(&mut probs);
        Ok(Cache {
            enc_in,
            enc_a,
            enc_b,
            pool_arg,
            dec_in: unwrap(dec_in),
            dec_cat: unwrap(dec_cat),
            dec_a: unwrap(dec_a),
            dec_b,
            probs,
        })
    }

    /// Probabilities only.
    pub fn predict(&self, input: &Feature<T>, exec: Execution) -> Result<Feature<T>> {
        Ok(self.forward(input, exec)?.probs)
    }

    fn conv_back(
        &self,
        x: &Feature<T>,
        dy: &Feature<T>,
        c: &Conv,
        grads: &mut [T],
        need_input: bool,
        exec: Execution,
    ) -> Option<Feature<T>> {
        let (gw, gb) = grads[c.w..c.b + c.shape.cout].split_at_mut(c.shape.weight_len());
        layers::conv_backward_params(x, dy, c.shape, gw, gb, exec);
        need_input.then(|| layers::conv_backward_input(dy, &self.params[c.w..c.w + c.shape.weight_len()], c.shape, exec))
    }

    /// Adds the parameter gradient of a scalar loss to `grads`, given the
    /// loss gradient with respect to the output probabilities.
    pub fn backward(&self, cache: &Cache<T>, dprobs: &Feature<T>, grads: &mut [T], exec: Execution) -> Result<()> {
        if dprobs.dims() != cache.probs.dims() || dprobs.channels() != cache.probs.channels() {
            return Err(Error::Shape("probability gradient does not match the forward pass".into()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer length".into()));
        }
        let l = Layout::new(&self.config);
        let depth = self.config.depth;
        let n = depth - 1;
        let dz = layers::softmax_backward(&cache.probs, dprobs);
        let mut dy = self.conv_back(&cache.dec_b[0], &dz, &l.head, grads, true, exec).expect("input grad");
        let mut dskip: Vec<Option<Feature<T>>> = vec![None; n];
        for s in 0..n {
            layers::relu_backward(&cache.dec_b[s], &mut dy);
            let mut da = self.conv_back(&cache.dec_a[s], &dy, &l.dec[s][1], grads, true, exec).expect("input grad");
            layers::relu_backward(&cache.dec_a[s], &mut da);
            let dcat = self.conv_back(&cache.dec_cat[s], &da, &l.dec[s][0], grads, true, exec).expect("input grad");
            let (ds, du) = layers::split(&dcat, cache.enc_b[s].channels());
            dskip[s] = Some(ds);
            let u = &l.up[s];
            let (gw, gb) = grads[u.w..u.b + u.shape.cout].split_at_mut(u.shape.weight_len());
            dy = layers::upconv_backward(&cache.dec_in[s], &du, &self.params[u.w..u.w + u.shape.weight_len()], u.shape, gw, gb);
        }
        // dy is now the gradient at the bottleneck output
        let mut g = dy;
        for s in (0..depth).rev() {
            if s < n {
                let from_pool = layers::maxpool_backward(&g, &cache.pool_arg[s], cache.enc_b[s].dims());
                let mut sum = dskip[s].take().expect("skip gradient");
                for (a, &b) in sum.data_mut().iter_mut().zip(from_pool.data()) {
                    *a = *a + b;
                }
                g = sum;
            }
            layers::relu_backward(&cache.enc_b[s], &mut g);
            let mut da = self.conv_back(&cache.enc_a[s], &g, &l.enc[s][1], grads, true, exec).expect("input grad");
            layers::relu_backward(&cache.enc_a[s], &mut da);
            match self.conv_back(&cache.enc_in[s], &da, &l.enc[s][0], grads, s > 0, exec) {
                Some(d) => g = d,
                None => break,
            }
        }
        Ok(())
    }
}
