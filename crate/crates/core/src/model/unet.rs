use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::*;
use super::tensor::Tensor;
use super::ModelError;
use crate::dsp::{N_BINS, SEGMENT_FRAMES};
use crate::scalar::Scalar;

/// Architecture hyperparameters. Decoder widths mirror the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub n_instruments: usize,
    pub n_bins: usize,
    pub segment_frames: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub final_bias: f64,
    pub vocab_id: String,
}

impl ModelConfig {
    pub fn new(n_instruments: usize, vocab_id: impl Into<String>) -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            n_instruments,
            n_bins: N_BINS,
            segment_frames: SEGMENT_FRAMES,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            final_bias: -2.0,
            vocab_id: vocab_id.into(),
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Pitch axis after zero-padding to a multiple of `2^levels`.
    pub fn padded_bins(&self) -> usize {
        let m = 1 << self.levels();
        self.n_bins.div_ceil(m) * m
    }

    /// Output width of decoder level `l`.
    pub fn decoder_width(&self, l: usize) -> usize {
        self.widths[l.saturating_sub(1)]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.widths.is_empty() || self.widths.len() > 8 {
            return bad("need between 1 and 8 levels");
        }
        if self.widths.contains(&0) {
            return bad("channel widths must be positive");
        }
        if self.n_instruments == 0 {
            return bad("need at least one output instrument");
        }
        if self.n_bins == 0 || self.segment_frames == 0 || !self.segment_frames.is_multiple_of(1 << self.levels()) {
            return bad("segment length must be a positive multiple of 2^levels");
        }
        if !(self.leaky_slope > 0.0 && self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return bad("slope and epsilon must be positive, momentum in [0,1]");
        }
        Ok(())
    }

    /// `key=value` lines, the serialized form stored in checkpoints.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "widths={}\nn_instruments={}\nn_bins={}\nsegment_frames={}\nleaky_slope={}\nbn_eps={}\nbn_momentum={}\nfinal_bias={}\nvocab_id={}\n",
            widths.join(","),
            self.n_instruments,
            self.n_bins,
            self.segment_frames,
            self.leaky_slope,
            self.bn_eps,
            self.bn_momentum,
            self.final_bias,
            self.vocab_id
        )
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::new(1, "");
        let err = |l: &str| ModelError::Config(format!("bad config line `{l}`"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| err(line))?;
            let num = || v.parse::<f64>().map_err(|_| err(line));
            let int = || v.parse::<usize>().map_err(|_| err(line));
            match k {
                "widths" => cfg.widths = v.split(',').map(|w| w.trim().parse()).collect::<Result<_, _>>().map_err(|_| err(line))?,
                "n_instruments" => cfg.n_instruments = int()?,
                "n_bins" => cfg.n_bins = int()?,
                "segment_frames" => cfg.segment_frames = int()?,
                "leaky_slope" => cfg.leaky_slope = num()?,
                "bn_eps" => cfg.bn_eps = num()?,
                "bn_momentum" => cfg.bn_momentum = num()?,
                "final_bias" => cfg.final_bias = num()?,
                "vocab_id" => cfg.vocab_id = v.to_string(),
                // extra keys (step counters and the like) belong to the caller
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with variance `gain / fan_in`.
    Normal {
        fan_in: usize,
        gain: f64,
    },
    Const(f64),
}

// convs feeding a leaky ReLU get He gain; purely linear paths keep unit gain
fn he(fan_in: usize) -> Init {
    Init::Normal { fan_in, gain: 2.0 }
}

fn linear(fan_in: usize) -> Init {
    Init::Normal { fan_in, gain: 1.0 }
}

fn block_layout(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, cin: usize, cout: usize) {
    out.push((format!("{p}.conv1.w"), vec![cout, cin, 3, 3], he(cin * 9)));
    for bn in ["bn1", "bn2"] {
        out.push((format!("{p}.{bn}.gamma"), vec![cout], Init::Const(1.0)));
        out.push((format!("{p}.{bn}.beta"), vec![cout], Init::Const(0.0)));
        out.push((format!("{p}.{bn}.running_mean"), vec![cout], Init::Const(0.0)));
        out.push((format!("{p}.{bn}.running_var"), vec![cout], Init::Const(1.0)));
    }
    out.push((format!("{p}.conv2.w"), vec![cout, cout, 3, 3], he(cout * 9)));
    // the residual branch starts switched off so depth does not inflate activations
    out.push((format!("{p}.conv3.w"), vec![cout, cout, 3, 3], Init::Const(0.0)));
    out.push((format!("{p}.conv3.b"), vec![cout], Init::Const(0.0)));
    out.push((format!("{p}.skip.w"), vec![cout, cin, 1, 1], linear(cin)));
    out.push((format!("{p}.skip.b"), vec![cout], Init::Const(0.0)));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut cin = 1;
    for (l, &w) in cfg.widths.iter().enumerate() {
        block_layout(&mut out, &format!("enc{l}"), cin, w);
        cin = w;
    }
    for l in (0..cfg.levels()).rev() {
        let prev = if l + 1 == cfg.levels() { cfg.widths[l] } else { cfg.decoder_width(l + 1) };
        let d = cfg.decoder_width(l);
        let skip = if l == 0 { 1 } else { cfg.widths[l - 1] };
        out.push((format!("dec{l}.up.w"), vec![d, prev, 3, 3], linear(prev * 9)));
        out.push((format!("dec{l}.up.b"), vec![d], Init::Const(0.0)));
        block_layout(&mut out, &format!("dec{l}"), d + skip, d);
    }
    let last = cfg.decoder_width(0);
    out.push(("head.w".into(), vec![cfg.n_instruments, last, 1, 1], linear(last)));
    out.push(("head.b".into(), vec![cfg.n_instruments], Init::Const(cfg.final_bias)));
    out
}

/// Whether SGD updates this entry (batch-norm running statistics are not learned).
pub fn is_learnable(name: &str) -> bool {
    !name.contains(".running_")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Named parameter tensors of a [`ModelConfig`] network.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    config: ModelConfig,
    tensors: BTreeMap<String, Param<T>>,
    generation: u64,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

pub type Grads<T> = BTreeMap<String, Vec<T>>;

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights drawn in name order from a seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut spec = layout(&config);
        spec.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in spec {
            let len = shape.iter().product();
            let data = match init {
                Init::Const(v) => vec![T::from_f64_lossy(v); len],
                Init::Normal { fan_in, gain } => {
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
                }
            };
            tensors.insert(name, Param { shape, data });
        }
        Ok(Self { config, tensors, generation: next_generation() })
    }

    /// Assembles params from loaded tensors, checking names and shapes against the config.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Param<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(ModelError::Shape(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        for (name, shape, _) in &expected {
            match tensors.get(name) {
                None => return Err(ModelError::Shape(format!("missing tensor {name}"))),
                Some(p) if &p.shape != shape || p.data.len() != shape.iter().product::<usize>() => {
                    return Err(ModelError::Shape(format!("tensor {name} has shape {:?}, expected {shape:?}", p.shape)))
                }
                Some(p) if !p.data.iter().all(|v| v.is_finite()) => return Err(ModelError::NonFinite(format!("tensor {name}"))),
                _ => {}
            }
        }
        Ok(Self { config, tensors, generation: next_generation() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Param<T>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> &[T] {
        &self.tensors.get(name).unwrap_or_else(|| panic!("no parameter {name}")).data
    }

    /// Mutable access; any cached forward pass becomes stale.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        self.generation = next_generation();
        self.tensors.get_mut(name).map(|p| &mut p.data)
    }

    pub fn n_learnable(&self) -> usize {
        self.tensors.iter().filter(|(k, _)| is_learnable(k)).map(|(_, p)| p.data.len()).sum()
    }

    /// `p <- p - lr * g` on learnable entries. Nothing changes if any gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &Grads<T>, lr: T) -> Result<(), ModelError> {
        for (name, p) in self.tensors.iter().filter(|(k, _)| is_learnable(k)) {
            let g = grads.get(name).ok_or_else(|| ModelError::Shape(format!("no gradient for {name}")))?;
            if g.len() != p.data.len() {
                return Err(ModelError::Shape(format!("gradient {name} has {} entries, expected {}", g.len(), p.data.len())));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(format!("gradient {name}[{i}] = {}", g[i])));
            }
        }
        for (name, p) in self.tensors.iter_mut().filter(|(k, _)| is_learnable(k)) {
            for (w, &d) in p.data.iter_mut().zip(&grads[name]) {
                *w -= lr * d;
            }
        }
        self.generation = next_generation();
        Ok(())
    }

    /// Folds the batch statistics of a training forward pass into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let mom = T::from_f64_lossy(self.config.bn_momentum);
        let keep = T::one() - mom;
        for (prefix, bn) in cache.bn_layers() {
            for (suffix, stat) in [("running_mean", &bn.batch_mean), ("running_var", &bn.batch_var)] {
                let entry = self.tensors.get_mut(&format!("{prefix}.{suffix}")).expect("bn layer exists");
                for (r, &b) in entry.data.iter_mut().zip(stat) {
                    *r = keep * *r + mom * b;
                }
            }
        }
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>), ModelError> {
        let (y, cache) = self.forward(x, true)?;
        Ok((y, cache.expect("train mode caches")))
    }

    /// Pure inference pass using running statistics.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward(x, false)?.0)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let c = &self.config;
        if x.c() != 1 || x.w() != c.n_bins || !x.h().is_multiple_of(1 << c.levels()) || x.h() == 0 || x.n() == 0 {
            return Err(ModelError::Config(format!(
                "input shape {:?} incompatible with {} bins and {} levels",
                x.shape,
                c.n_bins,
                c.levels()
            )));
        }
        if !x.is_finite() {
            return Err(ModelError::NonFinite("input".into()));
        }
        Ok(())
    }

    fn block(&self, x: &Tensor<T>, p: &str, stride: usize, train: bool) -> (Tensor<T>, Option<BlockCache<T>>) {
        let cout = self.get(&format!("{p}.conv3.b")).len();
        let cin = x.c();
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let eps = self.config.bn_eps;
        let s1 = ConvSpec { cin, cout, k: 3, stride, pad: 1 };
        let s2 = ConvSpec { cin: cout, cout, k: 3, stride: 1, pad: 1 };
        let sk = ConvSpec { cin, cout, k: 1, stride, pad: 0 };
        let bn = |h: &Tensor<T>, name: &str| -> (Tensor<T>, Option<BnCache<T>>) {
            let g = self.get(&format!("{p}.{name}.gamma"));
            let b = self.get(&format!("{p}.{name}.beta"));
            if train {
                let (y, c) = batchnorm_forward_train(h, g, b, eps);
                (y, Some(c))
            } else {
                let m = self.get(&format!("{p}.{name}.running_mean"));
                let v = self.get(&format!("{p}.{name}.running_var"));
                (batchnorm_forward_infer(h, g, b, m, v, eps), None)
            }
        };
        let h1 = conv2d_forward(x, self.get(&format!("{p}.conv1.w")), None, &s1);
        let (h1, bn1) = bn(&h1, "bn1");
        let a1 = leaky_relu(&h1, slope);
        drop(h1);
        let h2 = conv2d_forward(&a1, self.get(&format!("{p}.conv2.w")), None, &s2);
        let (h2, bn2) = bn(&h2, "bn2");
        let a2 = leaky_relu(&h2, slope);
        drop(h2);
        let mut out = conv2d_forward(&a2, self.get(&format!("{p}.conv3.w")), Some(self.get(&format!("{p}.conv3.b"))), &s2);
        out.add_assign(&conv2d_forward(x, self.get(&format!("{p}.skip.w")), Some(self.get(&format!("{p}.skip.b"))), &sk));
        let cache = train.then(|| BlockCache {
            prefix: p.to_string(),
            x: x.clone(),
            a1,
            a2,
            bn1: bn1.expect("train"),
            bn2: bn2.expect("train"),
            stride,
        });
        (out, cache)
    }

    fn block_backward(&self, c: &BlockCache<T>, dout: &Tensor<T>, grads: &mut Grads<T>, need_dx: bool) -> Option<Tensor<T>> {
        let p = &c.prefix;
        let cin = c.x.c();
        let cout = dout.c();
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let s1 = ConvSpec { cin, cout, k: 3, stride: c.stride, pad: 1 };
        let s2 = ConvSpec { cin: cout, cout, k: 3, stride: 1, pad: 1 };
        let sk = ConvSpec { cin, cout, k: 1, stride: c.stride, pad: 0 };

        let gs = conv2d_backward(&c.x, self.get(&format!("{p}.skip.w")), dout, &sk, need_dx);
        grads.insert(format!("{p}.skip.w"), gs.dweight);
        grads.insert(format!("{p}.skip.b"), gs.dbias);

        let g3 = conv2d_backward(&c.a2, self.get(&format!("{p}.conv3.w")), dout, &s2, true);
        grads.insert(format!("{p}.conv3.w"), g3.dweight);
        grads.insert(format!("{p}.conv3.b"), g3.dbias);
        // a = lrelu(h) has the sign of h, so the activation output stands in for its input
        let dh2 = leaky_relu_backward(&c.a2, &g3.dx.expect("dx"), slope);
        let (dh2, dg, db) = batchnorm_backward(&dh2, &c.bn2, self.get(&format!("{p}.bn2.gamma")));
        grads.insert(format!("{p}.bn2.gamma"), dg);
        grads.insert(format!("{p}.bn2.beta"), db);

        let g2 = conv2d_backward(&c.a1, self.get(&format!("{p}.conv2.w")), &dh2, &s2, true);
        grads.insert(format!("{p}.conv2.w"), g2.dweight);
        let dh1 = leaky_relu_backward(&c.a1, &g2.dx.expect("dx"), slope);
        let (dh1, dg, db) = batchnorm_backward(&dh1, &c.bn1, self.get(&format!("{p}.bn1.gamma")));
        grads.insert(format!("{p}.bn1.gamma"), dg);
        grads.insert(format!("{p}.bn1.beta"), db);

        let g1 = conv2d_backward(&c.x, self.get(&format!("{p}.conv1.w")), &dh1, &s1, need_dx);
        grads.insert(format!("{p}.conv1.w"), g1.dweight);
        g1.dx.map(|mut dx| {
            dx.add_assign(&gs.dx.expect("dx"));
            dx
        })
    }

    fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Option<ForwardCache<T>>), ModelError> {
        self.check_input(x)?;
        let cfg = &self.config;
        let levels = cfg.levels();
        let x0 = resize_width(x, cfg.padded_bins());
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(levels);
        let mut enc_cache = Vec::new();
        for l in 0..levels {
            let input = if l == 0 { &x0 } else { &enc_out[l - 1] };
            let (y, c) = self.block(input, &format!("enc{l}"), 2, train);
            enc_out.push(y);
            enc_cache.extend(c);
        }
        let mut prev = enc_out[levels - 1].clone();
        let mut dec_cache = Vec::new();
        let mut up_inputs = Vec::new();
        for l in (0..levels).rev() {
            let u = upsample2(&prev);
            let d = cfg.decoder_width(l);
            let spec = ConvSpec { cin: u.c(), cout: d, k: 3, stride: 1, pad: 1 };
            let v = conv2d_forward(&u, self.get(&format!("dec{l}.up.w")), Some(self.get(&format!("dec{l}.up.b"))), &spec);
            let skip = if l == 0 { &x0 } else { &enc_out[l - 1] };
            let cat = concat_channels(&v, skip);
            let (y, c) = self.block(&cat, &format!("dec{l}"), 1, train);
            if train {
                up_inputs.push(u);
                dec_cache.extend(c);
            }
            prev = y;
        }
        let head = ConvSpec { cin: prev.c(), cout: cfg.n_instruments, k: 1, stride: 1, pad: 0 };
        let out = conv2d_forward(&prev, self.get("head.w"), Some(self.get("head.b")), &head);
        let logits = resize_width(&out, cfg.n_bins);
        let cache = train.then(|| ForwardCache {
            generation: self.generation,
            input_shape: x.shape,
            enc: enc_cache,
            dec: dec_cache,
            up_inputs,
            head_input: prev,
        });
        Ok((logits, cache))
    }

    /// Reverse pass. Every learnable entry gets a gradient of its own shape.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Grads<T>, ModelError> {
        if cache.generation != self.generation {
            return Err(ModelError::StaleCache);
        }
        let cfg = &self.config;
        let levels = cfg.levels();
        let expected = [cache.input_shape[0], cfg.n_instruments, cache.input_shape[2], cfg.n_bins];
        if dlogits.shape != expected {
            return Err(ModelError::Shape(format!("logit gradient {:?}, expected {expected:?}", dlogits.shape)));
        }
        let mut grads = Grads::new();
        let dout = resize_width(dlogits, cfg.padded_bins());
        let head = ConvSpec { cin: cache.head_input.c(), cout: cfg.n_instruments, k: 1, stride: 1, pad: 0 };
        let gh = conv2d_backward(&cache.head_input, self.get("head.w"), &dout, &head, true);
        grads.insert("head.w".into(), gh.dweight);
        grads.insert("head.b".into(), gh.dbias);
        let mut dprev = gh.dx.expect("dx");

        let mut denc: Vec<Option<Tensor<T>>> = vec![None; levels];
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };
        // decoder caches were pushed deepest first
        for l in 0..levels {
            let idx = levels - 1 - l;
            let dcat = self.block_backward(&cache.dec[idx], &dprev, &mut grads, true).expect("dx");
            let d = cfg.decoder_width(l);
            let (dv, dskip) = split_channels(&dcat, d);
            if l > 0 {
                accumulate(&mut denc[l - 1], dskip);
            }
            let u = &cache.up_inputs[idx];
            let spec = ConvSpec { cin: u.c(), cout: d, k: 3, stride: 1, pad: 1 };
            let gu = conv2d_backward(u, self.get(&format!("dec{l}.up.w")), &dv, &spec, true);
            grads.insert(format!("dec{l}.up.w"), gu.dweight);
            grads.insert(format!("dec{l}.up.b"), gu.dbias);
            dprev = upsample2_backward(&gu.dx.expect("dx"));
        }
        accumulate(&mut denc[levels - 1], dprev);
        for l in (0..levels).rev() {
            let g = denc[l].take().expect("every encoder level receives gradient");
            if let Some(dx) = self.block_backward(&cache.enc[l], &g, &mut grads, l > 0) {
                accumulate(&mut denc[l - 1], dx);
            }
        }
        Ok(grads)
    }
}

impl<T: Scalar> fmt::Display for ModelParams<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U-net {:?}, {} learnable parameters", self.config.widths, self.n_learnable())
    }
}

pub struct BlockCache<T> {
    prefix: String,
    x: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    bn1: BnCache<T>,
    bn2: BnCache<T>,
    stride: usize,
}

/// Activations saved by a training forward pass, tied to one parameter state.
pub struct ForwardCache<T> {
    generation: u64,
    input_shape: [usize; 4],
    enc: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    up_inputs: Vec<Tensor<T>>,
    head_input: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// `(layer prefix, statistics)` for every batch-norm layer.
    pub fn bn_layers(&self) -> impl Iterator<Item = (String, &BnCache<T>)> {
        self.enc.iter().chain(&self.dec).flat_map(|b| [(format!("{}.bn1", b.prefix), &b.bn1), (format!("{}.bn2", b.prefix), &b.bn2)])
    }
}
