use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Bound, Conv2dSpec, ParamStore, RngState, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Three SiLU convolutions (padding `kernel / 2`), a 2×2 average pool, then
/// a hidden fully connected layer and a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub convs: [ConvLayer; 3],
    pub hidden: usize,
    pub resolution: usize,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn new(resolution: usize, classes: usize) -> Self {
        let c = |channels| ConvLayer { channels, kernel: 3, stride: 2 };
        ClassifierConfig { convs: [c(16), c(32), c(64)], hidden: 128, resolution, classes }
    }

    pub fn with_classes(&self, classes: usize) -> Self {
        ClassifierConfig { classes, ..self.clone() }
    }

    /// Spatial size after each convolution.
    fn conv_sizes(&self) -> [usize; 3] {
        let mut s = self.resolution;
        self.convs.map(|l| {
            let p = l.kernel / 2;
            s = if s + 2 * p >= l.kernel { (s + 2 * p - l.kernel) / l.stride + 1 } else { 0 };
            s
        })
    }

    /// Width of the flattened feature vector entering the hidden layer.
    pub fn features(&self) -> usize {
        let s = self.conv_sizes()[2];
        self.convs[2].channels * (s / 2) * (s / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {}", self.classes)));
        }
        if self.hidden == 0 || self.convs.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(Error::Config("classifier layer sizes must be positive".into()));
        }
        let last = self.conv_sizes()[2];
        if last < 2 || !last.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "resolution {} leaves a {last}×{last} map before pooling; need an even size ≥ 2",
                self.resolution
            )));
        }
        Ok(())
    }
}

pub const HEAD: &str = "head";

fn layer_names() -> [&'static str; 5] {
    ["conv1", "conv2", "conv3", "fc1", HEAD]
}

/// Fresh weights. Each layer draws from its own stream of `seed`, so the
/// backbone does not depend on the class count.
pub fn init_classifier<S: Scalar>(cfg: &ClassifierConfig, seed: u64) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut cin = 1;
    for (i, l) in cfg.convs.iter().enumerate() {
        let fan = cin * l.kernel * l.kernel;
        let w = kaiming(&mut layer_rng(seed, i), &[l.channels, cin, l.kernel, l.kernel], fan);
        store.insert(format!("conv{}.w", i + 1), w);
        store.insert(format!("conv{}.b", i + 1), Tensor::zeros(&[l.channels]));
        cin = l.channels;
    }
    store.insert("fc1.w".to_string(), kaiming(&mut layer_rng(seed, 3), &[cfg.features(), cfg.hidden], cfg.features()));
    store.insert("fc1.b".to_string(), Tensor::zeros(&[cfg.hidden]));
    reinit_head(&mut store, cfg, seed);
    Ok(store)
}

/// Replaces the head with freshly drawn weights for `cfg.classes` outputs.
pub fn reinit_head<S: Scalar>(store: &mut ParamStore<S>, cfg: &ClassifierConfig, seed: u64) {
    let fan = cfg.hidden;
    let w = layer_rng(seed, 4).normal_tensor::<S>(&[fan, cfg.classes]).scale(S::from_f64(1.0 / (fan as f64).sqrt()));
    store.insert(format!("{HEAD}.w"), w);
    store.insert(format!("{HEAD}.b"), Tensor::zeros(&[cfg.classes]));
}

fn layer_rng(seed: u64, layer: usize) -> RngState {
    RngState::with_stream(seed, 0xC1A5).derive(layer as u64)
}

// He-normal: SiLU behaves like a rectifier for scaling purposes.
fn kaiming<S: Scalar>(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Tensor<S> {
    rng.normal_tensor::<S>(shape).scale(S::from_f64((2.0 / fan_in as f64).sqrt()))
}

/// True when `name` belongs to the classification head.
pub fn is_head(name: &str) -> bool {
    name.split('.').next() == Some(HEAD)
}

/// Checks that `params` has exactly the tensors `cfg` expects.
pub fn check_params<S: Scalar>(cfg: &ClassifierConfig, params: &ParamStore<S>) -> Result<()> {
    let expect: ParamStore<S> = init_classifier(cfg, 0)?;
    if !expect.same_manifest(params) {
        return Err(Error::Config(format!(
            "classifier weights {:?} do not fit the configured layout {:?}",
            params.manifest(),
            expect.manifest()
        )));
    }
    Ok(())
}

/// Logits `[B, classes]` for `x [B, 1, R, R]` scaled to [-1, 1].
pub fn forward<'t, S: Scalar>(cfg: &ClassifierConfig, b: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
    let mut h = x;
    for (i, l) in cfg.convs.iter().enumerate() {
        let p = layer_names()[i];
        let spec = Conv2dSpec { stride: l.stride, padding: l.kernel / 2 };
        h = h.conv2d(b.get(&format!("{p}.w"))?, Some(b.get(&format!("{p}.b"))?), spec)?.silu()?;
    }
    let h = h.avgpool2x()?;
    let batch = h.shape()[0];
    let h = h.reshape(&[batch, cfg.features()])?;
    let h = h.linear(b.get("fc1.w")?, b.get("fc1.b")?)?.silu()?;
    h.linear(b.get(&format!("{HEAD}.w"))?, b.get(&format!("{HEAD}.b"))?)
}

/// Stacks images into `[B, 1, R, R]`, mapping [0, 1] to [-1, 1].
pub fn batch_tensor<S: Scalar>(cfg: &ClassifierConfig, images: &[&Image]) -> Result<Tensor<S>> {
    let r = cfg.resolution;
    let mut data = Vec::with_capacity(images.len() * r * r);
    for im in images {
        if im.shape() != (r, r) {
            return Err(Error::shape("classifier input", &[r, r], &[im.height(), im.width()]));
        }
        data.extend(im.data().iter().map(|&v| S::from_f64(2.0 * v - 1.0)));
    }
    Tensor::new(vec![images.len(), 1, r, r], data)
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
        .collect()
}

/// Predicted classes, evaluated in chunks of `batch` without gradients.
pub fn predict<S: Scalar>(cfg: &ClassifierConfig, params: &ParamStore<S>, images: &[&Image], batch: usize) -> Result<Vec<usize>> {
    check_params(cfg, params)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let tape = Tape::no_grad();
        let b = params.bind(&tape);
        let x = tape.constant(batch_tensor(cfg, chunk)?);
        out.extend(argmax_rows(&forward(cfg, &b, x)?.value()));
    }
    Ok(out)
}
