//! Classifier families, training-state plumbing, and posterior queries.
//!
//! A classifier snapshot used for inference always carries the EMA parameter
//! copy; every attack and evaluation below queries models through the
//! [`PosteriorSource`] trait so defended and plain models are
//! interchangeable.

pub mod checkpoint;
pub mod loss;
pub mod net;
pub mod optim;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelFamily;
use crate::data::Image;
use crate::error::{config_err, Error, Result};
use crate::rng::StreamSeed;

pub use net::{Dims, Net, Node, ParamEntry, Scalar, Tape};

/// Architecture description of a classifier under audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub family: ModelFamily,
    /// Channel width multiplier; {1,2,4,8} for the wide residual family.
    pub widen_factor: usize,
    pub class_count: usize,
}

impl ClassifierSpec {
    pub fn build(&self, input: Dims) -> Result<Net> {
        if self.class_count < 2 {
            return config_err("classifier needs at least two classes");
        }
        if self.widen_factor == 0 {
            return config_err("widen_factor must be positive");
        }
        match self.family {
            ModelFamily::Tinycnn => self.build_tinycnn(input),
            ModelFamily::Wrn28 => self.build_wrn28(input),
        }
    }

    /// Four-weight-layer CNN for desk-scale runs: three conv/pool stages and
    /// one dense readout.
    fn build_tinycnn(&self, input: Dims) -> Result<Net> {
        if input.h % 8 != 0 || input.w % 8 != 0 || input.h < 8 || input.w < 8 {
            return Err(Error::Shape(format!(
                "tinycnn input sides must be multiples of 8, got {}x{}",
                input.h, input.w
            )));
        }
        let w = self.widen_factor;
        let (c1, c2, c3) = (8 * w, 16 * w, 32 * w);
        let flat = c3 * (input.h / 8) * (input.w / 8);
        Net::new(
            input,
            vec![
                Node::Conv { in_c: input.c, out_c: c1, k: 3, stride: 1, pad: 1 },
                Node::Relu,
                Node::MaxPool2,
                Node::Conv { in_c: c1, out_c: c2, k: 3, stride: 1, pad: 1 },
                Node::Relu,
                Node::MaxPool2,
                Node::Conv { in_c: c2, out_c: c3, k: 3, stride: 1, pad: 1 },
                Node::Relu,
                Node::MaxPool2,
                Node::Dense { input: flat, output: self.class_count },
            ],
        )
    }

    /// Depth-28 wide residual network: initial conv, three groups of four
    /// pre-activation blocks at widths 16w/32w/64w, global pooling, dense.
    fn build_wrn28(&self, input: Dims) -> Result<Net> {
        if ![1, 2, 4, 8].contains(&self.widen_factor) {
            return config_err(format!(
                "wrn28 widen_factor must be one of 1, 2, 4, 8, got {}",
                self.widen_factor
            ));
        }
        let w = self.widen_factor;
        let widths = [16, 16 * w, 32 * w, 64 * w];
        let mut nodes = vec![Node::Conv { in_c: input.c, out_c: widths[0], k: 3, stride: 1, pad: 1 }];
        for group in 0..3 {
            let in_c = widths[group];
            let out_c = widths[group + 1];
            let stride = if group == 0 { 1 } else { 2 };
            nodes.push(residual_block(in_c, out_c, stride));
            for _ in 1..4 {
                nodes.push(residual_block(out_c, out_c, 1));
            }
        }
        let top = widths[3];
        nodes.push(Node::ChannelNorm { channels: top });
        nodes.push(Node::Relu);
        nodes.push(Node::GlobalAvgPool);
        nodes.push(Node::Dense { input: top, output: self.class_count });
        Net::new(input, nodes)
    }
}

fn residual_block(in_c: usize, out_c: usize, stride: usize) -> Node {
    let main = vec![
        Node::ChannelNorm { channels: in_c },
        Node::Relu,
        Node::Conv { in_c, out_c, k: 3, stride, pad: 1 },
        Node::ChannelNorm { channels: out_c },
        Node::Relu,
        Node::Conv { in_c: out_c, out_c, k: 3, stride: 1, pad: 1 },
    ];
    let shortcut = if in_c != out_c || stride != 1 {
        vec![Node::Conv { in_c, out_c, k: 1, stride, pad: 0 }]
    } else {
        vec![]
    };
    Node::Residual { main, shortcut }
}

/// Membership classifier head: fixed 64/32/2 fully-connected stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackMlpSpec {
    pub input_dim: usize,
}

impl AttackMlpSpec {
    pub fn build(&self) -> Result<Net> {
        if self.input_dim == 0 {
            return config_err("attack feature dimension must be positive");
        }
        Net::new(
            Dims::new(self.input_dim, 1, 1),
            vec![
                Node::Dense { input: self.input_dim, output: 64 },
                Node::Relu,
                Node::Dense { input: 64, output: 32 },
                Node::Relu,
                Node::Dense { input: 32, output: 2 },
            ],
        )
    }
}

/// Cosine decay: lr(k) = lr0 * cos(pi*k / (2*N)), reaching zero at k = N.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return config_err(format!("step {step} exceeds schedule length {total_steps}"));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (std::f64::consts::PI * step as f64 / (2.0 * total_steps as f64)).cos())
}

/// In-place exponential moving average update of the shadow weights.
pub fn ema_update(ema: &mut [f32], theta: &[f32], momentum: f64) -> Result<()> {
    if ema.len() != theta.len() {
        return Err(Error::Shape(format!(
            "ema holds {} values, parameters hold {}",
            ema.len(),
            theta.len()
        )));
    }
    let m = momentum as f32;
    let one_m = 1.0 - m;
    for (e, &t) in ema.iter_mut().zip(theta) {
        *e = m * *e + one_m * t;
    }
    Ok(())
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorVector {
    pub probs: Vec<f64>,
}

impl PosteriorVector {
    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for &p in &self.probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Numeric(format!("posterior entry {p} invalid")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Numeric(format!("posterior sums to {sum}")));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        // ties resolve to the lowest class index
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Numerically stable softmax of f32 logits, carried out in f64.
pub fn softmax(logits: &[f32]) -> PosteriorVector {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    PosteriorVector { probs: exps.iter().map(|e| e / z).collect() }
}

/// Anything that answers posterior queries for images: a plain model
/// snapshot, or a defense wrapped around one.
pub trait PosteriorSource: Sync {
    fn class_count(&self) -> usize;
    fn predict(&self, images: &[Image]) -> Result<Vec<PosteriorVector>>;
}

/// Frozen parameter snapshot used for inference.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    net: Net,
    theta: Vec<f32>,
    class_count: usize,
}

impl ModelSnapshot {
    pub fn new(net: Net, theta: Vec<f32>, class_count: usize) -> Result<Self> {
        if theta.len() != net.param_count() {
            return Err(Error::Shape(format!(
                "snapshot holds {} parameters, net wants {}",
                theta.len(),
                net.param_count()
            )));
        }
        Ok(ModelSnapshot { net, theta, class_count })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn logits(&self, image: &Image) -> Vec<f32> {
        let mut tape = Tape::disabled();
        self.net.forward(&self.theta, &image.data, &mut tape)
    }
}

impl PosteriorSource for ModelSnapshot {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict(&self, images: &[Image]) -> Result<Vec<PosteriorVector>> {
        // One slot per image: parallelism cannot reorder results.
        if images.len() >= 32 {
            Ok(images.par_iter().map(|img| softmax(&self.logits(img))).collect())
        } else {
            Ok(images.iter().map(|img| softmax(&self.logits(img))).collect())
        }
    }
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub spec: ClassifierSpec,
    pub input: Dims,
    pub step: usize,
    pub total_steps: usize,
    pub theta: Vec<f32>,
    pub theta_ema: Vec<f32>,
    pub velocity: Vec<f32>,
    /// Root experiment seed; together with `stream_name` and the step
    /// counter it reproduces every remaining draw, so it is the whole of the
    /// persisted rng state.
    pub seed: u64,
    pub stream_name: String,
    /// Per-pool confident-class markers for threshold curricula (-1 = never
    /// confident); empty for other methods.
    pub flex_status: Vec<i64>,
}

impl TrainState {
    pub fn init(
        spec: ClassifierSpec,
        input: Dims,
        total_steps: usize,
        seed: u64,
        stream_name: &str,
        init_stream: &StreamSeed,
    ) -> Result<Self> {
        let net = spec.build(input)?;
        let theta: Vec<f32> = net.init(&mut init_stream.rng(&[0]));
        let theta_ema = theta.clone();
        let velocity = vec![0.0; theta.len()];
        Ok(TrainState {
            spec,
            input,
            step: 0,
            total_steps,
            theta,
            theta_ema,
            velocity,
            seed,
            stream_name: stream_name.to_string(),
            flex_status: Vec::new(),
        })
    }

    pub fn net(&self) -> Result<Net> {
        self.spec.build(self.input)
    }

    /// Inference snapshot over the EMA parameters; attacks and evaluation
    /// always query this copy.
    pub fn ema_snapshot(&self) -> Result<ModelSnapshot> {
        ModelSnapshot::new(self.net()?, self.theta_ema.clone(), self.spec.class_count)
    }

    /// Snapshot over the raw parameters (pseudo-labeling queries).
    pub fn raw_snapshot(&self) -> Result<ModelSnapshot> {
        ModelSnapshot::new(self.net()?, self.theta.clone(), self.spec.class_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn cosine_schedule_hits_pinned_points() {
        let n = 1000;
        assert!((cosine_lr(0, n, 0.03).unwrap() - 0.03).abs() < 1e-12);
        assert!(cosine_lr(n, n, 0.03).unwrap().abs() < 1e-12);
        let mid = cosine_lr(n / 2, n, 0.03).unwrap();
        assert!((mid - 0.03 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((mid - 0.0212132).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_is_nonincreasing() {
        let n = 357;
        let mut last = f64::INFINITY;
        for k in 0..=n {
            let lr = cosine_lr(k, n, 0.5).unwrap();
            assert!(lr <= last + 1e-12);
            assert!(lr >= 0.0);
            last = lr;
        }
    }

    #[test]
    fn cosine_schedule_rejects_overrun() {
        assert!(cosine_lr(11, 10, 0.1).is_err());
    }

    #[test]
    fn ema_identity_and_freeze_cases() {
        let theta = vec![1.0f32, -2.0, 3.0];
        let mut ema = vec![0.5f32, 0.5, 0.5];
        ema_update(&mut ema, &theta, 0.0).unwrap();
        assert_eq!(ema, theta); // momentum 0 copies

        let mut ema = theta.clone();
        ema_update(&mut ema, &theta, 0.7).unwrap();
        assert_eq!(ema, theta); // fixed point when equal
    }

    #[test]
    fn ema_thousand_updates_match_geometric_series() {
        let theta = vec![1.0f32];
        let mut ema = vec![0.0f32];
        for _ in 0..1000 {
            ema_update(&mut ema, &theta, 0.999).unwrap();
        }
        let expect = 1.0 - 0.999f64.powi(1000);
        assert!((ema[0] as f64 - expect).abs() < 1e-4, "{} vs {expect}", ema[0]);
        assert!((ema[0] as f64 - 0.6323).abs() < 1e-3);
    }

    #[test]
    fn ema_rejects_length_mismatch() {
        let mut ema = vec![0.0f32; 2];
        assert!(ema_update(&mut ema, &[1.0], 0.9).is_err());
    }

    #[test]
    fn zeroed_readout_gives_uniform_posteriors() {
        let spec = ClassifierSpec {
            family: ModelFamily::Tinycnn,
            widen_factor: 1,
            class_count: 4,
        };
        let input = Dims::new(3, 32, 32);
        let net = spec.build(input).unwrap();
        let mut theta: Vec<f32> = net.init(&mut stream(0, "init").rng(&[0]));
        let layout = net.param_layout();
        for e in layout.iter().filter(|e| e.name.contains("dense")) {
            for v in &mut theta[e.offset..e.offset + e.len] {
                *v = 0.0;
            }
        }
        let snap = ModelSnapshot::new(net, theta, 4).unwrap();
        let img = Image::filled(3, 32, 32, 0.3);
        let p = &snap.predict(std::slice::from_ref(&img)).unwrap()[0];
        p.validate().unwrap();
        for &q in &p.probs {
            assert!((q - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_queries_get_identical_posteriors() {
        let spec = ClassifierSpec {
            family: ModelFamily::Tinycnn,
            widen_factor: 1,
            class_count: 3,
        };
        let input = Dims::new(3, 8, 8);
        let net = spec.build(input).unwrap();
        let theta: Vec<f32> = net.init(&mut stream(1, "init").rng(&[0]));
        let snap = ModelSnapshot::new(net, theta, 3).unwrap();
        let img = Image::filled(3, 8, 8, 0.6);
        let out = snap.predict(&[img.clone(), img]).unwrap();
        assert_eq!(out[0], out[1]);
        out[0].validate().unwrap();
    }

    #[test]
    fn wrn28_builds_with_supported_widths() {
        for w in [1usize, 2] {
            let spec = ClassifierSpec {
                family: ModelFamily::Wrn28,
                widen_factor: w,
                class_count: 10,
            };
            let net = spec.build(Dims::new(3, 32, 32)).unwrap();
            assert_eq!(net.out_dims().unwrap(), Dims::new(10, 1, 1));
        }
        let bad = ClassifierSpec {
            family: ModelFamily::Wrn28,
            widen_factor: 3,
            class_count: 10,
        };
        assert!(bad.build(Dims::new(3, 32, 32)).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = PosteriorVector { probs: vec![0.4, 0.4, 0.2] };
        assert_eq!(p.argmax(), 0);
    }
}
