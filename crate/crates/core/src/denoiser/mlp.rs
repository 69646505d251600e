//! Small tanh network trained with the standard denoising objective.
//!
//! Input is `[z, time_embedding(t / T), conditioning]`, output is a noise
//! estimate of the latent's size. Hidden layers use tanh, the output layer
//! is linear.
//!
//! Parameter file format (UTF-8 text, one item per line):
//!
//! ```text
//! dualinv-mlp 1
//! shape flat <n>            | shape image <h> <w>
//! cond_dim <k>
//! layer_sizes <n0> <n1> ... <nL>
//! params <count>
//! <param 0>
//! ...
//! ```
//!
//! Parameters are laid out layer by layer, each as a row-major weight matrix
//! (`out x in`) followed by its bias vector. Values are written in Rust's
//! shortest round-trip decimal form, so reading a written file reproduces
//! the parameters bit for bit.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_inputs, Conditioning, Denoiser};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{Latent, Shape};
use crate::schedule::NoiseSchedule;

/// Sinusoidal embedding of `t / T`: 8 frequencies, sine and cosine each.
pub const TIME_EMBED_DIM: usize = 16;
const FORMAT_HEADER: &str = "dualinv-mlp 1";

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    shape: Shape,
    cond_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Initial rate; annealed to zero over the epochs on a cosine curve.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability of replacing the conditioning with null, so guidance has
    /// an unconditional branch to use.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            epochs: 100,
            learning_rate: 0.05,
            batch_size: 16,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: MlpDenoiser,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

pub(crate) fn time_embedding(t: usize, steps: usize) -> [f64; TIME_EMBED_DIM] {
    let tau = t as f64 / steps as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let w = (k + 1) as f64 * std::f64::consts::FRAC_PI_2;
        out[2 * k] = (w * tau).sin();
        out[2 * k + 1] = (w * tau).cos();
    }
    out
}

fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

impl MlpDenoiser {
    /// Scaled-normal initialisation (`1 / sqrt(fan_in)`), zero biases.
    pub fn init(shape: Shape, hidden: &[usize], cond_dim: usize, seed: u64) -> Result<Self> {
        let mut layer_sizes = vec![shape.len() + TIME_EMBED_DIM + cond_dim];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(shape.len());
        if layer_sizes.contains(&0) {
            return Err(Error::param("layer_sizes", "every layer needs a unit"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&layer_sizes));
        for w in layer_sizes.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(scale * rng.sample::<f64, _>(StandardNormal));
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self::from_parts(layer_sizes, params, shape, cond_dim)
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        params: Vec<f64>,
        shape: Shape,
        cond_dim: usize,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::param(
                "layer_sizes",
                "need at least input and output",
            ));
        }
        if layer_sizes[0] != shape.len() + TIME_EMBED_DIM + cond_dim {
            return Err(Error::param(
                "layer_sizes",
                "input width must be latent + time embedding + conditioning",
            ));
        }
        if *layer_sizes.last().unwrap() != shape.len() {
            return Err(Error::param(
                "layer_sizes",
                "output width must equal latent size",
            ));
        }
        if params.len() != param_count(&layer_sizes) {
            return Err(Error::param(
                "params",
                format!(
                    "{} values for layers needing {}",
                    params.len(),
                    param_count(&layer_sizes)
                ),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("params", "parameters must be finite"));
        }
        Ok(Self {
            layer_sizes,
            params,
            shape,
            cond_dim,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn encode_conditioning(&self, c: &Conditioning) -> Result<Vec<f64>> {
        match c {
            Conditioning::Null => Ok(vec![0.0; self.cond_dim]),
            Conditioning::Label(k) if *k < self.cond_dim => {
                let mut v = vec![0.0; self.cond_dim];
                v[*k] = 1.0;
                Ok(v)
            }
            Conditioning::Embedding(v) if v.len() == self.cond_dim => Ok(v.clone()),
            other => Err(Error::contract(format!(
                "mlp with {} conditioning inputs cannot take {other}",
                self.cond_dim
            ))),
        }
    }

    fn context(&self, t: usize, steps: usize, c: &Conditioning) -> Result<Vec<f64>> {
        let mut ctx = time_embedding(t, steps).to_vec();
        ctx.extend(self.encode_conditioning(c)?);
        Ok(ctx)
    }

    /// Plain forward pass without recording.
    fn forward(&self, params: &[f64], input: Vec<f64>) -> Vec<f64> {
        let mut h = input;
        let mut offset = 0;
        let layers = self.layer_sizes.len() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(bias)
                .map(|(row, b)| row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + b)
                .collect();
            if l + 1 < layers {
                next.iter_mut().for_each(|x| *x = x.tanh());
            }
            h = next;
        }
        h
    }

    /// Forward pass recorded on `tape`; `params` and `input` may be leaves
    /// or constants.
    fn forward_tape(&self, tape: &mut Tape, params: Var, input: Var) -> Var {
        let mut h = input;
        let mut offset = 0;
        let layers = self.layer_sizes.len() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = tape.slice(params, offset, n_in * n_out);
            let bias = tape.slice(params, offset + n_in * n_out, n_out);
            offset += n_in * n_out + n_out;
            let pre = tape.matvec(weights, h, n_out, n_in);
            let pre = tape.add(pre, bias);
            h = if l + 1 < layers { tape.tanh(pre) } else { pre };
        }
        h
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.shape() != self.shape {
            return Err(Error::Shape {
                expected: self.shape.to_string(),
                found: z.shape().to_string(),
            });
        }
        Ok(())
    }

    /// Trains a freshly initialised network (seeded by `config.seed`) on
    /// `(z_0, c)` pairs with minibatch SGD on the noise-prediction MSE.
    pub fn train(
        dataset: &[(Latent, Conditioning)],
        schedule: &NoiseSchedule,
        config: &TrainingConfig,
    ) -> Result<TrainingOutcome> {
        let Some((first, _)) = dataset.first() else {
            return Err(Error::param("dataset", "training set is empty"));
        };
        let shape = first.shape();
        if dataset.iter().any(|(z, _)| z.shape() != shape) {
            return Err(Error::param("dataset", "inconsistent latent shapes"));
        }
        if !(config.learning_rate > 0.0) || config.batch_size == 0 {
            return Err(Error::param(
                "learning_rate",
                "needs positive rate and batch size",
            ));
        }
        let cond_dim = dataset
            .iter()
            .map(|(_, c)| match c {
                Conditioning::Label(k) => k + 1,
                Conditioning::Embedding(v) => v.len(),
                Conditioning::Null => 0,
            })
            .max()
            .unwrap_or(0);
        let mut model = Self::init(shape, &config.hidden, cond_dim, config.seed)?;
        for (_, c) in dataset {
            model.encode_conditioning(c)?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut loss_trace = Vec::with_capacity(config.epochs);
        let steps = schedule.steps();
        let dim = shape.len();

        for epoch in 0..config.epochs {
            let rate = config.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos());
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                let mut grad = vec![0.0; model.params.len()];
                for &i in batch {
                    let (z0, c) = &dataset[i];
                    let t = rng.random_range(1..=steps);
                    let a = schedule.alpha_bar(t);
                    let noise: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let c = if rng.random::<f64>() < config.cond_dropout {
                        Conditioning::Null
                    } else {
                        c.clone()
                    };
                    let mut input: Vec<f64> = z0
                        .as_slice()
                        .iter()
                        .zip(&noise)
                        .map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e)
                        .collect();
                    input.extend(model.context(t, steps, &c)?);

                    let mut tape = Tape::new();
                    let p = tape.leaf(model.params.clone());
                    let x = tape.constant(input);
                    let out = model.forward_tape(&mut tape, p, x);
                    let target = tape.constant(noise);
                    let diff = tape.sub(out, target);
                    let sq = tape.sum_squares(diff);
                    let loss = tape.scale(sq, 1.0 / dim as f64);
                    let value = tape.scalar(loss);
                    if !value.is_finite() {
                        return Err(Error::Training { epoch, loss: value });
                    }
                    epoch_loss += value;
                    let g = tape
                        .grad(loss)
                        .map_err(|_| Error::Training { epoch, loss: value })?;
                    for (acc, gi) in grad.iter_mut().zip(g.get(p)) {
                        *acc += gi;
                    }
                }
                let step = rate / batch.len() as f64;
                for (w, g) in model.params.iter_mut().zip(&grad) {
                    *w -= step * g;
                }
            }
            let mean = epoch_loss / dataset.len() as f64;
            if !mean.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Training { epoch, loss: mean });
            }
            loss_trace.push(mean);
        }
        Ok(TrainingOutcome { model, loss_trace })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FORMAT_HEADER}")?;
        match self.shape {
            Shape::Flat(n) => writeln!(w, "shape flat {n}")?,
            Shape::Image { height, width } => writeln!(w, "shape image {height} {width}")?,
        }
        writeln!(w, "cond_dim {}", self.cond_dim)?;
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "layer_sizes {}", sizes.join(" "))?;
        writeln!(w, "params {}", self.params.len())?;
        for p in &self.params {
            writeln!(w, "{p:?}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            match lines.next() {
                Some(line) => Ok(line?.trim().to_string()),
                None => Err(Error::Format(format!("missing {what}"))),
            }
        };
        let header = next("header")?;
        if header != FORMAT_HEADER {
            return Err(Error::Format(format!("unknown header `{header}`")));
        }
        let shape_line = next("shape")?;
        let fields: Vec<&str> = shape_line.split_whitespace().collect();
        let shape = match fields.as_slice() {
            ["shape", "flat", n] => Shape::Flat(parse_usize(n)?),
            ["shape", "image", h, w] => Shape::Image {
                height: parse_usize(h)?,
                width: parse_usize(w)?,
            },
            _ => return Err(Error::Format(format!("bad shape line `{shape_line}`"))),
        };
        let cond_dim = keyed(&next("cond_dim")?, "cond_dim")?
            .first()
            .copied()
            .ok_or_else(|| Error::Format("cond_dim needs a value".into()))?;
        let layer_sizes = keyed(&next("layer_sizes")?, "layer_sizes")?;
        let count = keyed(&next("params")?, "params")?
            .first()
            .copied()
            .ok_or_else(|| Error::Format("params needs a count".into()))?;
        let mut params = Vec::with_capacity(count);
        for i in 0..count {
            let line = next("parameter value")?;
            params.push(
                line.parse::<f64>()
                    .map_err(|_| Error::Format(format!("parameter {i}: `{line}`")))?,
            );
        }
        Self::from_parts(layer_sizes, params, shape, cond_dim)
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("expected an integer, got `{s}`")))
}

fn keyed(line: &str, key: &str) -> Result<Vec<usize>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(Error::Format(format!(
            "expected `{key}` line, got `{line}`"
        )));
    }
    it.map(parse_usize).collect()
}

impl Denoiser for MlpDenoiser {
    fn name(&self) -> &str {
        "mlp"
    }

    fn supports(&self, c: &Conditioning) -> bool {
        self.encode_conditioning(c).is_ok()
    }

    fn predict(
        &self,
        z: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        c: &Conditioning,
    ) -> Result<Latent> {
        check_inputs(self, z, t, schedule, c)?;
        self.check_latent(z)?;
        let mut input = z.as_slice().to_vec();
        input.extend(self.context(t, schedule.steps(), c)?);
        z.with_values(self.forward(&self.params, input))
    }

    fn predict_vjp(
        &self,
        z: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        c: &Conditioning,
        u: &Latent,
    ) -> Result<Latent> {
        check_inputs(self, z, t, schedule, c)?;
        self.check_latent(z)?;
        z.check_same_shape(u)?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.as_slice().to_vec());
        let ctx = tape.constant(self.context(t, schedule.steps(), c)?);
        let input = tape.concat(zv, ctx);
        let p = tape.constant(self.params.clone());
        let out = self.forward_tape(&mut tape, p, input);
        let uv = tape.constant(u.as_slice().to_vec());
        let proj = tape.dot(uv, out);
        let g = tape.grad(proj)?;
        z.with_values(g.get(zv).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{finite_difference_vjp, GaussianMixture};

    fn random_net(seed: u64) -> MlpDenoiser {
        MlpDenoiser::init(Shape::Flat(3), &[7, 5], 2, seed).unwrap()
    }

    #[test]
    fn parameter_count_matches_layers() {
        let net = random_net(0);
        assert_eq!(net.layer_sizes(), &[3 + 16 + 2, 7, 5, 3]);
        assert_eq!(net.params().len(), 21 * 7 + 7 + 7 * 5 + 5 + 5 * 3 + 3);
        assert!(MlpDenoiser::from_parts(vec![21, 3], vec![0.0; 5], Shape::Flat(3), 2).is_err());
        assert!(MlpDenoiser::from_parts(vec![20, 3], vec![0.0; 63], Shape::Flat(3), 2).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = random_net(4);
        let s = NoiseSchedule::default_linear();
        let z = Latent::flat(vec![0.4, -1.0, 2.0]).unwrap();
        let plain = net.predict(&z, 12, &s, &Conditioning::Label(1)).unwrap();
        let mut tape = Tape::new();
        let mut input = z.as_slice().to_vec();
        input.extend(net.context(12, 50, &Conditioning::Label(1)).unwrap());
        let x = tape.constant(input);
        let p = tape.constant(net.params().to_vec());
        let out = net.forward_tape(&mut tape, p, x);
        assert_eq!(tape.value(out), plain.as_slice());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let net = random_net(seed);
            let z = Latent::flat((0..3).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let u = Latent::flat((0..3).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let t = rng.random_range(0..=50);
            let c = Conditioning::Embedding(vec![0.3, -0.2]);
            let exact = net.predict_vjp(&z, t, &s, &c, &u).unwrap();
            let fd = finite_difference_vjp(&net, &z, t, &s, &c, &u).unwrap();
            for (a, b) in exact.as_slice().iter().zip(fd.as_slice()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                assert!(rel <= 1e-4, "{a} vs {b}");
            }
            let zero = Latent::flat(vec![0.0; 3]).unwrap();
            let v = net.predict_vjp(&z, t, &s, &c, &zero).unwrap();
            assert!(v.as_slice().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn conditioning_support() {
        let net = random_net(1);
        assert!(net.supports(&Conditioning::Null));
        assert!(net.supports(&Conditioning::Label(1)));
        assert!(!net.supports(&Conditioning::Label(2)));
        assert!(!net.supports(&Conditioning::Embedding(vec![1.0])));
    }

    #[test]
    fn parameter_file_round_trip() {
        let net = MlpDenoiser::init(
            Shape::Image {
                height: 2,
                width: 2,
            },
            &[6],
            3,
            77,
        )
        .unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("dualinv-mlp 1\nshape image 2 2\ncond_dim 3\n"));
        let back = MlpDenoiser::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, net);

        let truncated = &text[..text.len() / 2];
        assert!(MlpDenoiser::read_from(truncated.as_bytes()).is_err());
        let wrong = text.replacen("dualinv-mlp 1", "dualinv-mlp 9", 1);
        assert!(matches!(
            MlpDenoiser::read_from(wrong.as_bytes()),
            Err(Error::Format(_))
        ));
    }

    fn single_gaussian_data(n: usize, seed: u64) -> Vec<(Latent, Conditioning)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                (Latent::flat(z).unwrap(), Conditioning::Label(0))
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let data = single_gaussian_data(8, 0);
        let cfg = TrainingConfig {
            epochs: 0,
            hidden: vec![4],
            seed: 21,
            ..TrainingConfig::default()
        };
        let out = MlpDenoiser::train(&data, &NoiseSchedule::default_linear(), &cfg).unwrap();
        let init = MlpDenoiser::init(Shape::Flat(2), &[4], 1, 21).unwrap();
        assert_eq!(out.model, init);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = single_gaussian_data(32, 1);
        let cfg = TrainingConfig {
            epochs: 3,
            hidden: vec![8],
            seed: 5,
            ..TrainingConfig::default()
        };
        let s = NoiseSchedule::default_linear();
        let a = MlpDenoiser::train(&data, &s, &cfg).unwrap();
        let b = MlpDenoiser::train(&data, &s, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn divergent_training_reports_epoch() {
        let data = single_gaussian_data(16, 2);
        let cfg = TrainingConfig {
            epochs: 50,
            hidden: vec![8],
            learning_rate: 1e6,
            ..TrainingConfig::default()
        };
        let err = MlpDenoiser::train(&data, &NoiseSchedule::default_linear(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
        assert!(MlpDenoiser::train(&[], &NoiseSchedule::default_linear(), &cfg).is_err());
    }

    #[test]
    fn trained_network_approaches_analytic_predictor() {
        let s = NoiseSchedule::default_linear();
        let data = single_gaussian_data(16384, 3);
        let cfg = TrainingConfig {
            hidden: vec![16],
            epochs: 80,
            learning_rate: 0.05,
            batch_size: 16,
            cond_dropout: 0.0,
            seed: 8,
        };
        let out = MlpDenoiser::train(&data, &s, &cfg).unwrap();
        assert!(out.loss_trace.last().unwrap() < &out.loss_trace[0]);

        let oracle = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut err, mut scale) = (0.0, 0.0);
        for _ in 0..2000 {
            let t = rng.random_range(1..=50);
            let a = s.alpha_bar(t);
            let zt: Vec<f64> = (0..2)
                .map(|_| {
                    let x: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    a.sqrt() * x + (1.0 - a).sqrt() * e
                })
                .collect();
            let z = Latent::flat(zt).unwrap();
            let want = oracle.predict(&z, t, &s, &Conditioning::Null).unwrap();
            let got = out
                .model
                .predict(&z, t, &s, &Conditioning::Label(0))
                .unwrap();
            for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
                err += (g - w).powi(2);
                scale += w * w;
            }
        }
        let rel = (err / scale).sqrt();
        assert!(rel < 0.10, "relative error {rel}");
    }
}
