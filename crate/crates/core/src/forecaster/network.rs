//! Encoder-decoder LSTM with a Gaussian head, expressed as a tape.
//!
//! The encoder runs over the history window; its final hidden and cell
//! state seed a decoder LSTM that steps through the horizon on exogenous
//! inputs. Decoder hidden states are stacked (row `t * batch + b`), passed
//! through dropout, a leaky-ReLU fully connected layer, dropout again, and a
//! linear layer emitting `(mu, s)`. Variance is `softplus(s) + floor`.

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::windows::WindowSample;
use crate::autodiff::{Bindings, NodeId, Tape};

pub const PARAM_NAMES: [&str; 10] = [
    "enc_wx", "enc_wh", "enc_b", "dec_wx", "dec_wh", "dec_b", "fc_w", "fc_b", "out_w", "out_b",
];

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetDims {
    pub enc_features: usize,
    pub dec_features: usize,
    pub hidden: usize,
    pub fc_hidden: usize,
    pub history: usize,
    pub horizon: usize,
    pub leaky_alpha: f64,
    pub lstm_dropout: f64,
    pub fc_dropout: f64,
    pub variance_floor: f64,
}

impl NetDims {
    pub fn param_shapes(&self) -> [(usize, usize); 10] {
        let g = 4 * self.hidden;
        [
            (self.enc_features, g),
            (self.hidden, g),
            (1, g),
            (self.dec_features, g),
            (self.hidden, g),
            (1, g),
            (self.hidden, self.fc_hidden),
            (1, self.fc_hidden),
            (self.fc_hidden, 2),
            (1, 2),
        ]
    }
}

/// Network weights in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Array2<f64>>,
}

impl Params {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; LSTM forget-gate
    /// biases start at one.
    pub fn init(dims: &NetDims, rng: &mut impl RngCore) -> Self {
        let h = dims.hidden;
        let shapes = dims.param_shapes();
        let fan_in = [
            dims.enc_features + h,
            dims.enc_features + h,
            dims.enc_features + h,
            dims.dec_features + h,
            dims.dec_features + h,
            dims.dec_features + h,
            h,
            h,
            dims.fc_hidden,
            dims.fc_hidden,
        ];
        let mut tensors = Vec::with_capacity(shapes.len());
        for (k, (&shape, &fan)) in shapes.iter().zip(fan_in.iter()).enumerate() {
            let bound = 1.0 / (fan as f64).sqrt();
            let mut t = Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound));
            if PARAM_NAMES[k].ends_with("_b") && k < 6 {
                t.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
            }
            tensors.push(t);
        }
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.dim()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Dropout masks for one shard; entries are `0` or `1/(1-p)`.
#[derive(Debug, Clone)]
pub struct ShardMasks {
    pub lstm: Array2<f64>,
    pub fc: Array2<f64>,
}

impl ShardMasks {
    pub fn inference(dims: &NetDims, batch: usize) -> Self {
        let rows = dims.horizon * batch;
        Self {
            lstm: Array2::ones((rows, dims.hidden)),
            fc: Array2::ones((rows, dims.fc_hidden)),
        }
    }

    pub fn sample(dims: &NetDims, batch: usize, rng: &mut impl RngCore) -> Self {
        let rows = dims.horizon * batch;
        Self {
            lstm: bernoulli_mask((rows, dims.hidden), dims.lstm_dropout, rng),
            fc: bernoulli_mask((rows, dims.fc_hidden), dims.fc_dropout, rng),
        }
    }
}

fn bernoulli_mask(shape: (usize, usize), p: f64, rng: &mut impl RngCore) -> Array2<f64> {
    if p <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

#[derive(Clone)]
pub struct Network {
    pub tape: Tape,
    pub dims: NetDims,
    params: Vec<NodeId>,
    enc_x: Vec<NodeId>,
    dec_x: Vec<NodeId>,
    h0: NodeId,
    c0: NodeId,
    lstm_mask: NodeId,
    fc_mask: NodeId,
    target: NodeId,
    weight: NodeId,
    pub mu: NodeId,
    pub variance: NodeId,
    pub pre_variance: NodeId,
}

struct Lstm {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    hidden: usize,
}

impl Lstm {
    fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let hs = self.hidden;
        let xw = tape.matmul(x, self.wx);
        let hw = tape.matmul(h, self.wh);
        let z0 = tape.add(xw, hw);
        let z = tape.add(z0, self.b);
        let zi = tape.slice_cols(z, 0, hs);
        let zf = tape.slice_cols(z, hs, 2 * hs);
        let zg = tape.slice_cols(z, 2 * hs, 3 * hs);
        let zo = tape.slice_cols(z, 3 * hs, 4 * hs);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c2 = tape.add(fc, ig);
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc);
        (h2, c2)
    }
}

impl Network {
    pub fn build(dims: NetDims) -> Self {
        let mut tape = Tape::new();
        let params: Vec<NodeId> = PARAM_NAMES.iter().map(|n| tape.parameter(*n)).collect();
        let enc = Lstm {
            wx: params[0],
            wh: params[1],
            b: params[2],
            hidden: dims.hidden,
        };
        let dec = Lstm {
            wx: params[3],
            wh: params[4],
            b: params[5],
            hidden: dims.hidden,
        };
        let h0 = tape.input("h0");
        let c0 = tape.input("c0");
        let enc_x: Vec<NodeId> = (0..dims.history)
            .map(|t| tape.input(format!("enc_x{t}")))
            .collect();
        let dec_x: Vec<NodeId> = (0..dims.horizon)
            .map(|t| tape.input(format!("dec_x{t}")))
            .collect();

        let (mut h, mut c) = (h0, c0);
        for &x in &enc_x {
            (h, c) = enc.step(&mut tape, x, h, c);
        }
        let mut outs = Vec::with_capacity(dims.horizon);
        for &x in &dec_x {
            (h, c) = dec.step(&mut tape, x, h, c);
            outs.push(h);
        }
        let stacked = tape.concat_rows(&outs);
        let lstm_mask = tape.input("lstm_mask");
        let d1 = tape.dropout(stacked, lstm_mask, dims.lstm_dropout);
        let fc_lin = tape.matmul(d1, params[6]);
        let fc_pre = tape.add(fc_lin, params[7]);
        let fc = tape.leaky_relu(fc_pre, dims.leaky_alpha);
        let fc_mask = tape.input("fc_mask");
        let d2 = tape.dropout(fc, fc_mask, dims.fc_dropout);
        let out_lin = tape.matmul(d2, params[8]);
        let out = tape.add(out_lin, params[9]);
        let mu = tape.slice_cols(out, 0, 1);
        let pre_variance = tape.slice_cols(out, 1, 2);
        let sp = tape.softplus(pre_variance);
        let variance = tape.offset(sp, dims.variance_floor);

        // mean Gaussian negative log likelihood, weighted
        let target = tape.input("target");
        let weight = tape.input("weight");
        let resid = tape.sub(target, mu);
        let sq = tape.square(resid);
        let ratio = tape.div(sq, variance);
        let half_ratio = tape.scale(ratio, 0.5);
        let log_var = tape.log(variance);
        let half_log = tape.scale(log_var, 0.5);
        let both = tape.add(half_ratio, half_log);
        let term = tape.offset(both, HALF_LN_2PI);
        let weighted = tape.mul(term, weight);
        let loss = tape.sum(weighted);
        tape.set_loss(loss);

        Self {
            tape,
            dims,
            params,
            enc_x,
            dec_x,
            h0,
            c0,
            lstm_mask,
            fc_mask,
            target,
            weight,
            mu,
            variance,
            pre_variance,
        }
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    /// Binds one shard. Each target element is weighted by
    /// `sample.weight / weight_total` (or `1 / weight_total` when
    /// `use_sample_weights` is off), so shard losses and gradients sum to
    /// the batch's weighted mean.
    pub fn bind<'a>(
        &self,
        params: &'a Params,
        batch: &[&WindowSample],
        masks: ShardMasks,
        use_sample_weights: bool,
        weight_total: f64,
    ) -> Bindings<'a> {
        let d = &self.dims;
        let n = batch.len();
        let mut b = Bindings::new(&self.tape);
        for (node, value) in self.params.iter().zip(&params.tensors) {
            b.bind_ref(*node, value);
        }
        b.bind(self.h0, Array2::zeros((n, d.hidden)));
        b.bind(self.c0, Array2::zeros((n, d.hidden)));
        for (t, &node) in self.enc_x.iter().enumerate() {
            let mut x = Array2::zeros((n, d.enc_features));
            for (r, s) in batch.iter().enumerate() {
                x.row_mut(r).assign(&s.encoder.row(t));
            }
            b.bind(node, x);
        }
        for (t, &node) in self.dec_x.iter().enumerate() {
            let mut x = Array2::zeros((n, d.dec_features));
            for (r, s) in batch.iter().enumerate() {
                x.row_mut(r).assign(&s.decoder.row(t));
            }
            b.bind(node, x);
        }
        let rows = d.horizon * n;
        let mut target = Array2::zeros((rows, 1));
        let mut weight = Array2::zeros((rows, 1));
        for t in 0..d.horizon {
            for (r, s) in batch.iter().enumerate() {
                target[[t * n + r, 0]] = s.target.get(t).copied().unwrap_or(0.0);
                let w = if use_sample_weights { s.weight } else { 1.0 };
                weight[[t * n + r, 0]] = w / weight_total;
            }
        }
        b.bind(self.target, target);
        b.bind(self.weight, weight);
        b.bind(self.lstm_mask, masks.lstm);
        b.bind(self.fc_mask, masks.fc);
        b
    }
}
