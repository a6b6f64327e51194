use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng::{derive_seed, rng_from_seed, SplitMix64};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub ff_hidden_mult: usize,
    pub mask_ratio: f64,
    /// Token count `L = 4F`; filled in from the schema when zero.
    pub seq_len: usize,
    pub dropout_rate: f64,
    /// Also hide a value's time cell whenever the value is masked.
    pub mask_times: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_layers_enc: 8,
            n_layers_dec: 8,
            n_heads: 8,
            ff_hidden_mult: 4,
            mask_ratio: 0.25,
            seq_len: 0,
            dropout_rate: 0.0,
            mask_times: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.seq_len == 0 || self.seq_len % 4 != 0 {
            return Err(Error::Config(format!("seq_len {} must be a positive multiple of 4", self.seq_len)));
        }
        if self.ff_hidden_mult == 0 {
            return Err(Error::Config("ff_hidden_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.embed_dim * self.ff_hidden_mult
    }
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w_ff1: Matrix,
    pub b_ff1: Matrix,
    pub w_ff2: Matrix,
    pub b_ff2: Matrix,
}

impl BlockParams {
    fn init(d: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            ln1_gamma: Matrix::filled(1, d, 1.0),
            ln1_beta: Matrix::zeros(1, d),
            w_q: xavier(d, d, rng),
            b_q: Matrix::zeros(1, d),
            w_k: xavier(d, d, rng),
            b_k: Matrix::zeros(1, d),
            w_v: xavier(d, d, rng),
            b_v: Matrix::zeros(1, d),
            w_o: xavier(d, d, rng),
            b_o: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, 1.0),
            ln2_beta: Matrix::zeros(1, d),
            w_ff1: xavier(d, hidden, rng),
            b_ff1: Matrix::zeros(1, hidden),
            w_ff2: xavier(hidden, d, rng),
            b_ff2: Matrix::zeros(1, d),
        }
    }

    const NAMES: [&'static str; 16] = [
        "ln1_gamma", "ln1_beta", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln2_gamma", "ln2_beta",
        "w_ff1", "b_ff1", "w_ff2", "b_ff2",
    ];

    fn tensors(&self) -> [&Matrix; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// Every learnable array of the model. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Per-slot embedding scale, `L × d`: a present cell embeds as
    /// `value · value_weight[s] + value_bias[s]`.
    pub value_weight: Matrix,
    pub value_bias: Matrix,
    /// Learned positional encodings, one row per slot.
    pub pos: Matrix,
    /// Learnable token placed at masked positions.
    pub mask_token: Matrix,
    pub encoder: Vec<BlockParams>,
    pub enc_norm_gamma: Matrix,
    pub enc_norm_beta: Matrix,
    pub decoder: Vec<BlockParams>,
    pub dec_norm_gamma: Matrix,
    pub dec_norm_beta: Matrix,
    /// Per-slot output head, `L × d` weights and `1 × L` biases.
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (l, d, hidden) = (cfg.seq_len, cfg.embed_dim, cfg.ff_dim());
        let mut rng = rng_from_seed(derive_seed(seed, 0x1417));
        let value_weight = uniform(l, d, (6.0 / (1.0 + d as f64)).sqrt(), &mut rng);
        let pos = uniform(l, d, 0.02 * 3f64.sqrt(), &mut rng);
        let mask_token = uniform(1, d, 0.02 * 3f64.sqrt(), &mut rng);
        let encoder = (0..cfg.n_layers_enc).map(|_| BlockParams::init(d, hidden, &mut rng)).collect();
        let decoder = (0..cfg.n_layers_dec).map(|_| BlockParams::init(d, hidden, &mut rng)).collect();
        let head_weight = uniform(l, d, (6.0 / (1.0 + d as f64)).sqrt() * 0.1, &mut rng);
        Ok(Self {
            value_weight,
            value_bias: Matrix::zeros(l, d),
            pos,
            mask_token,
            encoder,
            enc_norm_gamma: Matrix::filled(1, d, 1.0),
            enc_norm_beta: Matrix::zeros(1, d),
            decoder,
            dec_norm_gamma: Matrix::filled(1, d, 1.0),
            dec_norm_beta: Matrix::zeros(1, d),
            head_weight,
            head_bias: Matrix::filled(1, l, 0.5),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.value_weight, &self.value_bias, &self.pos, &self.mask_token];
        for b in &self.encoder {
            v.extend(b.tensors());
        }
        v.push(&self.enc_norm_gamma);
        v.push(&self.enc_norm_beta);
        for b in &self.decoder {
            v.extend(b.tensors());
        }
        v.extend([&self.dec_norm_gamma, &self.dec_norm_beta, &self.head_weight, &self.head_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.value_weight, &mut self.value_bias, &mut self.pos, &mut self.mask_token];
        for b in &mut self.encoder {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.enc_norm_gamma);
        v.push(&mut self.enc_norm_beta);
        for b in &mut self.decoder {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.dec_norm_gamma,
            &mut self.dec_norm_beta,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["value_weight", "value_bias", "pos", "mask_token"].map(String::from).to_vec();
        for (i, _) in self.encoder.iter().enumerate() {
            v.extend(BlockParams::NAMES.iter().map(|n| format!("encoder.{i}.{n}")));
        }
        v.push("enc_norm_gamma".into());
        v.push("enc_norm_beta".into());
        for (i, _) in self.decoder.iter().enumerate() {
            v.extend(BlockParams::NAMES.iter().map(|n| format!("decoder.{i}.{n}")));
        }
        v.extend(["dec_norm_gamma", "dec_norm_beta", "head_weight", "head_bias"].map(String::from));
        v
    }

    /// Weight decay applies to the projection matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensor_names()
            .iter()
            .map(|n| {
                let leaf = n.rsplit('.').next().unwrap_or(n);
                leaf.starts_with("w_") || leaf == "head_weight" || leaf == "value_weight"
            })
            .collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Flat view of scalar `k` across all tensors, in declaration order.
    pub fn scalar_mut(&mut self, mut k: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            let n = t.data().len();
            if k < n {
                return &mut t.data_mut()[k];
            }
            k -= n;
        }
        panic!("scalar index out of range")
    }

    pub fn scalar(&self, mut k: usize) -> f64 {
        for t in self.tensors() {
            let n = t.data().len();
            if k < n {
                return t.data()[k];
            }
            k -= n;
        }
        panic!("scalar index out of range")
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Matrix {
    uniform(fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
