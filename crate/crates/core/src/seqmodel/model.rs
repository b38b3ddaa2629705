use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::{ActivationRecord, Architecture, LayerSelection, ModelConfig};
use crate::error::{input_err, Error, Result};
use crate::ghmm::Word;

/// One named tensor inside the flat parameter vector, stored column-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub bias: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerIdx {
    w_in: usize,
    w_hid: usize,
    b_in: usize,
    /// GRU keeps a separate hidden-side bias because the reset gate scales it.
    b_hid: Option<usize>,
}

impl ParamLayout {
    fn build(cfg: &ModelConfig) -> (Self, Vec<LayerIdx>, usize, usize) {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, rows: usize, cols: usize, bias: bool| {
            tensors.push(TensorSpec { name, rows, cols, offset: total, bias });
            total += rows * cols;
            tensors.len() - 1
        };
        let h = cfg.hidden;
        let g = cfg.architecture.gates() * h;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { cfg.alphabet_size } else { h };
            let w_in = push(format!("layer{l}.w_in"), input, g, false);
            let w_hid = push(format!("layer{l}.w_hid"), h, g, false);
            let idx = match cfg.architecture {
                Architecture::Rnn => {
                    LayerIdx { w_in, w_hid, b_in: push(format!("layer{l}.b"), 1, g, true), b_hid: None }
                }
                Architecture::Gru => {
                    let b_in = push(format!("layer{l}.b_in"), 1, g, true);
                    let b_hid = push(format!("layer{l}.b_hid"), 1, g, true);
                    LayerIdx { w_in, w_hid, b_in, b_hid: Some(b_hid) }
                }
            };
            layers.push(idx);
        }
        let out_w = push("out.w".into(), h, cfg.alphabet_size, false);
        let out_b = push("out.b".into(), 1, cfg.alphabet_size, true);
        (Self { tensors, total }, layers, out_w, out_b)
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Per-position cached gate values of one GRU step.
struct GruCache {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// Hidden-side candidate pre-activation `h W_hid_n + b_hid_n`.
    hn: Vec<f64>,
}

pub struct ForwardOutput {
    /// `logits[t]` is `batch x alphabet` and predicts the token after position `t`.
    pub logits: Vec<DMatrix<f64>>,
    /// `hidden[layer][t]` is `batch x hidden`.
    pub hidden: Vec<Vec<DMatrix<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    config: ModelConfig,
    layout: ParamLayout,
    layers: Vec<LayerIdx>,
    out_w: usize,
    out_b: usize,
    params: Vec<f64>,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &[f64]) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

fn one_hot(tokens: &[usize], alphabet: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(tokens.len(), alphabet);
    for (b, &x) in tokens.iter().enumerate() {
        m[(b, x)] = 1.0;
    }
    m
}

fn col_sums(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.sum()).collect()
}

impl SequenceModel {
    /// Uniform `(-k, k)` weights with `k = 1/sqrt(fan_in)`, zero biases, drawn
    /// tensor by tensor in layout order from a ChaCha8 stream seeded by
    /// `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, layers, out_w, out_b) = ParamLayout::build(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            if t.bias {
                continue;
            }
            let k = 1.0 / (t.rows as f64).sqrt();
            for p in &mut params[t.range()] {
                *p = rng.random_range(-k..k);
            }
        }
        let adam = AdamState::new(layout.total);
        Ok(Self { config: cfg.clone(), layout, layers, out_w, out_b, params, adam, adam_config: AdamConfig::default() })
    }

    /// Rebuilds a model from a flat parameter vector and optimizer state.
    pub fn from_parts(cfg: &ModelConfig, params: Vec<f64>, adam: AdamState) -> Result<Self> {
        let mut model = Self::init(cfg)?;
        if params.len() != model.layout.total || adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(input_err!(
                "parameter vector has {} entries, layout expects {}",
                params.len(),
                model.layout.total
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        model.params = params;
        model.adam = adam;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range();
        Some(&mut self.params[range])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn mat(&self, idx: usize) -> DMatrixView<'_, f64> {
        let t = &self.layout.tensors[idx];
        DMatrixView::from_slice(&self.params[t.range()], t.rows, t.cols)
    }

    fn vec(&self, idx: usize) -> &[f64] {
        &self.params[self.layout.tensors[idx].range()]
    }

    fn accumulate(&self, grad: &mut [f64], idx: usize, values: &[f64]) {
        let t = &self.layout.tensors[idx];
        for (g, v) in grad[t.range()].iter_mut().zip(values) {
            *g += v;
        }
    }

    /// One recurrent step of layer `l` for a batch.
    fn cell(&self, l: usize, x: &DMatrix<f64>, hprev: &DMatrix<f64>) -> (DMatrix<f64>, Option<GruCache>) {
        let idx = self.layers[l];
        let h = self.config.hidden;
        let b = x.nrows();
        let mut ai = x * self.mat(idx.w_in);
        add_row_bias(&mut ai, self.vec(idx.b_in));
        let mut ah = hprev * self.mat(idx.w_hid);
        match self.config.architecture {
            Architecture::Rnn => {
                ai += ah;
                ai.apply(|v| *v = v.tanh());
                (ai, None)
            }
            Architecture::Gru => {
                add_row_bias(&mut ah, self.vec(idx.b_hid.expect("gru has hidden bias")));
                let n = b * h;
                let (ai, ah, hp) = (ai.as_slice(), ah.as_slice(), hprev.as_slice());
                let mut c = GruCache { r: vec![0.0; n], z: vec![0.0; n], n: vec![0.0; n], hn: vec![0.0; n] };
                let mut out = DMatrix::zeros(b, h);
                let o = out.as_mut_slice();
                for i in 0..n {
                    let r = sigmoid(ai[i] + ah[i]);
                    let z = sigmoid(ai[n + i] + ah[n + i]);
                    let hn = ah[2 * n + i];
                    let cand = (ai[2 * n + i] + r * hn).tanh();
                    o[i] = (1.0 - z) * hp[i] + z * cand;
                    c.r[i] = r;
                    c.z[i] = z;
                    c.n[i] = cand;
                    c.hn[i] = hn;
                }
                (out, Some(c))
            }
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&x) = tokens.iter().find(|&&x| x >= self.config.alphabet_size) {
            return Err(input_err!("token {x} out of range for alphabet of size {}", self.config.alphabet_size));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[Vec<usize>], max_len: usize) -> Result<usize> {
        let first = batch.first().ok_or_else(|| input_err!("empty batch"))?;
        let len = first.len();
        if len == 0 {
            return Err(input_err!("empty sequence"));
        }
        if len > max_len {
            return Err(input_err!("sequence of length {len} exceeds limit {max_len}"));
        }
        for seq in batch {
            if seq.len() != len {
                return Err(input_err!("sequences in a batch must share one length"));
            }
            self.check_tokens(seq)?;
        }
        Ok(len)
    }

    pub fn zero_state(&self, batch: usize) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(batch, self.config.hidden); self.config.layers]
    }

    /// Advances every layer by one token for each batch row.
    pub fn step(&self, state: &[DMatrix<f64>], tokens: &[usize]) -> Result<Vec<DMatrix<f64>>> {
        self.check_tokens(tokens)?;
        if state.len() != self.config.layers || state.iter().any(|s| s.nrows() != tokens.len()) {
            return Err(input_err!("state shape does not match model and batch"));
        }
        let mut x = one_hot(tokens, self.config.alphabet_size);
        let mut next = Vec::with_capacity(state.len());
        for (l, hprev) in state.iter().enumerate() {
            let (h, _) = self.cell(l, &x, hprev);
            x = h.clone();
            next.push(h);
        }
        Ok(next)
    }

    /// Logits from a `batch x hidden` top-layer state.
    pub fn output_logits(&self, top: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = top * self.mat(self.out_w);
        add_row_bias(&mut z, self.vec(self.out_b));
        z
    }

    /// Runs a batch of equal-length token sequences (length at most the
    /// context length) from the zero state.
    pub fn forward(&self, batch: &[Vec<usize>]) -> Result<ForwardOutput> {
        let len = self.check_batch(batch, self.config.context_length)?;
        let mut state = self.zero_state(batch.len());
        let mut logits = Vec::with_capacity(len);
        let mut hidden = vec![Vec::with_capacity(len); self.config.layers];
        for t in 0..len {
            let tokens: Vec<usize> = batch.iter().map(|s| s[t]).collect();
            state = self.step(&state, &tokens)?;
            logits.push(self.output_logits(&state[self.config.layers - 1]));
            for (l, h) in state.iter().enumerate() {
                hidden[l].push(h.clone());
            }
        }
        Ok(ForwardOutput { logits, hidden })
    }

    /// Mean per-token next-token cross-entropy (nats) of a batch of
    /// sequences, each `n + 1` tokens long with `n <= context_length`.
    pub fn loss(&self, batch: &[Vec<usize>]) -> Result<f64> {
        let len = self.check_batch(batch, self.config.context_length + 1)?;
        if len < 2 {
            return Err(input_err!("sequences need at least two tokens"));
        }
        let inputs: Vec<Vec<usize>> = batch.iter().map(|s| s[..len - 1].to_vec()).collect();
        let out = self.forward(&inputs)?;
        let mut total = 0.0;
        for (t, z) in out.logits.iter().enumerate() {
            for (b, seq) in batch.iter().enumerate() {
                total += neg_log_softmax(z, b, seq[t + 1]);
            }
        }
        let loss = total / (batch.len() * (len - 1)) as f64;
        self.check_loss(loss)?;
        Ok(loss)
    }

    fn check_loss(&self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            return Ok(());
        }
        let max_abs = self.params.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        let non_finite = self.params.iter().filter(|p| !p.is_finite()).count();
        Err(Error::Numeric(format!(
            "non-finite loss {loss} (max |param| {max_abs:e}, {non_finite} non-finite parameters, adam step {})",
            self.adam.step
        )))
    }

    /// Loss together with its exact gradient by backpropagation through time.
    pub fn loss_and_grad(&self, batch: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
        let len = self.check_batch(batch, self.config.context_length + 1)?;
        if len < 2 {
            return Err(input_err!("sequences need at least two tokens"));
        }
        let steps = len - 1;
        let bsz = batch.len();
        let nl = self.config.layers;
        let hdim = self.config.hidden;
        let a = self.config.alphabet_size;

        let inputs: Vec<DMatrix<f64>> = (0..steps)
            .map(|t| one_hot(&batch.iter().map(|s| s[t]).collect::<Vec<_>>(), a))
            .collect();
        let zero = DMatrix::zeros(bsz, hdim);
        let mut hs: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(nl);
        let mut caches: Vec<Vec<Option<GruCache>>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let mut layer_h: Vec<DMatrix<f64>> = Vec::with_capacity(steps);
            let mut layer_c = Vec::with_capacity(steps);
            for t in 0..steps {
                let x = if l == 0 { &inputs[t] } else { &hs[l - 1][t] };
                let hprev = if t == 0 { &zero } else { &layer_h[t - 1] };
                let (h, c) = self.cell(l, x, hprev);
                layer_h.push(h);
                layer_c.push(c);
            }
            hs.push(layer_h);
            caches.push(layer_c);
        }

        let mut grad = vec![0.0; self.layout.total];
        let scale = 1.0 / (bsz * steps) as f64;
        let mut total = 0.0;
        let mut d_above: Vec<DMatrix<f64>> = Vec::with_capacity(steps);
        for t in 0..steps {
            let top = &hs[nl - 1][t];
            let z = self.output_logits(top);
            let mut dz = DMatrix::zeros(bsz, a);
            for (b, seq) in batch.iter().enumerate() {
                let target = seq[t + 1];
                total += neg_log_softmax(&z, b, target);
                let m = z.row(b).max();
                let denom: f64 = z.row(b).iter().map(|v| (v - m).exp()).sum();
                for x in 0..a {
                    let p = (z[(b, x)] - m).exp() / denom;
                    dz[(b, x)] = (p - if x == target { 1.0 } else { 0.0 }) * scale;
                }
            }
            self.accumulate(&mut grad, self.out_w, (top.tr_mul(&dz)).as_slice());
            self.accumulate(&mut grad, self.out_b, &col_sums(&dz));
            d_above.push(&dz * self.mat(self.out_w).transpose());
        }
        let loss = total * scale;
        self.check_loss(loss)?;

        for l in (0..nl).rev() {
            let idx = self.layers[l];
            let w_in_t = self.mat(idx.w_in).transpose();
            let w_hid_t = self.mat(idx.w_hid).transpose();
            let mut carry = DMatrix::zeros(bsz, hdim);
            let mut d_below: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); steps];
            for t in (0..steps).rev() {
                let dh = &d_above[t] + &carry;
                let x = if l == 0 { &inputs[t] } else { &hs[l - 1][t] };
                let hprev = if t == 0 { &zero } else { &hs[l][t - 1] };
                let (da_in, da_hid, dhprev_direct) = match &caches[l][t] {
                    None => {
                        let h = &hs[l][t];
                        let da = dh.zip_map(h, |g, hv| g * (1.0 - hv * hv));
                        (da.clone(), da, None)
                    }
                    Some(c) => {
                        let n = bsz * hdim;
                        let mut dai = DMatrix::zeros(bsz, 3 * hdim);
                        let mut dah = DMatrix::zeros(bsz, 3 * hdim);
                        let mut dhp = DMatrix::zeros(bsz, hdim);
                        let (dh_s, hp) = (dh.as_slice(), hprev.as_slice());
                        let (si, sh, sp) = (dai.as_mut_slice(), dah.as_mut_slice(), dhp.as_mut_slice());
                        for i in 0..n {
                            let (r, z, cand, hn) = (c.r[i], c.z[i], c.n[i], c.hn[i]);
                            let g = dh_s[i];
                            let dz = g * (cand - hp[i]);
                            let dn = g * z;
                            sp[i] = g * (1.0 - z);
                            let dan = dn * (1.0 - cand * cand);
                            let dar = dan * hn * r * (1.0 - r);
                            let daz = dz * z * (1.0 - z);
                            si[i] = dar;
                            si[n + i] = daz;
                            si[2 * n + i] = dan;
                            sh[i] = dar;
                            sh[n + i] = daz;
                            sh[2 * n + i] = dan * r;
                        }
                        (dai, dah, Some(dhp))
                    }
                };
                self.accumulate(&mut grad, idx.w_in, x.tr_mul(&da_in).as_slice());
                self.accumulate(&mut grad, idx.w_hid, hprev.tr_mul(&da_hid).as_slice());
                match idx.b_hid {
                    None => self.accumulate(&mut grad, idx.b_in, &col_sums(&da_in)),
                    Some(b_hid) => {
                        self.accumulate(&mut grad, idx.b_in, &col_sums(&da_in));
                        self.accumulate(&mut grad, b_hid, &col_sums(&da_hid));
                    }
                }
                let mut dhprev = &da_hid * &w_hid_t;
                if let Some(direct) = dhprev_direct {
                    dhprev += direct;
                }
                carry = dhprev;
                if l > 0 {
                    d_below[t] = &da_in * &w_in_t;
                }
            }
            d_above = d_below;
        }
        Ok((loss, grad))
    }

    /// Adam update with the given gradient and learning rate.
    pub fn adam_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(input_err!("gradient has {} entries, expected {}", grad.len(), self.params.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let cfg = self.adam_config;
        self.adam.update(&cfg, &mut self.params, grad, lr);
        Ok(())
    }

    /// Final-position hidden states of the selected layers for each word.
    ///
    /// Words are evaluated through a shared prefix tree, so each distinct
    /// prefix is stepped once.
    pub fn capture_activations(&self, words: &[Word], selection: &LayerSelection) -> Result<Vec<ActivationRecord>> {
        let layers = selection.resolve(self.config.layers)?;
        let mut max_len = 0;
        for w in words {
            if w.is_empty() || w.len() > self.config.context_length {
                return Err(input_err!(
                    "word of length {} outside 1..={}",
                    w.len(),
                    self.config.context_length
                ));
            }
            self.check_tokens(w)?;
            max_len = max_len.max(w.len());
        }
        // by_level[k] holds the distinct prefixes of length k+1.
        let mut by_level: Vec<BTreeSet<&[usize]>> = vec![BTreeSet::new(); max_len];
        for w in words {
            for k in 1..=w.len() {
                by_level[k - 1].insert(&w[..k]);
            }
        }
        // Per level: prefix -> batch row, and the per-layer states.
        type Level<'w> = (HashMap<&'w [usize], usize>, Vec<DMatrix<f64>>);
        let mut states: Vec<Level<'_>> = Vec::with_capacity(max_len);
        for (k, prefixes) in by_level.iter().enumerate() {
            let prefixes: Vec<&[usize]> = prefixes.iter().copied().collect();
            let tokens: Vec<usize> = prefixes.iter().map(|p| p[k]).collect();
            let prev = if k == 0 {
                self.zero_state(prefixes.len())
            } else {
                let (index, st) = &states[k - 1];
                let rows: Vec<usize> = prefixes.iter().map(|p| index[&p[..k]]).collect();
                st.iter().map(|m| m.select_rows(&rows)).collect()
            };
            let next = self.step(&prev, &tokens)?;
            let index = prefixes.iter().enumerate().map(|(i, p)| (*p, i)).collect();
            states.push((index, next));
        }
        let hdim = self.config.hidden;
        Ok(words
            .iter()
            .map(|w| {
                let (index, st) = &states[w.len() - 1];
                let row = index[w.as_slice()];
                let mut v = DVector::zeros(hdim * layers.len());
                for (j, &l) in layers.iter().enumerate() {
                    for c in 0..hdim {
                        v[j * hdim + c] = st[l][(row, c)];
                    }
                }
                ActivationRecord { word: w.clone(), layers: layers.clone(), vector: v }
            })
            .collect())
    }
}

/// `-log softmax(z[b, :])[target]`.
pub(crate) fn neg_log_softmax(z: &DMatrix<f64>, b: usize, target: usize) -> f64 {
    let row = z.row(b);
    let m = row.max();
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[(b, target)]
}
