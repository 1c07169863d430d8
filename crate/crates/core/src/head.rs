//! Domain-specific extractor and classifier.
//!
//! A bidirectional LSTM reads the per-token features; the concatenated
//! hidden states `V_t` pass through a sigmoid feature filter
//! `w_t = sigmoid(W_fc V_t + b_fc)`, `g_t = w_t * V_t`; the filtered states
//! are mean-pooled over time, dropped out during training, and mapped to
//! cover/stego probabilities by a linear layer and softmax. Every parameter
//! has an exact analytic gradient computed by [`backward`].

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::encoder::ContextualFeatures;
use crate::error::{Error, Result};
use crate::optim::Parameters;

/// Probability clamp applied before taking logs.
pub const LOSS_EPS: f64 = 1e-12;

/// Weights of one LSTM direction. Gate blocks are stacked row-wise in the
/// order input, forget, output, candidate: `w` is `4h x d_in`, `u` is
/// `4h x h`, `b` has `4h` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

impl LstmParams {
    fn zeros(d_in: usize, h: usize) -> Self {
        LstmParams {
            w: Array2::zeros((4 * h, d_in)),
            u: Array2::zeros((4 * h, h)),
            b: Array1::zeros(4 * h),
        }
    }

    fn init<R: Rng>(d_in: usize, h: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_in, h);
        fill_uniform(&mut p.w, (6.0 / (d_in + h) as f64).sqrt(), rng);
        fill_uniform(&mut p.u, (6.0 / (2 * h) as f64).sqrt(), rng);
        p.b.slice_mut(s![h..2 * h]).fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    /// Block `k` (0 = input, 1 = forget, 2 = output, 3 = candidate) of the biases.
    pub fn bias_block(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        let h = self.hidden();
        self.b.slice(s![k * h..(k + 1) * h])
    }

    /// Block `k` of the input weights, `h x d_in`.
    pub fn input_block(&self, k: usize) -> ArrayView2<'_, f64> {
        let h = self.hidden();
        self.w.slice(s![k * h..(k + 1) * h, ..])
    }
}

fn fill_uniform<R: Rng>(m: &mut Array2<f64>, bound: f64, rng: &mut R) {
    m.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstmLayer {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// All trainable head parameters. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub d_in: usize,
    pub hidden: usize,
    pub layers: Vec<BiLstmLayer>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
}

/// Single-layer head with Glorot-uniform weights and unit forget biases.
pub fn init_params(d_h: usize, h: usize, seed: u64) -> HeadParams {
    HeadParams::init(d_h, h, 1, seed)
}

impl HeadParams {
    pub fn init(d_h: usize, h: usize, layers: usize, seed: u64) -> Self {
        assert!(d_h >= 1 && h >= 1 && layers >= 1, "head dimensions must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..layers)
            .map(|l| {
                let d_in = if l == 0 { d_h } else { 2 * h };
                BiLstmLayer {
                    fwd: LstmParams::init(d_in, h, &mut rng),
                    bwd: LstmParams::init(d_in, h, &mut rng),
                }
            })
            .collect();
        let mut w_fc = Array2::zeros((2 * h, 2 * h));
        fill_uniform(&mut w_fc, (6.0 / (4 * h) as f64).sqrt(), &mut rng);
        let mut w_cls = Array2::zeros((2, 2 * h));
        fill_uniform(&mut w_cls, (6.0 / (2 * h + 2) as f64).sqrt(), &mut rng);
        HeadParams {
            d_in: d_h,
            hidden: h,
            layers,
            w_fc,
            b_fc: Array1::zeros(2 * h),
            w_cls,
            b_cls: Array1::zeros(2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let h = self.hidden;
        HeadParams {
            d_in: self.d_in,
            hidden: h,
            layers: self
                .layers
                .iter()
                .map(|l| BiLstmLayer {
                    fwd: LstmParams::zeros(l.fwd.w.ncols(), h),
                    bwd: LstmParams::zeros(l.bwd.w.ncols(), h),
                })
                .collect(),
            w_fc: Array2::zeros(self.w_fc.raw_dim()),
            b_fc: Array1::zeros(self.b_fc.raw_dim()),
            w_cls: Array2::zeros(self.w_cls.raw_dim()),
            b_cls: Array1::zeros(self.b_cls.raw_dim()),
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &HeadParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            for d in [&l.fwd, &l.bwd] {
                out.push(d.w.as_slice().unwrap());
                out.push(d.u.as_slice().unwrap());
                out.push(d.b.as_slice().unwrap());
            }
        }
        out.push(self.w_fc.as_slice().unwrap());
        out.push(self.b_fc.as_slice().unwrap());
        out.push(self.w_cls.as_slice().unwrap());
        out.push(self.b_cls.as_slice().unwrap());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for d in [&mut l.fwd, &mut l.bwd] {
                out.push(d.w.as_slice_mut().unwrap());
                out.push(d.u.as_slice_mut().unwrap());
                out.push(d.b.as_slice_mut().unwrap());
            }
        }
        out.push(self.w_fc.as_slice_mut().unwrap());
        out.push(self.b_fc.as_slice_mut().unwrap());
        out.push(self.w_cls.as_slice_mut().unwrap());
        out.push(self.b_cls.as_slice_mut().unwrap());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// How the feature filter is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `w = sigmoid(W_fc V + b_fc)`.
    Learned,
    /// `w` fixed to ones, still multiplied through.
    ForcedOnes,
    /// No filter: `g = V`.
    Bypass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub gate: GateMode,
    /// Retention probability of the dropout on the pooled vector.
    pub keep_prob: f64,
    pub dropout_seed: u64,
}

impl ForwardOptions {
    pub fn eval(gate: GateMode) -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            gate,
            keep_prob: 1.0,
            dropout_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct LstmCache {
    x: Array2<f64>,
    /// Activated gates, `len x 4h`.
    acts: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    fwd: LstmCache,
    /// Cache of the backward direction over the time-reversed input.
    bwd: LstmCache,
}

/// Everything [`backward`] needs, plus the intermediate quantities.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Concatenated Bi-LSTM states of the top layer, `len x 2h`.
    pub v: Array2<f64>,
    /// Filter activations, `len x 2h`.
    pub w: Array2<f64>,
    /// Filtered states, `len x 2h`.
    pub g: Array2<f64>,
    /// Mean over time of `g`.
    pub g_pooled: Array1<f64>,
    /// Pooled vector after dropout (equal to `g_pooled` in eval mode).
    pub classifier_input: Array1<f64>,
    pub dropout_mask: Option<Array1<f64>>,
    pub logits: [f64; 2],
    pub pred: [f64; 2],
    gate: GateMode,
    layers: Vec<LayerCache>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `z += Σ_k h[k] · ut[k, ..]` with `ut` stored row-major as `h x z.len()`.
#[inline(always)]
fn recur_fwd_body(z: &mut [f64], ut: &[f64], h_prev: &[f64]) {
    let n = z.len();
    for (k, &hk) in h_prev.iter().enumerate() {
        for (zr, &u) in z.iter_mut().zip(&ut[k * n..(k + 1) * n]) {
            *zr += u * hk;
        }
    }
}

/// `dh = Σ_r dz[r] · u[r, ..]` with `u` stored row-major as `dz.len() x dh.len()`.
#[inline(always)]
fn recur_bwd_body(dh: &mut [f64], u: &[f64], dz: &[f64]) {
    let n = dh.len();
    dh.iter_mut().for_each(|v| *v = 0.0);
    for (r, &d) in dz.iter().enumerate() {
        for (acc, &w) in dh.iter_mut().zip(&u[r * n..(r + 1) * n]) {
            *acc += w * d;
        }
    }
}

// Wider registers only; no fused multiply-add, so both paths round identically.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn recur_fwd_avx(z: &mut [f64], ut: &[f64], h_prev: &[f64]) {
    recur_fwd_body(z, ut, h_prev)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn recur_bwd_avx(dh: &mut [f64], u: &[f64], dz: &[f64]) {
    recur_bwd_body(dh, u, dz)
}

fn recur_fwd(z: &mut [f64], ut: &[f64], h_prev: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { recur_fwd_avx(z, ut, h_prev) };
    }
    recur_fwd_body(z, ut, h_prev)
}

fn recur_bwd(dh: &mut [f64], u: &[f64], dz: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { recur_bwd_avx(dh, u, dz) };
    }
    recur_bwd_body(dh, u, dz)
}

fn reverse_rows(m: &Array2<f64>) -> Array2<f64> {
    m.slice(s![..;-1, ..]).to_owned()
}

fn lstm_forward(p: &LstmParams, x: Array2<f64>) -> LstmCache {
    let len = x.nrows();
    let h = p.hidden();
    let g4 = 4 * h;
    // zin[t] = W x_t + b for all steps in one product
    let mut zin = x.dot(&p.w.t());
    zin += &p.b;
    // U^T, so the recurrent product is a sum of contiguous scaled rows
    let ut = p.u.t().as_standard_layout().into_owned();
    let ut = ut.as_slice().unwrap();
    let mut acts = zin;
    let mut c = Array2::zeros((len, h));
    let mut tanh_c = Array2::zeros((len, h));
    let mut hs = Array2::<f64>::zeros((len, h));
    {
        let acts_s = acts.as_slice_mut().unwrap();
        let c_s = c.as_slice_mut().unwrap();
        let tc_s = tanh_c.as_slice_mut().unwrap();
        let h_s = hs.as_slice_mut().unwrap();
        let mut c_prev = vec![0.0; h];
        for t in 0..len {
            let z = &mut acts_s[t * g4..(t + 1) * g4];
            if t > 0 {
                recur_fwd(z, ut, &h_s[(t - 1) * h..t * h]);
            }
            let ct_row = &mut c_s[t * h..(t + 1) * h];
            let tc_row = &mut tc_s[t * h..(t + 1) * h];
            let h_row = &mut h_s[t * h..(t + 1) * h];
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let o_g = sigmoid(z[2 * h + j]);
                let c_g = z[3 * h + j].tanh();
                z[j] = i_g;
                z[h + j] = f_g;
                z[2 * h + j] = o_g;
                z[3 * h + j] = c_g;
                let ct = f_g * c_prev[j] + i_g * c_g;
                let tc = ct.tanh();
                ct_row[j] = ct;
                tc_row[j] = tc;
                h_row[j] = o_g * tc;
                c_prev[j] = ct;
            }
        }
    }
    LstmCache {
        x,
        acts,
        c,
        tanh_c,
        h: hs,
    }
}

/// Accumulates parameter gradients into `grads` and returns the input gradient.
fn lstm_backward(
    p: &LstmParams,
    cache: &LstmCache,
    dh_out: ArrayView2<'_, f64>,
    grads: &mut LstmParams,
) -> Array2<f64> {
    let len = cache.x.nrows();
    let h = p.hidden();
    let g4 = 4 * h;
    let u = p.u.as_slice().unwrap();
    let acts = cache.acts.as_slice().unwrap();
    let c_s = cache.c.as_slice().unwrap();
    let tc_s = cache.tanh_c.as_slice().unwrap();
    let mut dz = Array2::<f64>::zeros((len, g4));
    {
        let dz_s = dz.as_slice_mut().unwrap();
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..len).rev() {
            let a = &acts[t * g4..(t + 1) * g4];
            let tc_row = &tc_s[t * h..(t + 1) * h];
            let dzt = &mut dz_s[t * g4..(t + 1) * g4];
            for j in 0..h {
                let (i_g, f_g, o_g, c_g) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                let tc = tc_row[j];
                let c_prev = if t > 0 { c_s[(t - 1) * h + j] } else { 0.0 };
                let dh = dh_out[[t, j]] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                dzt[j] = dc * c_g * i_g * (1.0 - i_g);
                dzt[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dzt[2 * h + j] = d_o * o_g * (1.0 - o_g);
                dzt[3 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                dc_next[j] = dc * f_g;
            }
            recur_bwd(&mut dh_next, u, dzt);
        }
    }
    ndarray::linalg::general_mat_mul(1.0, &dz.t(), &cache.x, 1.0, &mut grads.w);
    if len > 1 {
        ndarray::linalg::general_mat_mul(
            1.0,
            &dz.slice(s![1.., ..]).t(),
            &cache.h.slice(s![..len - 1, ..]),
            1.0,
            &mut grads.u,
        );
    }
    grads.b += &dz.sum_axis(Axis(0));
    dz.dot(&p.w)
}

fn layer_forward(layer: &BiLstmLayer, x: Array2<f64>) -> (LayerCache, Array2<f64>) {
    let h = layer.fwd.hidden();
    let len = x.nrows();
    let x_rev = reverse_rows(&x);
    let fwd = lstm_forward(&layer.fwd, x);
    let bwd = lstm_forward(&layer.bwd, x_rev);
    let mut v = Array2::zeros((len, 2 * h));
    v.slice_mut(s![.., ..h]).assign(&fwd.h);
    v.slice_mut(s![.., h..]).assign(&bwd.h.slice(s![..;-1, ..]));
    (LayerCache { fwd, bwd }, v)
}

fn layer_backward(layer: &BiLstmLayer, cache: &LayerCache, dv: &Array2<f64>, grads: &mut BiLstmLayer) -> Array2<f64> {
    let h = layer.fwd.hidden();
    let dxf = lstm_backward(&layer.fwd, &cache.fwd, dv.slice(s![.., ..h]), &mut grads.fwd);
    let dxr = lstm_backward(&layer.bwd, &cache.bwd, dv.slice(s![..;-1, h..]), &mut grads.bwd);
    dxf + dxr.slice(s![..;-1, ..])
}

fn ensure_finite<'a, I: IntoIterator<Item = &'a f64>>(vals: I, stage: &'static str) -> Result<()> {
    if vals.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(stage))
    }
}

/// Runs the head on one feature matrix.
pub fn forward(features: &ContextualFeatures, params: &HeadParams, opts: &ForwardOptions) -> Result<ForwardTrace> {
    if features.d_h() != params.d_in {
        return Err(Error::Contract(format!(
            "feature width {} does not match head input width {}",
            features.d_h(),
            params.d_in
        )));
    }
    if features.is_empty() {
        return Err(Error::Contract("empty feature matrix".into()));
    }
    let mut x = features.0.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (cache, v) = layer_forward(layer, x);
        layers.push(cache);
        x = v;
    }
    let v = x;
    ensure_finite(v.iter(), "bilstm")?;

    let (w, g) = match opts.gate {
        GateMode::Learned => {
            let mut w = v.dot(&params.w_fc.t());
            w += &params.b_fc;
            w.mapv_inplace(sigmoid);
            ensure_finite(w.iter(), "feature_filter")?;
            let g = &w * &v;
            (w, g)
        }
        GateMode::ForcedOnes => {
            let w = Array2::ones(v.raw_dim());
            let g = &w * &v;
            (w, g)
        }
        GateMode::Bypass => (Array2::ones(v.raw_dim()), v.clone()),
    };
    let g_pooled = g.mean_axis(Axis(0)).expect("non-empty sequence");

    let (classifier_input, dropout_mask) = match opts.mode {
        Mode::Train if opts.keep_prob < 1.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
            let scale = 1.0 / opts.keep_prob;
            let mask = Array1::from_shape_simple_fn(g_pooled.len(), || {
                if rng.gen::<f64>() < opts.keep_prob {
                    scale
                } else {
                    0.0
                }
            });
            (&g_pooled * &mask, Some(mask))
        }
        _ => (g_pooled.clone(), None),
    };

    let lv = params.w_cls.dot(&classifier_input) + &params.b_cls;
    let logits = [lv[0], lv[1]];
    ensure_finite(logits.iter(), "classifier")?;
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let pred = [e0 / (e0 + e1), e1 / (e0 + e1)];
    Ok(ForwardTrace {
        v,
        w,
        g,
        g_pooled,
        classifier_input,
        dropout_mask,
        logits,
        pred,
        gate: opts.gate,
        layers,
    })
}

/// Binary cross-entropy on the stego probability, clamped to `[eps, 1 - eps]`.
pub fn loss_ce(pred: [f64; 2], label: Label) -> f64 {
    let p = pred[1].clamp(LOSS_EPS, 1.0 - LOSS_EPS);
    match label {
        Label::Stego => -p.ln(),
        Label::Cover => -(1.0 - p).ln(),
    }
}

/// Mean loss over a batch.
pub fn batch_loss(preds: &[[f64; 2]], labels: &[Label]) -> f64 {
    preds.iter().zip(labels).map(|(&p, &y)| loss_ce(p, y)).sum::<f64>() / preds.len() as f64
}

/// Gradient of the loss with respect to the logits: `pred - onehot(y)`.
pub fn logit_gradient(pred: [f64; 2], label: Label) -> [f64; 2] {
    let mut d = pred;
    d[label.index()] -= 1.0;
    d
}

/// Adds `scale * dLoss/dParams` for one sample into `grads` and returns
/// `scale * dLoss/dFeatures`.
pub fn backward_into(
    trace: &ForwardTrace,
    params: &HeadParams,
    label: Label,
    scale: f64,
    grads: &mut HeadParams,
) -> Result<Array2<f64>> {
    if grads.layers.len() != params.layers.len() || grads.w_fc.raw_dim() != params.w_fc.raw_dim() {
        return Err(Error::Contract("gradient container does not match parameters".into()));
    }
    if trace.layers.len() != params.layers.len() || trace.v.ncols() != 2 * params.hidden {
        return Err(Error::Contract("trace was not produced by these parameters".into()));
    }
    let dl = logit_gradient(trace.pred, label);
    let dlogits = Array1::from(vec![dl[0] * scale, dl[1] * scale]);

    for k in 0..2 {
        let mut row = grads.w_cls.row_mut(k);
        row.scaled_add(dlogits[k], &trace.classifier_input);
    }
    grads.b_cls += &dlogits;
    let mut d_pooled = params.w_cls.t().dot(&dlogits);
    if let Some(mask) = &trace.dropout_mask {
        d_pooled *= mask;
    }

    let len = trace.v.nrows();
    d_pooled /= len as f64;
    // every timestep receives the same pooled gradient
    let dg = d_pooled.broadcast((len, d_pooled.len())).unwrap();

    let mut dv = match trace.gate {
        GateMode::Learned => {
            let mut dv = &dg * &trace.w;
            let da = &dg * &trace.v * &trace.w.mapv(|w| w * (1.0 - w));
            ndarray::linalg::general_mat_mul(1.0, &da.t(), &trace.v, 1.0, &mut grads.w_fc);
            grads.b_fc += &da.sum_axis(Axis(0));
            ndarray::linalg::general_mat_mul(1.0, &da, &params.w_fc, 1.0, &mut dv);
            dv
        }
        GateMode::ForcedOnes => &dg * &trace.w,
        GateMode::Bypass => dg.to_owned(),
    };

    for ((layer, cache), g) in params
        .layers
        .iter()
        .zip(&trace.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dv = layer_backward(layer, cache, &dv, g);
    }
    Ok(dv)
}

/// Exact gradients of the (unscaled) single-sample loss.
pub fn backward(trace: &ForwardTrace, params: &HeadParams, label: Label) -> Result<(HeadParams, Array2<f64>)> {
    let mut grads = params.zeros_like();
    let dx = backward_into(trace, params, label, 1.0, &mut grads)?;
    Ok((grads, dx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Stacked Bi-LSTM layers; 1 is the standard head.
    pub layers: usize,
    pub gate: GateMode,
    pub keep_prob: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 32,
            layers: 1,
            gate: GateMode::Learned,
            keep_prob: 0.5,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 || self.layers < 1 {
            return Err(Error::invalid("head hidden size and layer count must be positive"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::invalid("keep_prob must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(len: usize, d: usize, seed: u64) -> ContextualFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContextualFeatures(Array2::from_shape_simple_fn((len, d), || rng.gen_range(-1.0..1.0)))
    }

    fn eval() -> ForwardOptions {
        ForwardOptions::eval(GateMode::Learned)
    }

    #[test]
    fn init_rules() {
        let a = init_params(8, 4, 1);
        assert_eq!(a, init_params(8, 4, 1));
        let l = &a.layers[0];
        assert!(l.fwd.bias_block(1).iter().all(|&b| b == 1.0));
        assert!(l.fwd.bias_block(0).iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(l.fwd.input_block(0).iter().all(|v| v.abs() <= bound));
        assert_eq!(l.fwd.w.dim(), (16, 8));
    }

    #[test]
    fn zero_filter_weights_halve_states() {
        let mut p = init_params(6, 3, 2);
        p.w_fc.fill(0.0);
        p.b_fc.fill(0.0);
        let t = forward(&features(4, 6, 0), &p, &eval()).unwrap();
        assert!(t.w.iter().all(|&w| w == 0.5));
        assert_eq!(t.g, &t.v * 0.5);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut p = init_params(6, 3, 2);
        p.w_cls.fill(0.0);
        p.b_cls.fill(0.0);
        let t = forward(&features(4, 6, 0), &p, &eval()).unwrap();
        assert_eq!(t.pred, [0.5, 0.5]);
    }

    #[test]
    fn zero_dynamics_give_zero_states() {
        let mut p = init_params(6, 3, 2);
        let l = &mut p.layers[0];
        for d in [&mut l.fwd, &mut l.bwd] {
            d.w.fill(0.0);
            d.u.fill(0.0);
            d.b.fill(0.0);
        }
        let t = forward(&features(1, 6, 0), &p, &eval()).unwrap();
        assert!(t.v.iter().all(|&x| x == 0.0));
        assert!(t.g_pooled.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_values() {
        assert!((loss_ce([0.5, 0.5], Label::Stego) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_ce([0.0, 1.0], Label::Stego) < 1e-11);
        assert!((loss_ce([0.9, 0.1], Label::Stego) - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(loss_ce([1.0, 0.0], Label::Stego).is_finite());
    }

    #[test]
    fn logit_gradient_is_pred_minus_onehot() {
        let p = init_params(5, 3, 9);
        let f = features(3, 5, 9);
        let t = forward(&f, &p, &eval()).unwrap();
        let (g, _) = backward(&t, &p, Label::Stego).unwrap();
        assert_eq!(g.b_cls[0], t.pred[0]);
        assert_eq!(g.b_cls[1], t.pred[1] - 1.0);
    }

    #[test]
    fn trace_invariants_hold() {
        let p = init_params(8, 4, 5);
        for s in 0..20 {
            let t = forward(&features(1 + s as usize % 7, 8, s), &p, &eval()).unwrap();
            assert!((t.pred[0] + t.pred[1] - 1.0).abs() < 1e-9);
            assert!(t.pred.iter().all(|&q| q > 0.0 && q < 1.0));
            assert!(t.w.iter().all(|&w| w > 0.0 && w < 1.0));
            assert!(t.g.iter().zip(&t.v).all(|(g, v)| g.abs() <= v.abs()));
        }
    }

    #[test]
    fn gate_bypass_equals_forced_ones() {
        let p = HeadParams::init(8, 4, 2, 3);
        let f = features(6, 8, 1);
        let a = forward(&f, &p, &ForwardOptions::eval(GateMode::Bypass)).unwrap();
        let b = forward(&f, &p, &ForwardOptions::eval(GateMode::ForcedOnes)).unwrap();
        assert_eq!(a.g, b.g);
        assert_eq!(a.pred, b.pred);
        assert_eq!(a.g, a.v);
    }

    #[test]
    fn mean_pooling_ignores_order_without_dynamics() {
        let mut p = init_params(4, 2, 0);
        let l = &mut p.layers[0];
        for d in [&mut l.fwd, &mut l.bwd] {
            d.u.fill(0.0);
            let h = d.hidden();
            d.b.slice_mut(s![h..2 * h]).fill(-1e3);
        }
        let f = features(5, 4, 3);
        let rev = ContextualFeatures(reverse_rows(&f.0));
        let a = forward(&f, &p, &eval()).unwrap();
        let b = forward(&rev, &p, &eval()).unwrap();
        for (x, y) in a.g_pooled.iter().zip(&b.g_pooled) {
            assert!((x - y).abs() < 1e-12);
        }
        let p2 = init_params(4, 2, 0);
        let c = forward(&f, &p2, &eval()).unwrap();
        let d = forward(&rev, &p2, &eval()).unwrap();
        assert!(c.g_pooled.iter().zip(&d.g_pooled).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let p = init_params(6, 3, 4);
        let f = features(5, 6, 2);
        let base = forward(&f, &p, &eval()).unwrap().g_pooled;
        let n = 10_000;
        let mut sum = Array1::<f64>::zeros(base.len());
        let mut sq = Array1::<f64>::zeros(base.len());
        for s in 0..n {
            let opts = ForwardOptions {
                mode: Mode::Train,
                gate: GateMode::Learned,
                keep_prob: 0.5,
                dropout_seed: s,
            };
            let t = forward(&f, &p, &opts).unwrap();
            sum += &t.classifier_input;
            sq += &t.classifier_input.mapv(|x| x * x);
        }
        for j in 0..base.len() {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - base[j]).abs() <= 3.0 * se + 1e-12,
                "dim {j}: {mean} vs {}",
                base[j]
            );
        }
        // eval mode is deterministic
        assert_eq!(
            forward(&f, &p, &eval()).unwrap().pred,
            forward(&f, &p, &eval()).unwrap().pred
        );
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let p = init_params(6, 3, 4);
        assert!(matches!(
            forward(&features(3, 5, 0), &p, &eval()),
            Err(Error::Contract(_))
        ));
        let t = forward(&features(3, 6, 0), &p, &eval()).unwrap();
        let other = init_params(6, 4, 4);
        let mut g = other.zeros_like();
        assert!(backward_into(&t, &other, Label::Cover, 1.0, &mut g).is_err());
    }

    #[test]
    fn non_finite_features_are_reported() {
        let p = init_params(3, 2, 4);
        let mut f = features(2, 3, 0);
        f.0[[0, 0]] = f64::NAN;
        assert!(matches!(forward(&f, &p, &eval()), Err(Error::Numeric("bilstm"))));
    }
}
