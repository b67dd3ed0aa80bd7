//! Encoder-decoder transformer with vanilla and mesh input modes.
//!
//! Vanilla mode encodes one hypothesis and decodes against its states. Mesh
//! mode encodes all four hypotheses with the same encoder, pads them to a
//! common length `T`, and fuses them per position `j`:
//!
//! ```text
//! alpha_i(j) = softmax over hypotheses valid at j of  w_attn . S_i(j)
//! F(j)       = sum_i alpha_i(j) S_i(j)
//! ```
//!
//! The decoder then cross-attends over `F` under the union of the four masks.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{cast, Float, Tape, Var};
use crate::error::{Error, Result};
use crate::hypothesis::{self, HypothesisKind};
use crate::session::SessionRecord;
use crate::tokenizer::{pad_batch, TokenSequence, Vocab, BOS};

pub const N_HYPOTHESES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Mesh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub mode: Mode,
    pub positions: PositionEncoding,
    /// Adds a scalar bias to the mesh attention logits.
    pub mesh_bias: bool,
    /// Hypothesis fed to the encoder in vanilla mode.
    pub input_hypothesis: HypothesisKind,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_positions: 128,
            vocab_size: 4096,
            dropout_rate: 0.1,
            mode: Mode::Mesh,
            positions: PositionEncoding::Learned,
            mesh_bias: false,
            input_hypothesis: HypothesisKind::K1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LnIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln_attn: LnIdx,
    attn: AttnIdx,
    ln_ffn: LnIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln_self: LnIdx,
    self_attn: AttnIdx,
    ln_cross: LnIdx,
    cross_attn: AttnIdx,
    ln_ffn: LnIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    enc_pos: Option<usize>,
    dec_pos: Option<usize>,
    enc: Vec<EncLayer>,
    enc_ln: LnIdx,
    dec: Vec<DecLayer>,
    dec_ln: LnIdx,
    mesh_w: Option<usize>,
    mesh_b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: (usize, usize),
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            gain: self.add(format!("{prefix}.gain"), (1, d), Init::Ones),
            bias: self.add(format!("{prefix}.bias"), (1, d), Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mut lin = |n: &str| {
            (
                self.add(format!("{prefix}.{n}.weight"), (d, d), Init::Normal),
                self.add(format!("{prefix}.{n}.bias"), (1, d), Init::Zeros),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("out");
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.fc1.weight"), (d, d_ff), Init::Normal),
            b1: self.add(format!("{prefix}.fc1.bias"), (1, d_ff), Init::Zeros),
            w2: self.add(format!("{prefix}.fc2.weight"), (d_ff, d), Init::Normal),
            b2: self.add(format!("{prefix}.fc2.bias"), (1, d), Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let tok_emb = b.add("embed.tokens".into(), (cfg.vocab_size, d), Init::Normal);
    let learned = cfg.positions == PositionEncoding::Learned;
    let enc_pos = learned.then(|| {
        b.add(
            "encoder.positions".into(),
            (cfg.max_positions, d),
            Init::Normal,
        )
    });
    let dec_pos = learned.then(|| {
        b.add(
            "decoder.positions".into(),
            (cfg.max_positions, d),
            Init::Normal,
        )
    });
    let enc = (0..cfg.n_enc_layers)
        .map(|l| {
            let p = format!("encoder.layers.{l}");
            EncLayer {
                ln_attn: b.ln(&format!("{p}.ln_attn"), d),
                attn: b.attn(&format!("{p}.self_attn"), d),
                ln_ffn: b.ln(&format!("{p}.ln_ffn"), d),
                ffn: b.ffn(&p, d, cfg.d_ff),
            }
        })
        .collect();
    let enc_ln = b.ln("encoder.ln_final", d);
    let dec = (0..cfg.n_dec_layers)
        .map(|l| {
            let p = format!("decoder.layers.{l}");
            DecLayer {
                ln_self: b.ln(&format!("{p}.ln_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_cross: b.ln(&format!("{p}.ln_cross"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln_ffn: b.ln(&format!("{p}.ln_ffn"), d),
                ffn: b.ffn(&p, d, cfg.d_ff),
            }
        })
        .collect();
    let dec_ln = b.ln("decoder.ln_final", d);
    let mesh = cfg.mode == Mode::Mesh;
    let mesh_w = mesh.then(|| b.add("mesh.w_attn".into(), (d, 1), Init::Normal));
    let mesh_b = (mesh && cfg.mesh_bias).then(|| b.add("mesh.bias".into(), (1, 1), Init::Zeros));
    (
        Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            mesh_w,
            mesh_b,
        },
        b.specs,
    )
}

/// Encoder output `S` for one hypothesis: `T x d_model` states and validity.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisEncoding<F> {
    pub states: Array2<F>,
    pub mask: Vec<bool>,
}

/// Decoder memory: fused states, union mask, and the mesh weights when present.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshedSequence<F> {
    pub fused: Array2<F>,
    pub union_mask: Vec<bool>,
    /// `4 x T` attention weights, zero where a hypothesis is invalid.
    pub attn_weights: Option<Array2<F>>,
    /// `4 x T` per-hypothesis validity.
    pub hypothesis_mask: Option<Array2<bool>>,
}

impl<F: Float> MeshedSequence<F> {
    pub fn len(&self) -> usize {
        self.union_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.union_mask.is_empty()
    }
}

/// Encoder inputs and the `BOS .. EOS` target of one training session.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Vec<TokenSequence>,
    pub target: TokenSequence,
}

impl Example {
    /// Number of predicted target tokens.
    pub fn target_tokens(&self) -> usize {
        self.target.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serializable model: configuration header plus named parameter tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamBlob>,
}

const MODEL_FORMAT: &str = "meshquery-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Model<F: Float> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Array2<F>>,
}

fn sinusoidal<F: Float>(rows: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((rows, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        cast(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<F: Float> Model<F> {
    /// Random initialization: normal(0, init_std) weights, zero biases, unit gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal => {
                    Array2::from_shape_simple_fn(s.shape, || cast(normal.sample(&mut rng)))
                }
                Init::Zeros => Array2::zeros(s.shape),
                Init::Ones => Array2::ones(s.shape),
            })
            .collect();
        Ok(Model {
            config,
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn params(&self) -> &[Array2<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Array2<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    /// Mesh attention map `w_attn` (`d_model x 1`), absent in vanilla mode.
    pub fn w_attn(&self) -> Option<&Array2<F>> {
        self.layout.mesh_w.map(|i| &self.params[i])
    }

    pub fn token_embeddings(&self) -> ArrayView2<'_, F> {
        self.params[self.layout.tok_emb].view()
    }

    /// Same shared parameters under another mode. Switching to mesh adds a
    /// fresh `w_attn` drawn with `seed`; switching to vanilla drops it.
    pub fn with_mode(&self, mode: Mode, seed: u64) -> Result<Model<F>> {
        let mut config = self.config.clone();
        config.mode = mode;
        let mut out = Model::new(config, seed)?;
        for (name, value) in self.names.iter().zip(&self.params) {
            if let Some(slot) = out.param_mut(name) {
                slot.assign(value);
            }
        }
        Ok(out)
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, p)| ParamBlob {
                    name: name.clone(),
                    rows: p.nrows(),
                    cols: p.ncols(),
                    data: p.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                })
                .collect(),
        }
    }

    pub fn from_state(state: &ModelState) -> Result<Self> {
        if state.format != MODEL_FORMAT || state.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                state.format, state.version
            )));
        }
        let mut model = Model::new(state.config.clone(), 0)?;
        if state.params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameter tables, configuration expects {}",
                state.params.len(),
                model.params.len()
            )));
        }
        for ((name, slot), blob) in model
            .names
            .iter()
            .zip(model.params.iter_mut())
            .zip(&state.params)
        {
            if *name != blob.name
                || slot.dim() != (blob.rows, blob.cols)
                || blob.data.len() != blob.rows * blob.cols
            {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} does not match layout",
                    blob.name
                )));
            }
            for (v, &x) in slot.iter_mut().zip(&blob.data) {
                *v = cast(x);
            }
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.state())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_state(&serde_json::from_str(text)?)
    }

    /// Encoder inputs for a held-out session: four hypotheses padded to a
    /// common length in mesh mode, the configured one in vanilla mode.
    pub fn model_inputs(
        &self,
        session: &SessionRecord,
        vocab: &Vocab,
    ) -> Result<Vec<TokenSequence>> {
        match self.config.mode {
            Mode::Mesh => {
                let seqs: Vec<TokenSequence> = hypothesis::build_all(session)?
                    .iter()
                    .map(|h| vocab.encode_hypothesis(h))
                    .collect();
                let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
                pad_batch(&seqs, t)
            }
            Mode::Vanilla => {
                let h = hypothesis::build_hypothesis(session, self.config.input_hypothesis)?;
                Ok(vec![vocab.encode_hypothesis(&h)])
            }
        }
    }

    pub fn example(&self, session: &SessionRecord, vocab: &Vocab) -> Result<Example> {
        Ok(Example {
            inputs: self.model_inputs(session, vocab)?,
            target: vocab.encode_target(session.ground_truth()?),
        })
    }

    fn graph(&self, dropout_seed: Option<u64>) -> Forward<'_, F> {
        let mut tape = Tape::new();
        let params = self
            .params
            .iter()
            .map(|p| tape.leaf_view(p.view()))
            .collect();
        Forward {
            model: self,
            tape,
            params,
            dropout: dropout_seed
                .filter(|_| self.config.dropout_rate > 0.0)
                .map(ChaCha8Rng::seed_from_u64),
        }
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<HypothesisEncoding<F>> {
        let mut g = self.graph(None);
        let s = g.encode(seq)?;
        Ok(HypothesisEncoding {
            states: g.tape.value(s).to_owned(),
            mask: seq.mask.clone(),
        })
    }

    /// Decoder memory for prepared inputs (see [`Model::model_inputs`]).
    pub fn memory(&self, inputs: &[TokenSequence]) -> Result<MeshedSequence<F>> {
        let mut g = self.graph(None);
        let mem = g.memory(inputs)?;
        Ok(MeshedSequence {
            fused: g.tape.value(mem.states).to_owned(),
            union_mask: mem.mask,
            attn_weights: mem.alpha.map(|a| g.tape.value(a).t().to_owned()),
            hypothesis_mask: mem.hyp_mask.map(|m| m.t().to_owned()),
        })
    }

    /// Fuses four encodings with this model's `w_attn`.
    pub fn mesh_fuse(&self, encodings: &[HypothesisEncoding<F>]) -> Result<MeshedSequence<F>> {
        let w = self
            .w_attn()
            .ok_or_else(|| Error::Config("mesh_fuse needs a mesh-mode model".into()))?;
        let bias = self.layout.mesh_b.map(|i| self.params[i][[0, 0]]);
        mesh_fuse_with_bias(encodings, w.view(), bias)
    }

    /// Next-token logits after `prefix` (which starts with BOS).
    pub fn decode_step(&self, meshed: &MeshedSequence<F>, prefix: &[u32]) -> Result<Vec<F>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Precondition(
                "decoder prefix must start with BOS".into(),
            ));
        }
        let mut g = self.graph(None);
        let mem = g.tape.leaf_view(meshed.fused.view());
        let logits = g.decode(mem, &meshed.union_mask, prefix)?;
        let v = g.tape.value(logits);
        Ok(v.row(v.nrows() - 1).to_vec())
    }

    /// Summed target cross entropy and target token count of one example,
    /// with gradients when `grads` is set.
    fn example_pass(
        &self,
        ex: &Example,
        dropout_seed: Option<u64>,
        grads: bool,
    ) -> Result<(F, usize, Option<Vec<Array2<F>>>)> {
        let n = ex.target.len();
        if n < 2 {
            return Err(Error::Precondition(
                "target needs at least BOS and EOS".into(),
            ));
        }
        let mut g = self.graph(dropout_seed);
        let mem = g.memory(&ex.inputs)?;
        let logits = g.decode(mem.states, &mem.mask, &ex.target.ids[..n - 1])?;
        let targets: Vec<usize> = ex.target.ids[1..].iter().map(|&t| t as usize).collect();
        let loss = g.tape.cross_entropy_sum(logits, &targets)?;
        let value = g.tape.value(loss)[[0, 0]];
        let grads = if grads {
            let mut all = g.tape.backward(loss)?;
            Some(
                g.params
                    .iter()
                    .zip(&self.params)
                    .map(|(&v, p)| all.take(v).unwrap_or_else(|| Array2::zeros(p.dim())))
                    .collect(),
            )
        } else {
            None
        };
        Ok((value, n - 1, grads))
    }

    /// Mean token cross entropy over the batch (teacher forcing, no dropout).
    pub fn forward_loss(&self, batch: &[Example]) -> Result<F> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let parts: Vec<(F, usize)> = batch
            .par_iter()
            .map(|ex| self.example_pass(ex, None, false).map(|(l, n, _)| (l, n)))
            .collect::<Result<_>>()?;
        let (sum, count) = parts
            .iter()
            .fold((F::zero(), 0usize), |(s, c), (l, n)| (s + *l, c + n));
        Ok(sum / cast(count as f64))
    }

    /// Mean token cross entropy and its gradient for every parameter.
    ///
    /// `dropout_seeds[i]` seeds the dropout masks of example `i`; `None`
    /// disables dropout. Per-example passes run in parallel and are reduced
    /// in batch order, so the result does not depend on thread count.
    pub fn loss_and_grads(
        &self,
        batch: &[Example],
        dropout_seeds: Option<&[u64]>,
    ) -> Result<(F, Vec<Array2<F>>)> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        if dropout_seeds.is_some_and(|s| s.len() != batch.len()) {
            return Err(Error::Precondition("one dropout seed per example".into()));
        }
        let parts: Vec<(F, usize, Vec<Array2<F>>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let (l, n, g) = self.example_pass(ex, dropout_seeds.map(|s| s[i]), true)?;
                Ok((l, n, g.expect("gradients requested")))
            })
            .collect::<Result<_>>()?;
        let count: usize = parts.iter().map(|p| p.1).sum();
        let inv = F::one() / cast(count as f64);
        let mut loss = F::zero();
        let mut total: Vec<Array2<F>> =
            self.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        for (l, _, grads) in parts {
            loss += l;
            for (t, g) in total.iter_mut().zip(&grads) {
                *t += g;
            }
        }
        for t in &mut total {
            t.mapv_inplace(|v| v * inv);
        }
        Ok((loss * inv, total))
    }

    /// Per-example mean token cross entropy, without dropout.
    pub fn example_loss(&self, ex: &Example) -> Result<F> {
        let (l, n, _) = self.example_pass(ex, None, false)?;
        Ok(l / cast(n as f64))
    }
}

/// Free-standing mesh fusion of four encodings that share one length `T`.
pub fn mesh_fuse<F: Float>(
    encodings: &[HypothesisEncoding<F>],
    w_attn: ArrayView2<F>,
) -> Result<MeshedSequence<F>> {
    mesh_fuse_with_bias(encodings, w_attn, None)
}

fn mesh_fuse_with_bias<F: Float>(
    encodings: &[HypothesisEncoding<F>],
    w_attn: ArrayView2<F>,
    bias: Option<F>,
) -> Result<MeshedSequence<F>> {
    let mut tape = Tape::new();
    let w = tape.leaf_view(w_attn);
    let b = bias.map(|b| tape.leaf(Array2::from_elem((1, 1), b)));
    let states: Vec<Var> = encodings
        .iter()
        .map(|e| tape.leaf_view(e.states.view()))
        .collect();
    let masks: Vec<&[bool]> = encodings.iter().map(|e| e.mask.as_slice()).collect();
    let fused = fuse(&mut tape, &states, &masks, w, b)?;
    Ok(MeshedSequence {
        fused: tape.value(fused.states).to_owned(),
        union_mask: fused.mask,
        attn_weights: fused.alpha.map(|a| tape.value(a).t().to_owned()),
        hypothesis_mask: fused.hyp_mask.map(|m| m.t().to_owned()),
    })
}

struct Memory {
    states: Var,
    mask: Vec<bool>,
    /// `T x 4`
    alpha: Option<Var>,
    /// `T x 4`
    hyp_mask: Option<Array2<bool>>,
}

fn fuse<F: Float>(
    tape: &mut Tape<'_, F>,
    states: &[Var],
    masks: &[&[bool]],
    w: Var,
    bias: Option<Var>,
) -> Result<Memory> {
    if states.len() != N_HYPOTHESES || masks.len() != N_HYPOTHESES {
        return Err(Error::Shape(format!(
            "mesh fusion expects {N_HYPOTHESES} encodings, got {}",
            states.len()
        )));
    }
    let (t, d) = tape.shape(states[0]);
    for (s, m) in states.iter().zip(masks) {
        if tape.shape(*s) != (t, d) || m.len() != t {
            return Err(Error::Shape(format!(
                "hypothesis encodings must share T = {t}: got {:?} with mask length {}",
                tape.shape(*s),
                m.len()
            )));
        }
    }
    if tape.shape(w) != (d, 1) {
        return Err(Error::Shape(format!(
            "w_attn must be {d} x 1, got {:?}",
            tape.shape(w)
        )));
    }
    let mut logits = Vec::with_capacity(N_HYPOTHESES);
    for &s in states {
        let l = tape.matmul(s, w)?;
        logits.push(match bias {
            Some(b) => tape.add_row(l, b)?,
            None => l,
        });
    }
    let logits = tape.concat_cols(&logits)?;
    let valid = Array2::from_shape_fn((t, N_HYPOTHESES), |(j, i)| masks[i][j]);
    let alpha = tape.masked_softmax(logits, &valid)?;
    let mut acc: Option<Var> = None;
    for (i, &s) in states.iter().enumerate() {
        let a = tape.slice_cols(alpha, i, 1)?;
        let weighted = tape.mul_col(s, a)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, weighted)?,
            None => weighted,
        });
    }
    let union_mask = (0..t).map(|j| masks.iter().any(|m| m[j])).collect();
    Ok(Memory {
        states: acc.expect("four hypotheses"),
        mask: union_mask,
        alpha: Some(alpha),
        hyp_mask: Some(valid),
    })
}

struct Forward<'a, F: Float> {
    model: &'a Model<F>,
    tape: Tape<'a, F>,
    params: Vec<Var>,
    dropout: Option<ChaCha8Rng>,
}

impl<'a, F: Float> Forward<'a, F> {
    fn p(&self, idx: usize) -> Var {
        self.params[idx]
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.config.dropout_rate;
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let scale: F = cast(1.0 / (1.0 - rate));
        let keep = Array2::from_shape_simple_fn(self.tape.shape(x), || {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                scale
            }
        });
        self.tape.dropout(x, keep)
    }

    fn layer_norm(&mut self, x: Var, ln: LnIdx) -> Result<Var> {
        let (g, b) = (self.p(ln.gain), self.p(ln.bias));
        self.tape.layer_norm(x, g, b)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = self.tape.matmul(x, self.params[w])?;
        self.tape.add_row(y, self.params[b])
    }

    /// Multi-head attention of `xq` over `xkv`; `mask[i][j]` allows query `i` to see key `j`.
    fn attention(&mut self, xq: Var, xkv: Var, a: AttnIdx, mask: &Array2<bool>) -> Result<Var> {
        let q = self.linear(xq, a.wq, a.bq)?;
        let k = self.linear(xkv, a.wk, a.bk)?;
        let v = self.linear(xkv, a.wv, a.bv)?;
        let heads = self.model.config.n_heads;
        let dh = self.model.config.d_model / heads;
        let scale: F = cast(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let scores = self.tape.scale(scores, scale);
            let p = self.tape.masked_softmax(scores, mask)?;
            outs.push(self.tape.matmul(p, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            self.tape.concat_cols(&outs)?
        };
        self.linear(cat, a.wo, a.bo)
    }

    fn ffn(&mut self, x: Var, f: FfnIdx) -> Result<Var> {
        let h = self.linear(x, f.w1, f.b1)?;
        let h = self.tape.gelu(h);
        self.linear(h, f.w2, f.b2)
    }

    fn embed(&mut self, ids: &[u32], pos: Option<usize>) -> Result<Var> {
        let cfg = &self.model.config;
        if ids.len() > cfg.max_positions {
            return Err(Error::Overlong {
                len: ids.len(),
                limit: cfg.max_positions,
            });
        }
        if ids.is_empty() {
            return Err(Error::Precondition("empty token sequence".into()));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = self.tape.gather(self.p(self.model.layout.tok_emb), &idx)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        let p = match pos {
            Some(table) => self.tape.gather(self.p(table), &rows)?,
            None => self.tape.leaf(sinusoidal(ids.len(), cfg.d_model)),
        };
        let x = self.tape.add(x, p)?;
        self.dropout(x)
    }

    fn encode(&mut self, seq: &TokenSequence) -> Result<Var> {
        if seq.ids.len() != seq.mask.len() {
            return Err(Error::Shape("token ids and mask differ in length".into()));
        }
        let layout = &self.model.layout;
        let (enc_pos, enc_ln) = (layout.enc_pos, layout.enc_ln);
        let layers = layout.enc.clone();
        let mut x = self.embed(&seq.ids, enc_pos)?;
        let t = seq.len();
        let mask = Array2::from_shape_fn((t, t), |(_, j)| seq.mask[j]);
        for l in layers {
            let h = self.layer_norm(x, l.ln_attn)?;
            let h = self.attention(h, h, l.attn, &mask)?;
            let h = self.dropout(h)?;
            x = self.tape.add(x, h)?;
            let h = self.layer_norm(x, l.ln_ffn)?;
            let h = self.ffn(h, l.ffn)?;
            let h = self.dropout(h)?;
            x = self.tape.add(x, h)?;
        }
        self.layer_norm(x, enc_ln)
    }

    fn memory(&mut self, inputs: &[TokenSequence]) -> Result<Memory> {
        match self.model.config.mode {
            Mode::Vanilla => {
                let [seq] = inputs else {
                    return Err(Error::Shape(format!(
                        "vanilla mode takes 1 input, got {}",
                        inputs.len()
                    )));
                };
                Ok(Memory {
                    states: self.encode(seq)?,
                    mask: seq.mask.clone(),
                    alpha: None,
                    hyp_mask: None,
                })
            }
            Mode::Mesh => {
                if inputs.len() != N_HYPOTHESES {
                    return Err(Error::Shape(format!(
                        "mesh mode takes 4 inputs, got {}",
                        inputs.len()
                    )));
                }
                let t = inputs[0].len();
                if inputs.iter().any(|s| s.len() != t) {
                    return Err(Error::Shape(
                        "mesh inputs must be padded to a common length".into(),
                    ));
                }
                let states = inputs
                    .iter()
                    .map(|s| self.encode(s))
                    .collect::<Result<Vec<_>>>()?;
                let masks: Vec<&[bool]> = inputs.iter().map(|s| s.mask.as_slice()).collect();
                let layout = &self.model.layout;
                let w = self.p(layout.mesh_w.expect("mesh layout"));
                let b = layout.mesh_b.map(|i| self.p(i));
                fuse(&mut self.tape, &states, &masks, w, b)
            }
        }
    }

    /// Logits `[prefix_len x vocab]` for every prefix position.
    fn decode(&mut self, memory: Var, memory_mask: &[bool], prefix: &[u32]) -> Result<Var> {
        let (t_mem, _) = self.tape.shape(memory);
        if memory_mask.len() != t_mem {
            return Err(Error::Shape("memory mask length".into()));
        }
        let layout = &self.model.layout;
        let (dec_pos, dec_ln, tok) = (layout.dec_pos, layout.dec_ln, layout.tok_emb);
        let layers = layout.dec.clone();
        let mut y = self.embed(prefix, dec_pos)?;
        let n = prefix.len();
        let causal = Array2::from_shape_fn((n, n), |(i, j)| j <= i);
        let cross = Array2::from_shape_fn((n, t_mem), |(_, j)| memory_mask[j]);
        for l in layers {
            let h = self.layer_norm(y, l.ln_self)?;
            let h = self.attention(h, h, l.self_attn, &causal)?;
            let h = self.dropout(h)?;
            y = self.tape.add(y, h)?;
            let h = self.layer_norm(y, l.ln_cross)?;
            let h = self.attention(h, memory, l.cross_attn, &cross)?;
            let h = self.dropout(h)?;
            y = self.tape.add(y, h)?;
            let h = self.layer_norm(y, l.ln_ffn)?;
            let h = self.ffn(h, l.ffn)?;
            let h = self.dropout(h)?;
            y = self.tape.add(y, h)?;
        }
        let y = self.layer_norm(y, dec_ln)?;
        self.tape.matmul_nt(y, self.p(tok))
    }
}
