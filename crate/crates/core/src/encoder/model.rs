use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{code_token, tokenize, Lead, PAD};
use super::{EncoderConfig, EncoderError, Variant};
use crate::autodiff::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::types::{ControlCode, Document};

/// Ownership tag of a parameter; drives freezing, counting and hashing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Trunk,
    Code(ControlCode),
    Adapter(ControlCode),
    Pal(ControlCode),
    Fusion(ControlCode),
}

impl ParamGroup {
    /// The format a parameter is specific to, `None` for the shared trunk.
    pub fn code(self) -> Option<ControlCode> {
        match self {
            ParamGroup::Trunk => None,
            ParamGroup::Code(c) | ParamGroup::Adapter(c) | ParamGroup::Pal(c) | ParamGroup::Fusion(c) => Some(c),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Tensor>,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug)]
struct AdapterIdx {
    ln_g: usize,
    ln_b: usize,
    down_w: usize,
    down_b: usize,
    up_w: usize,
    up_b: usize,
}

#[derive(Clone, Debug)]
struct PalIdx {
    enc: usize,
    dec: usize,
    wq: usize,
    wk: usize,
    wv: usize,
}

#[derive(Clone, Debug)]
struct FusionIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tok: usize,
    pos: usize,
    emb_ln_g: usize,
    emb_ln_b: usize,
    layers: Vec<LayerIdx>,
    codes: Option<[usize; 4]>,
    /// Indexed `[code][layer]`.
    adapters: Option<Vec<Vec<AdapterIdx>>>,
    pals: Option<Vec<Vec<PalIdx>>>,
    fusion: Option<Vec<Vec<FusionIdx>>>,
}

/// Transformer trunk plus whatever format-specific modules are attached.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    cfg: EncoderConfig,
    params: Vec<Param>,
    layout: Layout,
}

struct Builder<'a> {
    params: &'a mut Vec<Param>,
    rng: ChaCha8Rng,
    std: f64,
}

impl Builder<'_> {
    fn add(&mut self, name: String, group: ParamGroup, t: Tensor) -> usize {
        self.params.push(Param { name, group, value: Arc::new(t) });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, group: ParamGroup, shape: &[usize]) -> usize {
        let t = Tensor::randn(shape, self.std, &mut self.rng);
        self.add(name, group, t)
    }

    fn zeros(&mut self, name: String, group: ParamGroup, shape: &[usize]) -> usize {
        self.add(name, group, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, group: ParamGroup, shape: &[usize]) -> usize {
        self.add(name, group, Tensor::filled(shape, 1.0))
    }

    fn identity(&mut self, name: String, group: ParamGroup, n: usize) -> usize {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        self.add(name, group, t)
    }
}

/// Mask bias added to attention scores at padded key positions.
const MASKED: f64 = -1e30;

impl EncoderModel {
    /// Builds the trunk and attaches the modules of `cfg.variant`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        let variant = cfg.variant;
        let mut model = Self::trunk(cfg, seed)?;
        if variant != Variant::ClsOnly {
            model.attach(variant, seed.wrapping_add(1))?;
        }
        Ok(model)
    }

    /// A bare trunk: token/position embeddings and transformer layers, no format modules.
    pub fn trunk(mut cfg: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        cfg.variant = Variant::ClsOnly;
        let (h, f) = (cfg.hidden, cfg.ffn);
        let mut params = Vec::new();
        let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed), std: cfg.init_std };
        let g = ParamGroup::Trunk;
        let tok = b.normal("embeddings.token".into(), g, &[cfg.vocab().rows(), h]);
        let pos = b.normal("embeddings.position".into(), g, &[cfg.max_len, h]);
        let emb_ln_g = b.ones("embeddings.ln.gain".into(), g, &[h]);
        let emb_ln_b = b.zeros("embeddings.ln.bias".into(), g, &[h]);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| format!("layer{l}.{s}");
                LayerIdx {
                    wq: b.normal(p("attn.wq"), g, &[h, h]),
                    bq: b.zeros(p("attn.bq"), g, &[h]),
                    wk: b.normal(p("attn.wk"), g, &[h, h]),
                    bk: b.zeros(p("attn.bk"), g, &[h]),
                    wv: b.normal(p("attn.wv"), g, &[h, h]),
                    bv: b.zeros(p("attn.bv"), g, &[h]),
                    wo: b.normal(p("attn.wo"), g, &[h, h]),
                    bo: b.zeros(p("attn.bo"), g, &[h]),
                    ln1_g: b.ones(p("ln1.gain"), g, &[h]),
                    ln1_b: b.zeros(p("ln1.bias"), g, &[h]),
                    w1: b.normal(p("ffn.w1"), g, &[h, f]),
                    b1: b.zeros(p("ffn.b1"), g, &[f]),
                    w2: b.normal(p("ffn.w2"), g, &[f, h]),
                    b2: b.zeros(p("ffn.b2"), g, &[h]),
                    ln2_g: b.ones(p("ln2.gain"), g, &[h]),
                    ln2_b: b.zeros(p("ln2.bias"), g, &[h]),
                }
            })
            .collect();
        let layout = Layout { tok, pos, emb_ln_g, emb_ln_b, layers, codes: None, adapters: None, pals: None, fusion: None };
        Ok(Self { cfg, params, layout })
    }

    /// Adds the format-specific modules of `variant`.
    ///
    /// A trunk accepts any variant; an adapter model additionally accepts
    /// `Fusion`, which keeps its adapters and adds fusion layers on top.
    pub fn attach(&mut self, variant: Variant, seed: u64) -> Result<(), EncoderError> {
        let current = self.variant();
        let allowed = current == Variant::ClsOnly || (current == Variant::Adapter && variant == Variant::Fusion);
        if !allowed || variant == Variant::ClsOnly {
            return Err(EncoderError::State(format!("cannot attach {variant} to a {current} model")));
        }
        let (h, bn, r, layers) = (self.cfg.hidden, self.cfg.bottleneck, self.cfg.pal_rank, self.cfg.layers);
        let mut b = Builder { params: &mut self.params, rng: ChaCha8Rng::seed_from_u64(seed), std: self.cfg.init_std };
        match variant {
            Variant::ClsOnly => unreachable!(),
            Variant::Ctrl => {
                let idx = ControlCode::ALL.map(|c| b.normal(format!("code.{c}"), ParamGroup::Code(c), &[h]));
                self.layout.codes = Some(idx);
            }
            Variant::Pals => {
                let pals = ControlCode::ALL
                    .iter()
                    .map(|&c| {
                        let g = ParamGroup::Pal(c);
                        (0..layers)
                            .map(|l| {
                                let p = |s: &str| format!("pal.{c}.layer{l}.{s}");
                                PalIdx {
                                    enc: b.normal(p("enc"), g, &[h, r]),
                                    dec: b.normal(p("dec"), g, &[r, h]),
                                    wq: b.normal(p("wq"), g, &[r, r]),
                                    wk: b.normal(p("wk"), g, &[r, r]),
                                    wv: b.normal(p("wv"), g, &[r, r]),
                                }
                            })
                            .collect()
                    })
                    .collect();
                self.layout.pals = Some(pals);
            }
            Variant::Adapter | Variant::Fusion => {
                if self.layout.adapters.is_none() {
                    let adapters = ControlCode::ALL
                        .iter()
                        .map(|&c| {
                            let g = ParamGroup::Adapter(c);
                            (0..layers)
                                .map(|l| {
                                    let p = |s: &str| format!("adapter.{c}.layer{l}.{s}");
                                    AdapterIdx {
                                        ln_g: b.ones(p("ln.gain"), g, &[h]),
                                        ln_b: b.zeros(p("ln.bias"), g, &[h]),
                                        down_w: b.normal(p("down.w"), g, &[h, bn]),
                                        down_b: b.zeros(p("down.b"), g, &[bn]),
                                        up_w: b.normal(p("up.w"), g, &[bn, h]),
                                        up_b: b.zeros(p("up.b"), g, &[h]),
                                    }
                                })
                                .collect()
                        })
                        .collect();
                    self.layout.adapters = Some(adapters);
                }
                if variant == Variant::Fusion {
                    let fusion = ControlCode::ALL
                        .iter()
                        .map(|&c| {
                            let g = ParamGroup::Fusion(c);
                            (0..layers)
                                .map(|l| {
                                    let p = |s: &str| format!("fusion.{c}.layer{l}.{s}");
                                    FusionIdx {
                                        wq: b.normal(p("wq"), g, &[h, h]),
                                        bq: b.zeros(p("bq"), g, &[h]),
                                        wk: b.normal(p("wk"), g, &[h, h]),
                                        bk: b.zeros(p("bk"), g, &[h]),
                                        wv: b.identity(p("wv"), g, h),
                                        bv: b.zeros(p("bv"), g, &[h]),
                                    }
                                })
                                .collect()
                        })
                        .collect();
                    self.layout.fusion = Some(fusion);
                }
            }
        }
        self.cfg.variant = variant;
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn hidden(&self) -> usize {
        self.cfg.hidden
    }

    /// Number of trainable parameters specific to the format of `code`.
    pub fn param_count(&self, code: ControlCode) -> usize {
        self.params.iter().filter(|p| p.group.code() == Some(code)).map(|p| p.value.numel()).sum()
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names and little-endian values of the selected parameters.
    pub fn hash_params(&self, select: impl Fn(ParamGroup) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| select(p.group)) {
            hasher.update(p.name.as_bytes());
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Token at position 0 for an input destined for `code`.
    pub fn lead_for(&self, code: ControlCode) -> Lead {
        if self.variant() == Variant::Ctrl {
            Lead::Code(code)
        } else {
            Lead::Cls
        }
    }

    /// Registers every parameter on `tape`; `trainable` decides which ones get gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf_shared(Arc::clone(&p.value), trainable(p.group))).collect()
    }

    fn linear(tape: &mut Tape, vars: &[Var], x: Var, w: usize, b: usize) -> Result<Var, EncoderError> {
        let y = tape.matmul(x, vars[w])?;
        Ok(tape.add(y, vars[b])?)
    }

    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var, EncoderError> {
        let width = tape.value(q).cols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                (tape.slice_cols(q, s, e)?, tape.slice_cols(k, s, e)?, tape.slice_cols(v, s, e)?)
            };
            let scores = tape.matmul_t(qh, kh)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let probs = tape.softmax(scores);
            outs.push(tape.matmul(probs, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            Ok(tape.concat_cols(&outs)?)
        }
    }

    fn adapter(&self, tape: &mut Tape, vars: &[Var], a: &AdapterIdx, f: Var) -> Result<Var, EncoderError> {
        let n = tape.layer_norm(f, vars[a.ln_g], vars[a.ln_b], LAYER_NORM_EPS)?;
        let d = Self::linear(tape, vars, n, a.down_w, a.down_b)?;
        let d = tape.gelu(d);
        let u = Self::linear(tape, vars, d, a.up_w, a.up_b)?;
        Ok(tape.add(f, u)?)
    }

    fn fusion(&self, tape: &mut Tape, vars: &[Var], code: ControlCode, layer: usize, f: Var) -> Result<Var, EncoderError> {
        let adapters = self.layout.adapters.as_ref().expect("fusion models carry adapters");
        let fz = &self.layout.fusion.as_ref().expect("fusion layout")[code.index()][layer];
        let q = Self::linear(tape, vars, f, fz.wq, fz.bq)?;
        let scale = 1.0 / (self.cfg.hidden as f64).sqrt();
        let mut scores = Vec::with_capacity(4);
        let mut values = Vec::with_capacity(4);
        for stack in adapters {
            let o = self.adapter(tape, vars, &stack[layer], f)?;
            let k = Self::linear(tape, vars, o, fz.wk, fz.bk)?;
            let v = Self::linear(tape, vars, o, fz.wv, fz.bv)?;
            let s = tape.row_dot(q, k)?;
            scores.push(tape.scale(s, scale));
            values.push(v);
        }
        // [4, T] -> [T, 4], softmax over the four adapters at each position.
        let s = tape.stack_rows(&scores)?;
        let s = tape.transpose(s)?;
        let w = tape.softmax(s);
        let mut out: Option<Var> = None;
        for (j, &v) in values.iter().enumerate() {
            let wj = tape.col(w, j)?;
            let term = tape.row_scale(v, wj)?;
            out = Some(match out {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(out.expect("four adapters"))
    }

    #[allow(clippy::too_many_arguments)]
    fn pal(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        code: ControlCode,
        layer: usize,
        x: Var,
        query_rows: Var,
        mask: Option<Var>,
    ) -> Result<Var, EncoderError> {
        let p = &self.layout.pals.as_ref().expect("pal layout")[code.index()][layer];
        let xe = tape.matmul(x, vars[p.enc])?;
        let qe = tape.matmul(query_rows, vars[p.enc])?;
        let q = tape.matmul(qe, vars[p.wq])?;
        let k = tape.matmul(xe, vars[p.wk])?;
        let v = tape.matmul(xe, vars[p.wv])?;
        let o = self.attention(tape, q, k, v, 1, mask)?;
        Ok(tape.matmul(o, vars[p.dec])?)
    }

    fn check_route(&self, route: Option<ControlCode>) -> Result<Option<ControlCode>, EncoderError> {
        if self.variant().routes_by_format() {
            route
                .map(Some)
                .ok_or_else(|| EncoderError::Routing(format!("{} model needs a format to route through", self.variant())))
        } else {
            Ok(None)
        }
    }

    /// Records the encoder on `tape` and returns the `[H]` embedding at position 0.
    ///
    /// `vars` must come from [`EncoderModel::bind`] on the same tape. `route`
    /// selects the per-format modules of adapter, PAL and fusion models and is
    /// ignored otherwise.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], ids: &[usize], route: Option<ControlCode>) -> Result<Var, EncoderError> {
        let t = ids.len();
        if t == 0 || t > self.cfg.max_len {
            return Err(EncoderError::Routing(format!("sequence length {t} outside 1..={}", self.cfg.max_len)));
        }
        let rows = self.cfg.vocab().rows();
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(EncoderError::Routing(format!("token id {bad} outside vocabulary of {rows}")));
        }
        let route = self.check_route(route)?;
        let lead_code = ControlCode::ALL.into_iter().find(|&c| code_token(c) == ids[0]);
        let tokens = match (lead_code, self.layout.codes) {
            (Some(c), Some(codes)) => {
                let first = vars[codes[c.index()]];
                if t > 1 {
                    let rest = tape.gather_rows(vars[self.layout.tok], &ids[1..])?;
                    tape.stack_rows(&[first, rest])?
                } else {
                    tape.stack_rows(&[first])?
                }
            }
            (Some(c), None) => {
                return Err(EncoderError::Routing(format!("input leads with [{c}] but the model has no control codes")));
            }
            (None, _) => tape.gather_rows(vars[self.layout.tok], ids)?,
        };
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(vars[self.layout.pos], &positions)?;
        let x = tape.add(tokens, pos)?;
        let mut x = tape.layer_norm(x, vars[self.layout.emb_ln_g], vars[self.layout.emb_ln_b], LAYER_NORM_EPS)?;

        let mask = if ids.contains(&PAD) {
            let bias = ids.iter().map(|&i| if i == PAD { MASKED } else { 0.0 }).collect();
            Some(tape.constant(Tensor::vector(bias)))
        } else {
            None
        };

        let n_layers = self.layout.layers.len();
        for (l, ly) in self.layout.layers.iter().enumerate() {
            // Only position 0 is read after the last layer, so its queries and
            // row-wise blocks are computed for that row alone.
            let query_rows = if l + 1 == n_layers {
                let r = tape.row(x, 0)?;
                tape.stack_rows(&[r])?
            } else {
                x
            };
            let q = Self::linear(tape, vars, query_rows, ly.wq, ly.bq)?;
            let k = Self::linear(tape, vars, x, ly.wk, ly.bk)?;
            let v = Self::linear(tape, vars, x, ly.wv, ly.bv)?;
            let attn = self.attention(tape, q, k, v, self.cfg.heads, mask)?;
            let attn = Self::linear(tape, vars, attn, ly.wo, ly.bo)?;
            let mut resid = tape.add(query_rows, attn)?;
            if let (Variant::Pals, Some(code)) = (self.variant(), route) {
                let pal = self.pal(tape, vars, code, l, x, query_rows, mask)?;
                resid = tape.add(resid, pal)?;
            }
            let a = tape.layer_norm(resid, vars[ly.ln1_g], vars[ly.ln1_b], LAYER_NORM_EPS)?;
            let hdn = Self::linear(tape, vars, a, ly.w1, ly.b1)?;
            let hdn = tape.gelu(hdn);
            let mut f = Self::linear(tape, vars, hdn, ly.w2, ly.b2)?;
            match (self.variant(), route) {
                (Variant::Adapter, Some(code)) => {
                    let ad = &self.layout.adapters.as_ref().expect("adapter layout")[code.index()][l];
                    f = self.adapter(tape, vars, ad, f)?;
                }
                (Variant::Fusion, Some(code)) => f = self.fusion(tape, vars, code, l, f)?,
                _ => {}
            }
            let out = tape.add(a, f)?;
            x = tape.layer_norm(out, vars[ly.ln2_g], vars[ly.ln2_b], LAYER_NORM_EPS)?;
        }
        Ok(tape.row(x, 0)?)
    }

    /// Inference-only embedding of a token sequence.
    pub fn encode(&self, ids: &[usize], route: Option<ControlCode>) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &vars, ids, route)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Tokenizes `doc` for `code` (lead token per variant) and encodes it.
    pub fn embed(&self, doc: &Document, code: ControlCode, with_metadata: bool) -> Result<Vec<f64>, EncoderError> {
        let seq = tokenize(doc, self.lead_for(code), &self.cfg, with_metadata)?;
        self.encode(seq.trimmed(), Some(code))
    }

    /// Embeds many documents in parallel; output order follows `docs`.
    pub fn embed_all(&self, docs: &[&Document], code: ControlCode, with_metadata: bool) -> Result<Vec<Vec<f64>>, EncoderError> {
        docs.par_iter().map(|d| self.embed(d, code, with_metadata)).collect()
    }

    /// Replaces parameter values, keeping names, groups and shapes.
    pub(crate) fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<(), EncoderError> {
        if values.len() != self.params.len() {
            return Err(EncoderError::Checkpoint(format!("expected {} parameters, found {}", self.params.len(), values.len())));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(EncoderError::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Arc::new(t);
        }
        Ok(())
    }
}
