use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DaVector, TokenId, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::numkit::rng::rng_for;
use crate::numkit::{argmax, log_softmax, sigmoid, softmax_unchecked, Checkpoint, Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Control-vector size; 0 gives a plain LSTM language model.
    pub da_dim: usize,
    pub layers: usize,
    /// Inverted dropout on layer inputs, training only.
    pub dropout: f64,
}

impl GeneratorConfig {
    pub fn desk(vocab: usize, da_dim: usize) -> Self {
        GeneratorConfig {
            vocab,
            embed: 32,
            hidden: 64,
            da_dim,
            layers: 1,
            dropout: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 3 || self.embed == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.embed
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIds {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    w_dc: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    emb: ParamId,
    r_x: ParamId,
    r_h: ParamId,
    r_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Semantically conditioned LSTM: an LSTM whose cell receives
/// `tanh(W_dc · d_t)` from a control vector that a reading gate can only
/// shrink over time.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    ids: Ids,
    layers: Vec<LayerIds>,
}

/// Generator state after consuming `last[2]` at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    /// `[x_{t-2}, x_{t-1}, x_t]`, back-filled with `<s>`.
    pub last: [TokenId; 3],
    pub t: usize,
}

impl StepContext {
    pub fn top_hidden(&self) -> &[f64] {
        self.h.last().expect("at least one layer")
    }

    pub fn last_token(&self) -> TokenId {
        self.last[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub distribution: Vec<f64>,
    pub next: StepContext,
}

/// Activations of one layer at one step, kept for backprop.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    dc: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    token: TokenId,
    emb_mask: Option<Vec<f64>>,
    hcat_prev: Vec<f64>,
    r: Vec<f64>,
    d_prev: Vec<f64>,
    d: Vec<f64>,
    layers: Vec<LayerCache>,
    inter_masks: Vec<Option<Vec<f64>>>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[0x6765_6e]);
        let mut store = ParamStore::new();
        let (v, e, h, da, nl) = (cfg.vocab, cfg.embed, cfg.hidden, cfg.da_dim, cfg.layers);
        let emb = store.add("emb", Matrix::uniform(v, e, 0.1, &mut rng))?;
        let mut layers = Vec::new();
        for l in 0..nl {
            let inp = cfg.layer_input(l);
            let scale = 1.0 / ((inp + h) as f64).sqrt();
            let w_x = store.add(format!("l{l}.w_x"), Matrix::uniform(4 * h, inp, scale, &mut rng))?;
            let w_h = store.add(format!("l{l}.w_h"), Matrix::uniform(4 * h, h, scale, &mut rng))?;
            let mut bias = Matrix::zeros(4 * h, 1);
            for k in h..2 * h {
                bias.set(k, 0, 1.0);
            }
            let b = store.add(format!("l{l}.b"), bias)?;
            let w_dc = store.add(
                format!("l{l}.w_dc"),
                Matrix::uniform(h, da, 1.0 / (da.max(1) as f64).sqrt(), &mut rng),
            )?;
            layers.push(LayerIds { w_x, w_h, b, w_dc });
        }
        let rs = 1.0 / ((e + nl * h) as f64).sqrt();
        let r_x = store.add("r.w_x", Matrix::uniform(da, e, rs, &mut rng))?;
        let r_h = store.add("r.w_h", Matrix::uniform(da, nl * h, rs, &mut rng))?;
        let r_b = store.add("r.b", Matrix::zeros(da, 1))?;
        let out_w = store.add("out.w", Matrix::uniform(v, h, 1.0 / (h as f64).sqrt(), &mut rng))?;
        let out_b = store.add("out.b", Matrix::zeros(v, 1))?;
        Ok(Generator {
            cfg,
            store,
            ids: Ids {
                emb,
                r_x,
                r_h,
                r_b,
                out_w,
                out_b,
            },
            layers,
        })
    }

    /// Wraps an existing store, checking every parameter's shape.
    pub fn from_parts(cfg: GeneratorConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str, rows: usize, cols: usize| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != (rows, cols) {
                return Err(Error::Shape(format!(
                    "`{name}` is {:?}, expected ({rows}, {cols})",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let (v, e, h, da, nl) = (cfg.vocab, cfg.embed, cfg.hidden, cfg.da_dim, cfg.layers);
        let mut layers = Vec::new();
        for l in 0..nl {
            layers.push(LayerIds {
                w_x: get(&format!("l{l}.w_x"), 4 * h, cfg.layer_input(l))?,
                w_h: get(&format!("l{l}.w_h"), 4 * h, h)?,
                b: get(&format!("l{l}.b"), 4 * h, 1)?,
                w_dc: get(&format!("l{l}.w_dc"), h, da)?,
            });
        }
        let ids = Ids {
            emb: get("emb", v, e)?,
            r_x: get("r.w_x", da, e)?,
            r_h: get("r.w_h", da, nl * h)?,
            r_b: get("r.b", da, 1)?,
            out_w: get("out.w", v, h)?,
            out_b: get("out.b", v, 1)?,
        };
        Ok(Generator {
            cfg,
            store,
            ids,
            layers,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.cfg;
        Checkpoint::new(self.store.clone())
            .with_meta("kind", "sclstm")
            .with_meta("vocab", c.vocab)
            .with_meta("embed", c.embed)
            .with_meta("hidden", c.hidden)
            .with_meta("da_dim", c.da_dim)
            .with_meta("layers", c.layers)
            .with_meta("dropout", c.dropout)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta_str("kind")? != "sclstm" {
            return Err(Error::Config("checkpoint is not a generator".into()));
        }
        let cfg = GeneratorConfig {
            vocab: ckpt.meta_usize("vocab")?,
            embed: ckpt.meta_usize("embed")?,
            hidden: ckpt.meta_usize("hidden")?,
            da_dim: ckpt.meta_usize("da_dim")?,
            layers: ckpt.meta_usize("layers")?,
            dropout: ckpt.meta_f64("dropout")?,
        };
        let mut store = ckpt.store.clone();
        store.reset_optimizer();
        Self::from_parts(cfg, store)
    }

    /// Row of `W_wr` for `token`.
    pub fn embedding(&self, token: TokenId) -> &[f64] {
        self.store.value(self.ids.emb).row(token as usize)
    }

    /// `tanh(W_dc · d)` using the top layer's projection.
    pub fn control_projection(&self, d: &[f64]) -> Vec<f64> {
        let top = self.layers.last().expect("at least one layer");
        let mut v = self.store.value(top.w_dc).matvec(d);
        v.iter_mut().for_each(|x| *x = x.tanh());
        v
    }

    pub fn init_context(&self, encoding: &DaVector) -> Result<StepContext> {
        if encoding.0.len() != self.cfg.da_dim {
            return Err(Error::Shape(format!(
                "encoding has {} entries, generator expects {}",
                encoding.0.len(),
                self.cfg.da_dim
            )));
        }
        let h = self.cfg.hidden;
        Ok(StepContext {
            h: vec![vec![0.0; h]; self.cfg.layers],
            c: vec![vec![0.0; h]; self.cfg.layers],
            d: encoding.0.clone(),
            last: [BOS_ID; 3],
            t: 0,
        })
    }

    /// Context after consuming `<s>`; its distribution is over the first word.
    pub fn start(&self, encoding: &DaVector) -> Result<StepOutput> {
        let ctx = self.init_context(encoding)?;
        self.step(&ctx, BOS_ID)
    }

    pub fn logits(&self, ctx: &StepContext) -> Vec<f64> {
        let mut logits = self.store.value(self.ids.out_b).data().to_vec();
        self.store
            .value(self.ids.out_w)
            .matvec_acc(ctx.top_hidden(), &mut logits);
        logits
    }

    /// Next-token distribution from a context.
    pub fn distribution(&self, ctx: &StepContext) -> Vec<f64> {
        softmax_unchecked(&self.logits(ctx))
    }

    pub fn greedy_next(&self, ctx: &StepContext) -> TokenId {
        argmax(&self.logits(ctx)) as TokenId
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.cfg.vocab {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "token id {token} outside vocabulary of {}",
                self.cfg.vocab
            )))
        }
    }

    /// Consumes `token` and returns the distribution over the following one.
    pub fn step(&self, ctx: &StepContext, token: TokenId) -> Result<StepOutput> {
        let next = self.advance(ctx, token)?;
        let distribution = self.distribution(&next);
        Ok(StepOutput { distribution, next })
    }

    /// Like [`step`](Self::step) without computing the output distribution.
    pub fn advance(&self, ctx: &StepContext, token: TokenId) -> Result<StepContext> {
        self.check_token(token)?;
        let (next, _) = self.forward_step(ctx, token, None::<&mut rand_chacha::ChaCha8Rng>, false);
        if next.h.iter().flatten().chain(&next.c.concat()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep { step: ctx.t });
        }
        Ok(next)
    }

    fn forward_step<R: Rng>(
        &self,
        ctx: &StepContext,
        token: TokenId,
        mut dropout_rng: Option<&mut R>,
        keep_cache: bool,
    ) -> (StepContext, Option<StepCache>) {
        let cfg = &self.cfg;
        let (hd, da, nl) = (cfg.hidden, cfg.da_dim, cfg.layers);
        let s = &self.store;
        let mut mask_for = |n: usize| -> Option<Vec<f64>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if cfg.dropout > 0.0 => {
                    let keep = 1.0 - cfg.dropout;
                    Some(
                        (0..n)
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect(),
                    )
                }
                _ => None,
            }
        };

        let raw_emb = s.value(self.ids.emb).row(token as usize);
        let emb_mask = mask_for(cfg.embed);
        let emb: Vec<f64> = match &emb_mask {
            Some(m) => raw_emb.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => raw_emb.to_vec(),
        };

        let hcat_prev: Vec<f64> = ctx.h.concat();
        let mut r = s.value(self.ids.r_b).data().to_vec();
        s.value(self.ids.r_x).matvec_acc(raw_emb, &mut r);
        s.value(self.ids.r_h).matvec_acc(&hcat_prev, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        let d: Vec<f64> = r.iter().zip(&ctx.d).map(|(a, b)| a * b).collect();
        debug_assert_eq!(d.len(), da);

        let mut new_h = Vec::with_capacity(nl);
        let mut new_c = Vec::with_capacity(nl);
        let mut caches = Vec::new();
        let mut inter_masks = Vec::new();
        let mut input = emb;
        for (l, ids) in self.layers.iter().enumerate() {
            if l > 0 {
                let m = mask_for(hd);
                if let Some(m) = &m {
                    input.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                }
                inter_masks.push(m);
            }
            let mut z = s.value(ids.b).data().to_vec();
            s.value(ids.w_x).matvec_acc(&input, &mut z);
            s.value(ids.w_h).matvec_acc(&ctx.h[l], &mut z);
            let mut dc = s.value(ids.w_dc).matvec(&d);
            dc.iter_mut().for_each(|v| *v = v.tanh());

            let mut i = vec![0.0; hd];
            let mut f = vec![0.0; hd];
            let mut o = vec![0.0; hd];
            let mut g = vec![0.0; hd];
            let mut c = vec![0.0; hd];
            let mut tanh_c = vec![0.0; hd];
            let mut h = vec![0.0; hd];
            for k in 0..hd {
                i[k] = sigmoid(z[k]);
                f[k] = sigmoid(z[hd + k]);
                o[k] = sigmoid(z[2 * hd + k]);
                g[k] = z[3 * hd + k].tanh();
                c[k] = f[k] * ctx.c[l][k] + i[k] * g[k] + dc[k];
                tanh_c[k] = c[k].tanh();
                h[k] = o[k] * tanh_c[k];
            }
            if keep_cache {
                caches.push(LayerCache {
                    input: input.clone(),
                    h_prev: ctx.h[l].clone(),
                    c_prev: ctx.c[l].clone(),
                    i,
                    f,
                    o,
                    g,
                    dc,
                    tanh_c,
                });
            }
            input = h.clone();
            new_h.push(h);
            new_c.push(c);
        }

        let next = StepContext {
            h: new_h,
            c: new_c,
            d: d.clone(),
            last: [ctx.last[1], ctx.last[2], token],
            t: ctx.t + 1,
        };
        let cache = keep_cache.then(|| StepCache {
            token,
            emb_mask,
            hcat_prev,
            r,
            d_prev: ctx.d.clone(),
            d,
            layers: caches,
            inter_masks,
        });
        (next, cache)
    }

    /// Teacher-forced per-token log-probabilities of `tokens`, which must end
    /// with `</s>`.
    pub fn sequence_logprob(&self, tokens: &[TokenId], encoding: &DaVector) -> Result<(Vec<f64>, f64)> {
        if tokens.last() != Some(&EOS_ID) {
            return Err(Error::InvalidInput("sequence must end with </s>".into()));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let mut ctx = self.init_context(encoding)?;
        let mut input = BOS_ID;
        let mut per_token = Vec::with_capacity(tokens.len());
        for &target in tokens {
            ctx = self.advance(&ctx, input)?;
            let lp = log_softmax(&self.logits(&ctx));
            per_token.push(lp[target as usize]);
            input = target;
        }
        let total = per_token.iter().sum();
        Ok((per_token, total))
    }

    /// Greedy continuation from `ctx`: argmax at each step (lowest id on ties)
    /// until `</s>` or `max_len` tokens. The returned tokens exclude `</s>`;
    /// the flag reports whether it was produced.
    pub fn greedy_rollout(&self, ctx: &StepContext, max_len: usize) -> Result<(Vec<TokenId>, bool)> {
        if max_len == 0 {
            return Err(Error::InvalidInput("max length must be at least 1".into()));
        }
        let mut out = Vec::new();
        let mut ctx = ctx.clone();
        for _ in 0..max_len {
            let next = self.greedy_next(&ctx);
            if next == EOS_ID {
                return Ok((out, true));
            }
            out.push(next);
            if out.len() == max_len {
                break;
            }
            ctx = self.advance(&ctx, next)?;
        }
        Ok((out, false))
    }

    /// Summed teacher-forced cross-entropy without dropout; with `accumulate`
    /// the gradient is added to the store's buffers.
    pub fn sequence_nll(&mut self, tokens: &[TokenId], encoding: &DaVector, accumulate: bool) -> Result<f64> {
        self.sequence_loss(tokens, encoding, None, accumulate)
    }

    /// Summed cross-entropy of a teacher-forced sequence; when `accumulate`
    /// is set, gradients are added to the store's buffers.
    pub(crate) fn sequence_loss(
        &mut self,
        tokens: &[TokenId],
        encoding: &DaVector,
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
        accumulate: bool,
    ) -> Result<f64> {
        let mut ctx = self.init_context(encoding)?;
        let mut caches = Vec::with_capacity(tokens.len());
        let mut probs = Vec::with_capacity(tokens.len());
        let mut tops = Vec::with_capacity(tokens.len());
        let mut loss = 0.0;
        let mut input = BOS_ID;
        let mut rng = dropout_rng;
        for &target in tokens {
            self.check_token(target)?;
            let (next, cache) = self.forward_step(&ctx, input, rng.as_deref_mut(), accumulate);
            let logits = self.logits(&next);
            let lp = log_softmax(&logits);
            loss -= lp[target as usize];
            if accumulate {
                caches.push(cache.expect("cache requested"));
                probs.push(lp.iter().map(|v| v.exp()).collect::<Vec<f64>>());
                tops.push(next.top_hidden().to_vec());
            }
            ctx = next;
            input = target;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteStep { step: ctx.t });
        }
        if accumulate {
            self.backward(tokens, &caches, &probs, &tops);
        }
        Ok(loss)
    }

    fn backward(&mut self, targets: &[TokenId], caches: &[StepCache], probs: &[Vec<f64>], tops: &[Vec<f64>]) {
        let (hd, nl, e) = (self.cfg.hidden, self.cfg.layers, self.cfg.embed);
        let ids = self.ids;
        let layer_ids = self.layers.clone();
        let mut dh_next = vec![vec![0.0; hd]; nl];
        let mut dc_next = vec![vec![0.0; hd]; nl];
        let mut dd_next = vec![0.0; self.cfg.da_dim];

        for t in (0..targets.len()).rev() {
            let cache = &caches[t];
            let mut dlogits = probs[t].clone();
            dlogits[targets[t] as usize] -= 1.0;
            self.store.grad_mut(ids.out_w).outer_acc(&dlogits, &tops[t]);
            for (g, v) in self.store.grad_mut(ids.out_b).data_mut().iter_mut().zip(&dlogits) {
                *g += v;
            }
            let mut dh_above = vec![0.0; hd];
            self.store.value(ids.out_w).matvec_t_acc(&dlogits, &mut dh_above);

            let mut dd = dd_next.clone();
            let mut de = vec![0.0; e];
            let mut dh_prev_all = vec![vec![0.0; hd]; nl];
            for l in (0..nl).rev() {
                let lc = &cache.layers[l];
                let lid = layer_ids[l];
                let dh: Vec<f64> = dh_above.iter().zip(&dh_next[l]).map(|(a, b)| a + b).collect();
                let mut dz = vec![0.0; 4 * hd];
                let mut dcell_term = vec![0.0; hd];
                let mut dc_prev = vec![0.0; hd];
                for k in 0..hd {
                    let d_o = dh[k] * lc.tanh_c[k];
                    let dc = dh[k] * lc.o[k] * (1.0 - lc.tanh_c[k] * lc.tanh_c[k]) + dc_next[l][k];
                    let di = dc * lc.g[k];
                    let dg = dc * lc.i[k];
                    let df = dc * lc.c_prev[k];
                    dc_prev[k] = dc * lc.f[k];
                    dcell_term[k] = dc * (1.0 - lc.dc[k] * lc.dc[k]);
                    dz[k] = di * lc.i[k] * (1.0 - lc.i[k]);
                    dz[hd + k] = df * lc.f[k] * (1.0 - lc.f[k]);
                    dz[2 * hd + k] = d_o * lc.o[k] * (1.0 - lc.o[k]);
                    dz[3 * hd + k] = dg * (1.0 - lc.g[k] * lc.g[k]);
                }
                self.store.grad_mut(lid.w_dc).outer_acc(&dcell_term, &cache.d);
                self.store.value(lid.w_dc).matvec_t_acc(&dcell_term, &mut dd);

                self.store.grad_mut(lid.w_x).outer_acc(&dz, &lc.input);
                self.store.grad_mut(lid.w_h).outer_acc(&dz, &lc.h_prev);
                for (g, v) in self.store.grad_mut(lid.b).data_mut().iter_mut().zip(&dz) {
                    *g += v;
                }
                let mut dinput = vec![0.0; lc.input.len()];
                self.store.value(lid.w_x).matvec_t_acc(&dz, &mut dinput);
                self.store.value(lid.w_h).matvec_t_acc(&dz, &mut dh_prev_all[l]);
                dc_next[l] = dc_prev;

                if l == 0 {
                    match &cache.emb_mask {
                        Some(m) => de.iter_mut().zip(dinput.iter().zip(m)).for_each(|(a, (b, c))| *a += b * c),
                        None => de.iter_mut().zip(&dinput).for_each(|(a, b)| *a += b),
                    }
                } else {
                    if let Some(m) = &cache.inter_masks[l - 1] {
                        dinput.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                    }
                    dh_above = dinput;
                }
            }

            // d_t = r_t ⊙ d_{t-1}
            let mut dpre_r = vec![0.0; dd.len()];
            let mut dd_prev = vec![0.0; dd.len()];
            for k in 0..dd.len() {
                let dr = dd[k] * cache.d_prev[k];
                dd_prev[k] = dd[k] * cache.r[k];
                dpre_r[k] = dr * cache.r[k] * (1.0 - cache.r[k]);
            }
            let raw_emb = self.store.value(ids.emb).row(cache.token as usize).to_vec();
            self.store.grad_mut(ids.r_x).outer_acc(&dpre_r, &raw_emb);
            self.store.grad_mut(ids.r_h).outer_acc(&dpre_r, &cache.hcat_prev);
            for (g, v) in self.store.grad_mut(ids.r_b).data_mut().iter_mut().zip(&dpre_r) {
                *g += v;
            }
            self.store.value(ids.r_x).matvec_t_acc(&dpre_r, &mut de);
            let mut dhcat = vec![0.0; nl * hd];
            self.store.value(ids.r_h).matvec_t_acc(&dpre_r, &mut dhcat);
            for l in 0..nl {
                for k in 0..hd {
                    dh_prev_all[l][k] += dhcat[l * hd + k];
                }
            }

            let row = self.store.grad_mut(ids.emb).row_mut(cache.token as usize);
            row.iter_mut().zip(&de).for_each(|(a, b)| *a += b);

            dh_next = dh_prev_all;
            dd_next = dd_prev;
        }
    }
}
