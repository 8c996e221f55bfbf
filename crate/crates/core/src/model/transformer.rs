//! The pre-LayerNorm encoder-decoder transformer.
//!
//! Token embeddings are shared by the encoder input, the decoder input and
//! the output projection. Positions use learned embeddings, one table per
//! side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TrainConfig};
use super::layers::{
    dropout, dropout_backward, uniform, Attention, AttentionCache, AttentionMask, FeedForward,
    FeedForwardCache, Grads, LayerNorm, LayerNormCache, ParamStore, Segments,
};
use super::loss::{smoothed_loss_and_grad, LossStats};
use super::optim::Adam;
use super::scalar::{matmul, Scalar};
use crate::error::{Error, Result};
use crate::subword::{TokenId, BOS, EOS, PAD};

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
}

impl Layout {
    fn build<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let (d, v, np) = (config.d_model, config.vocab_size, config.max_positions);
        let embed_bound = (3.0 / d as f64).sqrt();
        let embed = store.add("embed".into(), vec![v, d], uniform(rng, v * d, embed_bound));
        let enc_pos = store.add("enc_pos".into(), vec![np, d], uniform(rng, np * d, 0.05));
        let dec_pos = store.add("dec_pos".into(), vec![np, d], uniform(rng, np * d, 0.05));
        let encoder = (0..config.enc_layers)
            .map(|l| {
                let n = format!("enc.{l}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{n}.ln_attn"), d),
                    attn: Attention::new(store, rng, &format!("{n}.attn"), d, config.num_heads),
                    ln_ff: LayerNorm::new(store, &format!("{n}.ln_ff"), d),
                    ff: FeedForward::new(store, rng, &format!("{n}.ff"), d, config.ff_dim),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "enc.norm", d);
        let decoder = (0..config.dec_layers)
            .map(|l| {
                let n = format!("dec.{l}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d),
                    self_attn: Attention::new(store, rng, &format!("{n}.self_attn"), d, config.num_heads),
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d),
                    cross_attn: Attention::new(store, rng, &format!("{n}.cross_attn"), d, config.num_heads),
                    ln_ff: LayerNorm::new(store, &format!("{n}.ln_ff"), d),
                    ff: FeedForward::new(store, rng, &format!("{n}.ff"), d, config.ff_dim),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, "dec.norm", d);
        Layout {
            embed,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        }
    }
}

/// One training or scoring example as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Encoded input followed by EOS.
    pub src: Vec<TokenId>,
    /// BOS followed by the encoded target.
    pub tgt_in: Vec<TokenId>,
    /// The encoded target followed by EOS.
    pub tgt_out: Vec<TokenId>,
}

impl Example {
    pub fn new(src_ids: &[TokenId], tgt_ids: &[TokenId]) -> Self {
        let mut src = src_ids.to_vec();
        src.push(EOS);
        let mut tgt_in = Vec::with_capacity(tgt_ids.len() + 1);
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(tgt_ids);
        let mut tgt_out = tgt_ids.to_vec();
        tgt_out.push(EOS);
        Example { src, tgt_in, tgt_out }
    }

    pub fn num_tokens(&self) -> usize {
        self.src.len() + self.tgt_in.len()
    }
}

/// Parameters, optimizer moments, step counter and dropout stream.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
    /// Completed training epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    layout: Layout,
}

impl<T: Scalar> PartialEq for ModelState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.optimizer == other.optimizer
            && self.step == other.step
            && self.epoch == other.epoch
            && self.rng == other.rng
    }
}

struct EncoderLayerCache<T> {
    ln_attn: LayerNormCache<T>,
    attn_in: Vec<T>,
    attn: AttentionCache<T>,
    attn_drop: Option<Vec<T>>,
    ln_ff: LayerNormCache<T>,
    ff_in: Vec<T>,
    ff: FeedForwardCache<T>,
    ff_drop: Option<Vec<T>>,
}

struct DecoderLayerCache<T> {
    ln_self: LayerNormCache<T>,
    self_in: Vec<T>,
    self_attn: AttentionCache<T>,
    self_drop: Option<Vec<T>>,
    ln_cross: LayerNormCache<T>,
    cross_in: Vec<T>,
    cross_attn: AttentionCache<T>,
    cross_drop: Option<Vec<T>>,
    ln_ff: LayerNormCache<T>,
    ff_in: Vec<T>,
    ff: FeedForwardCache<T>,
    ff_drop: Option<Vec<T>>,
}

struct ForwardCache<T> {
    src_seg: Segments,
    tgt_seg: Segments,
    src_tokens: Vec<TokenId>,
    tgt_tokens: Vec<TokenId>,
    src_valid: Vec<bool>,
    tgt_valid: Vec<bool>,
    enc_embed_drop: Option<Vec<T>>,
    enc_layers: Vec<EncoderLayerCache<T>>,
    enc_norm: LayerNormCache<T>,
    memory: Vec<T>,
    dec_embed_drop: Option<Vec<T>>,
    dec_layers: Vec<DecoderLayerCache<T>>,
    dec_norm: LayerNormCache<T>,
    hidden: Vec<T>,
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Per-source state for incremental decoding: the encoder output projected
/// into every decoder layer's cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncodedSource<T> {
    cross_keys: Vec<Vec<T>>,
    cross_values: Vec<Vec<T>>,
    key_valid: Vec<bool>,
}

/// Self-attention key/value cache of one partial hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    pub position: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let layout = Layout::build(&config, &mut params, &mut rng);
        let optimizer = Adam::new(&params);
        Ok(ModelState {
            config,
            params,
            optimizer,
            step: 0,
            epoch: 0,
            rng,
            layout,
        })
    }

    /// Rebuilds a state from stored tensors. Shapes must match `config`.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore<T>,
        optimizer: Adam<T>,
        step: u64,
        epoch: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let mut reference = Self::new(config.clone(), 0)?;
        if reference.params.tensors.len() != params.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                reference.params.tensors.len(),
                params.tensors.len()
            )));
        }
        for (want, got) in reference.params.tensors.iter().zip(&params.tensors) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::shape(format!(
                    "tensor {} has shape {:?}, config implies {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        optimizer.check_shapes(&params)?;
        reference.params = params;
        reference.optimizer = optimizer;
        reference.step = step;
        reference.epoch = epoch;
        reference.rng = rng;
        Ok(reference)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        let limit = self.config.max_positions;
        if ex.src.len() > limit || ex.tgt_in.len() > limit {
            return Err(Error::input(format!(
                "sequence of length {} exceeds max_positions {limit}",
                ex.src.len().max(ex.tgt_in.len())
            )));
        }
        if ex.tgt_in.len() != ex.tgt_out.len() {
            return Err(Error::input("decoder input and output lengths differ"));
        }
        let v = self.config.vocab_size as TokenId;
        if ex.src.iter().chain(&ex.tgt_in).chain(&ex.tgt_out).any(|&t| t >= v) {
            return Err(Error::input(format!("token id out of range for vocab size {v}")));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[TokenId], seg: &Segments, pos_table: usize) -> Vec<T> {
        let d = self.config.d_model;
        let scale = T::of((d as f64).sqrt());
        let emb = self.params.get(self.layout.embed);
        let pos = self.params.get(pos_table);
        let mut x = vec![T::zero(); tokens.len() * d];
        for s in 0..seg.count() {
            let (a, b) = seg.range(s);
            for (p, row) in (a..b).enumerate() {
                let t = tokens[row] as usize;
                for j in 0..d {
                    x[row * d + j] = emb[t * d + j] * scale + pos[p * d + j];
                }
            }
        }
        x
    }

    fn embed_backward(
        &self,
        g: &mut Grads<T>,
        tokens: &[TokenId],
        seg: &Segments,
        pos_table: usize,
        dx: &[T],
    ) {
        let d = self.config.d_model;
        let scale = T::of((d as f64).sqrt());
        {
            let de = g.get_mut(self.layout.embed);
            for (row, &t) in tokens.iter().enumerate() {
                let t = t as usize;
                for j in 0..d {
                    de[t * d + j] += dx[row * d + j] * scale;
                }
            }
        }
        let dp = g.get_mut(pos_table);
        for s in 0..seg.count() {
            let (a, b) = seg.range(s);
            for (p, row) in (a..b).enumerate() {
                for j in 0..d {
                    dp[p * d + j] += dx[row * d + j];
                }
            }
        }
    }

    /// Packed forward pass. Returns the cache and per-target-position
    /// logits (`total target rows x vocab`).
    fn forward_packed(
        &self,
        batch: &[Example],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardCache<T>, Vec<T>)> {
        for ex in batch {
            self.check_example(ex)?;
        }
        let p = &self.params;
        let d = self.config.d_model;
        let rate = self.config.dropout;
        let src_seg = Segments::from_lengths(batch.iter().map(|e| e.src.len()));
        let tgt_seg = Segments::from_lengths(batch.iter().map(|e| e.tgt_in.len()));
        let src_tokens: Vec<TokenId> = batch.iter().flat_map(|e| e.src.iter().copied()).collect();
        let tgt_tokens: Vec<TokenId> = batch.iter().flat_map(|e| e.tgt_in.iter().copied()).collect();
        let src_valid: Vec<bool> = src_tokens.iter().map(|&t| t != PAD).collect();
        let tgt_valid: Vec<bool> = tgt_tokens.iter().map(|&t| t != PAD).collect();
        let (ns, nt) = (src_seg.total(), tgt_seg.total());

        let mut x = self.embed(&src_tokens, &src_seg, self.layout.enc_pos);
        let enc_embed_drop = dropout(&mut x, rate, rng.as_deref_mut());
        let mut enc_layers = Vec::with_capacity(self.layout.encoder.len());
        let enc_mask = AttentionMask {
            causal: false,
            key_valid: &src_valid,
        };
        for layer in &self.layout.encoder {
            let (attn_in, ln_attn) = layer.ln_attn.forward(p, &x);
            let (mut a, attn) = layer.attn.forward(p, &attn_in, &src_seg, &attn_in, &src_seg, enc_mask);
            let attn_drop = dropout(&mut a, rate, rng.as_deref_mut());
            add_into(&mut x, &a);
            let (ff_in, ln_ff) = layer.ln_ff.forward(p, &x);
            let (mut f, ff) = layer.ff.forward(p, &ff_in, ns);
            let ff_drop = dropout(&mut f, rate, rng.as_deref_mut());
            add_into(&mut x, &f);
            enc_layers.push(EncoderLayerCache {
                ln_attn,
                attn_in,
                attn,
                attn_drop,
                ln_ff,
                ff_in,
                ff,
                ff_drop,
            });
        }
        let (memory, enc_norm) = self.layout.enc_norm.forward(p, &x);

        let mut y = self.embed(&tgt_tokens, &tgt_seg, self.layout.dec_pos);
        let dec_embed_drop = dropout(&mut y, rate, rng.as_deref_mut());
        let self_mask = AttentionMask {
            causal: true,
            key_valid: &tgt_valid,
        };
        let mut dec_layers = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let (self_in, ln_self) = layer.ln_self.forward(p, &y);
            let (mut a, self_attn) =
                layer.self_attn.forward(p, &self_in, &tgt_seg, &self_in, &tgt_seg, self_mask);
            let self_drop = dropout(&mut a, rate, rng.as_deref_mut());
            add_into(&mut y, &a);
            let (cross_in, ln_cross) = layer.ln_cross.forward(p, &y);
            let (mut c, cross_attn) =
                layer.cross_attn.forward(p, &cross_in, &tgt_seg, &memory, &src_seg, enc_mask);
            let cross_drop = dropout(&mut c, rate, rng.as_deref_mut());
            add_into(&mut y, &c);
            let (ff_in, ln_ff) = layer.ln_ff.forward(p, &y);
            let (mut f, ff) = layer.ff.forward(p, &ff_in, nt);
            let ff_drop = dropout(&mut f, rate, rng.as_deref_mut());
            add_into(&mut y, &f);
            dec_layers.push(DecoderLayerCache {
                ln_self,
                self_in,
                self_attn,
                self_drop,
                ln_cross,
                cross_in,
                cross_attn,
                cross_drop,
                ln_ff,
                ff_in,
                ff,
                ff_drop,
            });
        }
        let (hidden, dec_norm) = self.layout.dec_norm.forward(p, &y);
        let v = self.config.vocab_size;
        let mut logits = vec![T::zero(); nt * v];
        matmul(&hidden, false, p.get(self.layout.embed), true, &mut logits, nt, d, v, false);

        let cache = ForwardCache {
            src_seg,
            tgt_seg,
            src_tokens,
            tgt_tokens,
            src_valid,
            tgt_valid,
            enc_embed_drop,
            enc_layers,
            enc_norm,
            memory,
            dec_embed_drop,
            dec_layers,
            dec_norm,
            hidden,
        };
        Ok((cache, logits))
    }

    fn backward_packed(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Grads<T> {
        let p = &self.params;
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let (ns, nt) = (cache.src_seg.total(), cache.tgt_seg.total());
        let mut g = p.zeros_like();

        // logits = hidden E^T
        matmul(dlogits, true, &cache.hidden, false, g.get_mut(self.layout.embed), v, nt, d, true);
        let mut dh = vec![T::zero(); nt * d];
        matmul(dlogits, false, p.get(self.layout.embed), false, &mut dh, nt, v, d, false);

        let mut dy = self.layout.dec_norm.backward(p, &mut g, &cache.dec_norm, &dh);
        let mut dmem = vec![T::zero(); ns * d];
        let self_seg = &cache.tgt_seg;
        for (layer, lc) in self.layout.decoder.iter().zip(&cache.dec_layers).rev() {
            let df = dropout_backward(&dy, &lc.ff_drop);
            let dff_in = layer.ff.backward(p, &mut g, &lc.ff_in, &lc.ff, &df, nt);
            let d_ln = layer.ln_ff.backward(p, &mut g, &lc.ln_ff, &dff_in);
            add_into(&mut dy, &d_ln);

            let dc = dropout_backward(&dy, &lc.cross_drop);
            let (dq, dkv) = layer.cross_attn.backward(
                p,
                &mut g,
                &lc.cross_in,
                self_seg,
                &cache.memory,
                &cache.src_seg,
                &lc.cross_attn,
                &dc,
            );
            add_into(&mut dmem, &dkv);
            let d_ln = layer.ln_cross.backward(p, &mut g, &lc.ln_cross, &dq);
            add_into(&mut dy, &d_ln);

            let da = dropout_backward(&dy, &lc.self_drop);
            let (mut dq, dkv) = layer.self_attn.backward(
                p,
                &mut g,
                &lc.self_in,
                self_seg,
                &lc.self_in,
                self_seg,
                &lc.self_attn,
                &da,
            );
            add_into(&mut dq, &dkv);
            let d_ln = layer.ln_self.backward(p, &mut g, &lc.ln_self, &dq);
            add_into(&mut dy, &d_ln);
        }
        let dy = dropout_backward(&dy, &cache.dec_embed_drop);
        self.embed_backward(&mut g, &cache.tgt_tokens, &cache.tgt_seg, self.layout.dec_pos, &dy);

        let mut dx = self.layout.enc_norm.backward(p, &mut g, &cache.enc_norm, &dmem);
        for (layer, lc) in self.layout.encoder.iter().zip(&cache.enc_layers).rev() {
            let df = dropout_backward(&dx, &lc.ff_drop);
            let dff_in = layer.ff.backward(p, &mut g, &lc.ff_in, &lc.ff, &df, ns);
            let d_ln = layer.ln_ff.backward(p, &mut g, &lc.ln_ff, &dff_in);
            add_into(&mut dx, &d_ln);

            let da = dropout_backward(&dx, &lc.attn_drop);
            let (mut dq, dkv) = layer.attn.backward(
                p,
                &mut g,
                &lc.attn_in,
                &cache.src_seg,
                &lc.attn_in,
                &cache.src_seg,
                &lc.attn,
                &da,
            );
            add_into(&mut dq, &dkv);
            let d_ln = layer.ln_attn.backward(p, &mut g, &lc.ln_attn, &dq);
            add_into(&mut dx, &d_ln);
        }
        let dx = dropout_backward(&dx, &cache.enc_embed_drop);
        self.embed_backward(&mut g, &cache.src_tokens, &cache.src_seg, self.layout.enc_pos, &dx);
        let _ = (&cache.src_valid, &cache.tgt_valid);
        g
    }

    /// Per-position log-probabilities for each example, without dropout.
    /// Row `t` of an example's output is the distribution of the token that
    /// follows `tgt_in[..=t]`.
    pub fn forward(&self, batch: &[Example]) -> Result<Vec<Vec<T>>> {
        let (cache, mut logits) = self.forward_packed(batch, None)?;
        let v = self.config.vocab_size;
        for row in logits.chunks_exact_mut(v) {
            log_softmax_in_place(row);
        }
        Ok((0..cache.tgt_seg.count())
            .map(|s| {
                let (a, b) = cache.tgt_seg.range(s);
                logits[a * v..b * v].to_vec()
            })
            .collect())
    }

    /// Mean label-smoothed loss over non-PAD target positions, without
    /// dropout and without touching the parameters.
    pub fn batch_loss(&self, batch: &[Example], epsilon: f64) -> Result<LossStats> {
        let (_, mut logits) = self.forward_packed(batch, None)?;
        let targets: Vec<TokenId> = batch.iter().flat_map(|e| e.tgt_out.iter().copied()).collect();
        Ok(smoothed_loss_and_grad(
            &mut logits,
            &targets,
            self.config.vocab_size,
            epsilon,
            Some(PAD),
            false,
        ))
    }

    /// Loss and parameter gradients of the mean token loss. Dropout is
    /// applied when an rng is given.
    pub fn loss_and_grads(
        &self,
        batch: &[Example],
        epsilon: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossStats, Grads<T>)> {
        let (cache, mut logits) = self.forward_packed(batch, rng)?;
        let targets: Vec<TokenId> = batch.iter().flat_map(|e| e.tgt_out.iter().copied()).collect();
        let stats = smoothed_loss_and_grad(
            &mut logits,
            &targets,
            self.config.vocab_size,
            epsilon,
            Some(PAD),
            true,
        );
        let grads = self.backward_packed(&cache, &logits);
        Ok((stats, grads))
    }

    /// One optimizer update on `batch`. Returns the batch loss.
    pub fn train_step(&mut self, batch: &[Example], tc: &TrainConfig) -> Result<LossStats> {
        if !self.is_finite() {
            return Err(Error::runtime("parameters are not finite"));
        }
        let mut rng = self.rng.clone();
        let (stats, mut grads) =
            self.loss_and_grads(batch, self.config.label_smoothing, Some(&mut rng))?;
        self.rng = rng;
        if !stats.mean().is_finite() {
            return Err(Error::runtime(format!(
                "non-finite loss {} at step {}",
                stats.mean(),
                self.step + 1
            )));
        }
        if tc.clip_norm > 0.0 {
            let norm = grads.norm();
            if norm > tc.clip_norm {
                grads.scale(T::of(tc.clip_norm / norm));
            }
        }
        self.step += 1;
        let lr = tc.learning_rate(self.step);
        self.optimizer.update(&mut self.params, &grads, lr, self.step);
        Ok(stats)
    }

    /// Runs the encoder once for incremental decoding.
    pub fn encode_source(&self, src: &[TokenId]) -> Result<EncodedSource<T>> {
        let ex = Example {
            src: src.to_vec(),
            tgt_in: vec![BOS],
            tgt_out: vec![EOS],
        };
        self.check_example(&ex)?;
        let p = &self.params;
        let seg = Segments::from_lengths([src.len()]);
        let valid: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
        let mask = AttentionMask {
            causal: false,
            key_valid: &valid,
        };
        let mut x = self.embed(src, &seg, self.layout.enc_pos);
        for layer in &self.layout.encoder {
            let (a_in, _) = layer.ln_attn.forward(p, &x);
            let (a, _) = layer.attn.forward(p, &a_in, &seg, &a_in, &seg, mask);
            add_into(&mut x, &a);
            let (f_in, _) = layer.ln_ff.forward(p, &x);
            let (f, _) = layer.ff.forward(p, &f_in, src.len());
            add_into(&mut x, &f);
        }
        let (memory, _) = self.layout.enc_norm.forward(p, &x);
        let mut cross_keys = Vec::new();
        let mut cross_values = Vec::new();
        for layer in &self.layout.decoder {
            cross_keys.push(layer.cross_attn.k.forward(p, &memory, src.len()));
            cross_values.push(layer.cross_attn.v.forward(p, &memory, src.len()));
        }
        Ok(EncodedSource {
            cross_keys,
            cross_values,
            key_valid: valid,
        })
    }

    pub fn start_decoding(&self) -> DecoderCache<T> {
        let n = self.layout.decoder.len();
        DecoderCache {
            position: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    /// Feeds one decoder token and returns the log-probabilities of the
    /// next one.
    pub fn decode_step(
        &self,
        source: &EncodedSource<T>,
        cache: &mut DecoderCache<T>,
        token: TokenId,
    ) -> Result<Vec<T>> {
        if cache.position >= self.config.max_positions {
            return Err(Error::input(format!(
                "decoder position {} exceeds max_positions {}",
                cache.position, self.config.max_positions
            )));
        }
        let p = &self.params;
        let d = self.config.d_model;
        let seg = Segments::from_lengths([1]);
        let mut y = {
            let scale = T::of((d as f64).sqrt());
            let emb = &p.get(self.layout.embed)[token as usize * d..(token as usize + 1) * d];
            let pos = &p.get(self.layout.dec_pos)[cache.position * d..(cache.position + 1) * d];
            emb.iter().zip(pos).map(|(&e, &q)| e * scale + q).collect::<Vec<T>>()
        };
        let _ = seg;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let (s_in, _) = layer.ln_self.forward(p, &y);
            let q = layer.self_attn.q.forward(p, &s_in, 1);
            let k = layer.self_attn.k.forward(p, &s_in, 1);
            let v = layer.self_attn.v.forward(p, &s_in, 1);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let a = layer
                .self_attn
                .attend_cached(p, &q, &cache.keys[l], &cache.values[l], None);
            add_into(&mut y, &a);
            let (c_in, _) = layer.ln_cross.forward(p, &y);
            let q = layer.cross_attn.q.forward(p, &c_in, 1);
            let c = layer.cross_attn.attend_cached(
                p,
                &q,
                &source.cross_keys[l],
                &source.cross_values[l],
                Some(&source.key_valid),
            );
            add_into(&mut y, &c);
            let (f_in, _) = layer.ln_ff.forward(p, &y);
            let (f, _) = layer.ff.forward(p, &f_in, 1);
            add_into(&mut y, &f);
        }
        cache.position += 1;
        let (h, _) = self.layout.dec_norm.forward(p, &y);
        let vsz = self.config.vocab_size;
        let mut logits = vec![T::zero(); vsz];
        matmul(&h, false, p.get(self.layout.embed), true, &mut logits, 1, d, vsz, false);
        log_softmax_in_place(&mut logits);
        Ok(logits)
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let sum = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp());
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}
