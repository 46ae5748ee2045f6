use super::math::{self, View};
use super::{Logits, Model};
use crate::error::{Error, Result};
use crate::kv::KvTensor;

/// Query rows per attention tile. Each tile only reads keys up to its last
/// row's slot, which halves the causal work on long prompts.
const ATTENTION_TILE: usize = 128;

/// Optional attention recording for the analysis tools.
#[derive(Clone, Debug, Default)]
pub struct AttentionCapture {
    /// Layer whose scaled pre-softmax scores are recorded in `layer_scores`.
    pub scores_layer: Option<usize>,
    /// `[layer][head]`: softmax row of the last computed token over `0..=slot`.
    pub last_row: Vec<Vec<Vec<f32>>>,
    /// `[head]`: row-major `rows x cols` scaled scores at `scores_layer`.
    /// Entries past a row's own slot are zero.
    pub layer_scores: Vec<Vec<f32>>,
    pub rows: usize,
    pub cols: usize,
}

impl AttentionCapture {
    pub fn with_scores_layer(layer: usize) -> Self {
        Self {
            scores_layer: Some(layer),
            ..Self::default()
        }
    }
}

pub(crate) struct ForwardOutput {
    /// Final normalised hidden states of the computed rows.
    pub hidden: Vec<f32>,
    pub logits: Logits,
}

impl Model {
    /// One engine pass over a subset of cache slots.
    ///
    /// For every layer the rows in `slots` get fresh Q/K/V (rotated to
    /// `positions`), their K/V overwrite the cache at those slots, and each row
    /// attends over every cache slot up to and including its own. Slots not
    /// listed keep whatever the cache already holds. Returns the final hidden
    /// states of the listed rows and the logits of the last one.
    pub(crate) fn forward_rows(
        &self,
        cache: &mut KvTensor,
        tokens: &[u32],
        slots: &[usize],
        positions: &[usize],
        mut capture: Option<&mut AttentionCapture>,
    ) -> Result<ForwardOutput> {
        let s = tokens.len();
        if s == 0 || slots.len() != s || positions.len() != s {
            return Err(Error::Validation(format!(
                "forward pass needs matching non-empty rows: {} tokens, {} slots, {} positions",
                s,
                slots.len(),
                positions.len()
            )));
        }
        if slots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("slots must be strictly ascending".into()));
        }
        if slots[s - 1] >= cache.n_tokens() {
            return Err(Error::Validation(format!(
                "slot {} beyond cache of {} tokens",
                slots[s - 1],
                cache.n_tokens()
            )));
        }
        self.check_tokens(tokens)?;
        self.check_geometry(cache)?;

        let cfg = &self.config;
        let (h, hd) = (cfg.hidden_dim, cfg.head_dim);
        if let Some(cap) = capture.as_deref_mut() {
            cap.last_row = vec![Vec::new(); cfg.n_layers];
            cap.layer_scores.clear();
            cap.rows = 0;
            cap.cols = 0;
        }

        let mut x: Vec<f32> = Vec::with_capacity(s * h);
        for &t in tokens {
            x.extend_from_slice(self.embedding_row(t));
        }

        for layer in 0..cfg.n_layers {
            let w = self.layer(layer);
            let a = math::rms_norm(&x, h);
            let mut q = math::project(&a, s, h, &w.wq, h);
            let mut k = math::project(&a, s, h, &w.wk, h);
            let v = math::project(&a, s, h, &w.wv, h);
            for (r, &pos) in positions.iter().enumerate() {
                let range = r * h..(r + 1) * h;
                math::rope_row(&mut q[range.clone()], hd, pos as f64, cfg.rope_base);
                math::rope_row(&mut k[range], hd, pos as f64, cfg.rope_base);
            }
            for (r, &slot) in slots.iter().enumerate() {
                cache
                    .key_row_mut(layer, slot)
                    .copy_from_slice(&k[r * h..(r + 1) * h]);
                cache
                    .value_row_mut(layer, slot)
                    .copy_from_slice(&v[r * h..(r + 1) * h]);
            }

            let attn = self.attend(layer, &q, cache, slots, capture.as_deref_mut());
            let o = math::project(&attn, s, h, &w.wo, h);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);

            let f = math::rms_norm(&x, h);
            let mut up = math::project(&f, s, h, &w.w_up, 4 * h);
            up.iter_mut().for_each(|u| *u = math::gelu(*u));
            let down = math::project(&up, s, 4 * h, &w.w_down, h);
            x.iter_mut().zip(&down).for_each(|(x, d)| *x += d);
        }

        let hidden = math::rms_norm(&x, h);
        let last = &hidden[(s - 1) * h..];
        let logits = math::project(last, 1, h, self.lm_head(), cfg.vocab_size);
        Ok(ForwardOutput {
            hidden,
            logits: Logits(logits),
        })
    }

    /// Layer-0 keys of `tokens` rotated to `positions`, row-major
    /// `[token][hidden]`. Matches what a full pass writes to the layer-0 cache.
    pub(crate) fn layer0_keys(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<f32>> {
        if tokens.len() != positions.len() {
            return Err(Error::Validation("tokens and positions differ in length".into()));
        }
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let h = cfg.hidden_dim;
        let mut x: Vec<f32> = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            x.extend_from_slice(self.embedding_row(t));
        }
        let a = math::rms_norm(&x, h);
        let mut k = math::project(&a, tokens.len(), h, &self.layer(0).wk, h);
        for (r, &pos) in positions.iter().enumerate() {
            math::rope_row(&mut k[r * h..(r + 1) * h], cfg.head_dim, pos as f64, cfg.rope_base);
        }
        Ok(k)
    }

    fn attend(
        &self,
        layer: usize,
        q: &[f32],
        cache: &KvTensor,
        slots: &[usize],
        mut capture: Option<&mut AttentionCapture>,
    ) -> Vec<f32> {
        let cfg = &self.config;
        let (h, hd, nh) = (cfg.hidden_dim, cfg.head_dim, cfg.n_heads);
        let s = slots.len();
        let scale = 1.0 / (hd as f32).sqrt();
        let keys = cache.keys(layer);
        let values = cache.values(layer);
        let mut out = vec![0.0f32; s * h];
        let mut scores: Vec<f32> = Vec::new();

        let record_scores = capture
            .as_deref()
            .is_some_and(|c| c.scores_layer == Some(layer));
        if record_scores {
            let cap = capture.as_deref_mut().expect("checked above");
            cap.rows = s;
            cap.cols = slots[s - 1] + 1;
            cap.layer_scores = vec![vec![0.0; s * cap.cols]; nh];
        }

        for start in (0..s).step_by(ATTENTION_TILE) {
            let end = (start + ATTENTION_TILE).min(s);
            let rows = end - start;
            let cols = slots[end - 1] + 1;
            scores.clear();
            scores.resize(rows * cols, 0.0);
            for head in 0..nh {
                let q_view = View {
                    data: q,
                    offset: start * h + head * hd,
                    row_stride: h,
                    col_stride: 1,
                };
                // K^T: element (d, j) lives at keys[j*h + head*hd + d]
                let kt_view = View {
                    data: keys,
                    offset: head * hd,
                    row_stride: 1,
                    col_stride: h,
                };
                math::matmul(rows, hd, cols, scale, q_view, kt_view, 0.0, &mut scores, 0, cols);

                if record_scores {
                    let cap = capture.as_deref_mut().expect("checked above");
                    let dst = &mut cap.layer_scores[head];
                    for r in 0..rows {
                        let live = slots[start + r] + 1;
                        let row = (start + r) * cap.cols;
                        dst[row..row + live].copy_from_slice(&scores[r * cols..r * cols + live]);
                    }
                }

                for r in 0..rows {
                    math::masked_softmax(&mut scores[r * cols..(r + 1) * cols], slots[start + r]);
                }

                if end == s {
                    if let Some(cap) = capture.as_deref_mut() {
                        let r = rows - 1;
                        let live = slots[s - 1] + 1;
                        cap.last_row[layer].push(scores[r * cols..r * cols + live].to_vec());
                    }
                }

                let v_view = View {
                    data: values,
                    offset: head * hd,
                    row_stride: h,
                    col_stride: 1,
                };
                math::matmul(
                    rows,
                    cols,
                    hd,
                    1.0,
                    View::rows(&scores, cols),
                    v_view,
                    0.0,
                    &mut out,
                    start * h + head * hd,
                    h,
                );
            }
        }
        out
    }
}
