use super::config::ModelConfig;
use super::state::Params;
use super::ModelError;
use crate::clinic::{LayerMap, NUM_SLICES, SLICE_SIZE};
use crate::raster::Grid;
use crate::tensor::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Flattens 24 slices into `[N, H, patch_size^2]` patch rows.
pub fn patchify<T: Real>(slices: &[Grid], cfg: &ModelConfig) -> Result<Tensor<T>, ModelError> {
    if slices.len() != NUM_SLICES
        || slices
            .iter()
            .any(|g| g.width != SLICE_SIZE || g.height != SLICE_SIZE)
    {
        return Err(ModelError::Input(format!(
            "expected {NUM_SLICES} slices of {SLICE_SIZE}x{SLICE_SIZE}"
        )));
    }
    let (ps, side) = (cfg.patch_size, cfg.patches_per_side());
    let mut data = Vec::with_capacity(NUM_SLICES * SLICE_SIZE * SLICE_SIZE);
    for g in slices {
        for py in 0..side {
            for px in 0..side {
                for dy in 0..ps {
                    for dx in 0..ps {
                        data.push(T::from_f64_lossy(g.get(px * ps + dx, py * ps + dy)));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(
        vec![NUM_SLICES, cfg.patches(), cfg.patch_dim()],
        data,
    )?)
}

impl<T: Real> Params<'_, T> {
    fn affine_norm(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let g = tape.mul(n, self.get(&format!("{prefix}.g")))?;
        Ok(tape.add(g, self.get(&format!("{prefix}.b")))?)
    }

    /// Multi-head self-attention over `x: [B, S, d]` with an optional
    /// additive `[S, S]` mask.
    fn attention(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        prefix: &str,
        mask: Option<Var>,
    ) -> Result<Var, ModelError> {
        let s = tape.shape(x).to_vec();
        let (b, len, d) = (s[0], s[1], s[2]);
        let h = self.config().heads;
        let dh = d / h;
        let heads = |tape: &mut Tape<T>, w: &str, bias: &str| -> Result<Var, ModelError> {
            let y = tape.linear(
                x,
                self.get(&format!("{prefix}.{w}")),
                self.get(&format!("{prefix}.{bias}")),
            )?;
            let y = tape.reshape(y, &[b, len, h, dh])?;
            Ok(tape.permute(y, &[0, 2, 1, 3])?)
        };
        let q = heads(tape, "wq", "bq")?;
        let k = heads(tape, "wk", "bk")?;
        let v = heads(tape, "wv", "bv")?;
        let scores = tape.matmul_t(q, k, false, true)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let att = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(att, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, len, d])?;
        Ok(tape.linear(
            ctx,
            self.get(&format!("{prefix}.wo")),
            self.get(&format!("{prefix}.bo")),
        )?)
    }

    /// Pre-norm transformer block.
    fn block(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        prefix: &str,
        mask: Option<Var>,
    ) -> Result<Var, ModelError> {
        let n1 = self.affine_norm(tape, x, &format!("{prefix}.ln1"))?;
        let a = self.attention(tape, n1, prefix, mask)?;
        let x = tape.add(x, a)?;
        let n2 = self.affine_norm(tape, x, &format!("{prefix}.ln2"))?;
        let f = tape.linear(
            n2,
            self.get(&format!("{prefix}.ff.w1")),
            self.get(&format!("{prefix}.ff.b1")),
        )?;
        let f = tape.gelu(f)?;
        let f = tape.linear(
            f,
            self.get(&format!("{prefix}.ff.w2")),
            self.get(&format!("{prefix}.ff.b2")),
        )?;
        Ok(tape.add(x, f)?)
    }

    /// Per-slice encoder: `[24, H, d_enc]` features `V`. Slices never attend
    /// to each other.
    pub fn encode_images(&self, tape: &mut Tape<T>, slices: &[Grid]) -> Result<Var, ModelError> {
        let patches = tape.constant(patchify(slices, self.config())?);
        self.encode_patches(tape, patches)
    }

    pub fn encode_patches(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var, ModelError> {
        let x = tape.linear(patches, self.get("enc.patch.w"), self.get("enc.patch.b"))?;
        let mut x = tape.add(x, self.get("enc.pos"))?;
        for l in 0..self.config().enc_layers {
            x = self.block(tape, x, &format!("enc.{l}"), None)?;
        }
        self.affine_norm(tape, x, "enc.ln_f")
    }

    /// Visual tokens `H_v: [24, d_w]`: mean over patches, then a linear map.
    pub fn project(&self, tape: &mut Tape<T>, v: Var) -> Result<Var, ModelError> {
        let pooled = tape.mean(v, 1)?;
        Ok(tape.linear(pooled, self.get("proj.w"), self.get("proj.b"))?)
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<(), ModelError> {
        match ids.iter().find(|&&t| t >= self.config().vocab_size) {
            Some(&t) => Err(ModelError::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Final-layer decoder states for `[H_v; instruction; tokens]` and the
    /// prefix length. The prefix attends bidirectionally; `tokens` are causal.
    pub fn decoder_hidden(
        &self,
        tape: &mut Tape<T>,
        h_v: Option<Var>,
        instruction: &[usize],
        tokens: &[usize],
    ) -> Result<(Var, usize), ModelError> {
        self.check_tokens(instruction)?;
        self.check_tokens(tokens)?;
        let n_vis = h_v.map_or(0, |v| tape.shape(v)[0]);
        let prefix = n_vis + instruction.len();
        let len = prefix + tokens.len();
        let cap = self.config().max_positions();
        if len > cap {
            return Err(ModelError::Overlong { len, cap });
        }
        if len == 0 {
            return Err(ModelError::Input("empty decoder sequence".into()));
        }
        let d = self.config().d_w;
        let ids: Vec<usize> = instruction.iter().chain(tokens).copied().collect();
        let mut parts = Vec::new();
        if let Some(v) = h_v {
            parts.push(v);
        }
        if !ids.is_empty() {
            parts.push(tape.gather_rows(self.get("dec.tok"), &ids)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 0)?
        };
        let pos = tape.slice(self.get("dec.pos"), 0, 0, len)?;
        let x = tape.add(x, pos)?;
        let mut x = tape.reshape(x, &[1, len, d])?;
        let mask = tape.constant(prefix_mask(len, prefix));
        for l in 0..self.config().dec_layers {
            x = self.block(tape, x, &format!("dec.{l}"), Some(mask))?;
        }
        let x = self.affine_norm(tape, x, "dec.ln_f")?;
        Ok((tape.reshape(x, &[len, d])?, prefix))
    }

    pub fn lm_head(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var, ModelError> {
        Ok(tape.linear(hidden, self.get("head.w"), self.get("head.b"))?)
    }

    /// Next-token logits `[T+1, vocab]`: row `t` predicts report token `t`
    /// given `y_prefix[..t]`.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<T>,
        h_v: Option<Var>,
        instruction: &[usize],
        y_prefix: &[usize],
    ) -> Result<Var, ModelError> {
        let (hidden, prefix) = self.decoder_hidden(tape, h_v, instruction, y_prefix)?;
        if prefix == 0 {
            return Err(ModelError::Input("decoding needs a nonempty prefix".into()));
        }
        let rows = tape.slice(hidden, 0, prefix - 1, y_prefix.len() + 1)?;
        self.lm_head(tape, rows)
    }

    /// Final hidden state at the last text position of `[instruction; text]`,
    /// shape `[d_w]`.
    pub fn represent_text(
        &self,
        tape: &mut Tape<T>,
        instruction: &[usize],
        text: &[usize],
    ) -> Result<Var, ModelError> {
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let (hidden, _) = self.decoder_hidden(tape, None, instruction, text)?;
        let len = tape.shape(hidden)[0];
        let last = tape.slice(hidden, 0, len - 1, 1)?;
        Ok(tape.reshape(last, &[self.config().d_w])?)
    }

    /// Entity-group features `V_D: [N_d, H, d_enc]`, each the mean of `V`
    /// over the slices of that entity's layers.
    pub fn select(
        &self,
        tape: &mut Tape<T>,
        v: Var,
        present: &[usize],
        layer_map: &LayerMap,
    ) -> Result<Option<Var>, ModelError> {
        select(tape, v, present, layer_map)
    }

    /// Foreground probabilities `[N_d, 32, 32]`.
    pub fn segment(&self, tape: &mut Tape<T>, v_d: Var) -> Result<Var, ModelError> {
        let cfg = self.config();
        let n = tape.shape(v_d)[0];
        let logits = tape.linear(v_d, self.get("seg.w"), self.get("seg.b"))?;
        let index = upsample_index(n, cfg);
        let up = tape.gather(logits, &index, &[n, SLICE_SIZE, SLICE_SIZE])?;
        Ok(tape.sigmoid(up)?)
    }

    /// `R_v^e = Linear_v^e(GAP(V_D))`, shape `[N_d, d_align]`.
    pub fn pool_entity(&self, tape: &mut Tape<T>, v_d: Var) -> Result<Var, ModelError> {
        let gap = tape.mean(v_d, 1)?;
        Ok(tape.linear(gap, self.get("map.ve.w"), self.get("map.ve.b"))?)
    }

    /// `R_v^t = Linear_v^t(GMP(V))` over all `N*H` rows, shape `[d_align]`.
    pub fn pool_theme(&self, tape: &mut Tape<T>, v: Var) -> Result<Var, ModelError> {
        let s = tape.shape(v).to_vec();
        let rows = tape.reshape(v, &[s[0] * s[1], s[2]])?;
        let gmp = tape.max(rows, 0)?;
        let gmp = tape.reshape(gmp, &[1, s[2]])?;
        let r = tape.linear(gmp, self.get("map.vt.w"), self.get("map.vt.b"))?;
        Ok(tape.reshape(r, &[self.config().d_align])?)
    }

    /// Text-side entity mapper `Linear_t^e`.
    pub fn map_text_entity(&self, tape: &mut Tape<T>, r_w: Var) -> Result<Var, ModelError> {
        Ok(tape.linear(r_w, self.get("map.te.w"), self.get("map.te.b"))?)
    }

    /// Text-side theme mapper `Linear_t^t`.
    pub fn map_text_theme(&self, tape: &mut Tape<T>, r_w: Var) -> Result<Var, ModelError> {
        Ok(tape.linear(r_w, self.get("map.tt.w"), self.get("map.tt.b"))?)
    }
}

pub fn select<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    present: &[usize],
    layer_map: &LayerMap,
) -> Result<Option<Var>, ModelError> {
    if present.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(present.len());
    for &e in present {
        let slices = layer_map.slices(e);
        let (Some(&first), Some(&last)) = (slices.first(), slices.last()) else {
            return Err(ModelError::Input(format!("entity {e} maps to no slices")));
        };
        let group = if last - first + 1 == slices.len() {
            tape.slice(v, 0, first, slices.len())?
        } else {
            let parts = slices
                .iter()
                .map(|&s| tape.slice(v, 0, s, 1))
                .collect::<Result<Vec<_>, _>>()?;
            tape.concat(&parts, 0)?
        };
        let m = tape.mean(group, 0)?;
        let s = tape.shape(m).to_vec();
        rows.push(tape.reshape(m, &[1, s[0], s[1]])?);
    }
    Ok(Some(if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, 0)?
    }))
}

/// Additive attention mask: prefix rows see the whole prefix, later rows see
/// everything up to themselves.
pub fn prefix_mask<T: Real>(len: usize, prefix: usize) -> Tensor<T> {
    let masked = T::from_f64_lossy(MASKED);
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        let visible = if i < prefix { prefix } else { i + 1 };
        for j in visible..len {
            data[i * len + j] = masked;
        }
    }
    Tensor::new(vec![len, len], data).expect("square mask")
}

/// Maps each output pixel to its patch sub-cell logit in a flattened
/// `[n, H, cells^2]` tensor.
fn upsample_index(n: usize, cfg: &ModelConfig) -> Vec<usize> {
    let (ps, side) = (cfg.patch_size, cfg.patches_per_side());
    let cells = ModelConfig::SEG_CELLS;
    let cell_px = ps / cells;
    let per_patch = cells * cells;
    let per_entity = cfg.patches() * per_patch;
    let mut idx = Vec::with_capacity(n * SLICE_SIZE * SLICE_SIZE);
    for e in 0..n {
        for y in 0..SLICE_SIZE {
            for x in 0..SLICE_SIZE {
                let patch = (y / ps) * side + x / ps;
                let cell = ((y % ps) / cell_px) * cells + (x % ps) / cell_px;
                idx.push(e * per_entity + patch * per_patch + cell);
            }
        }
    }
    idx
}
