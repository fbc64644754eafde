//! Patch-attention regressor: patchify → linear embed + learned position →
//! pre-norm transformer blocks → mean pool → small MLP head with sigmoid
//! outputs in [0,1]^2. The backward pass is written out layer by layer and
//! verified against central finite differences in the tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::*;
use crate::error::{Error, Result};
use crate::geom::Vec2;

/// Architecture hyperparameters. `extra_head_inputs` is 0 for the image
/// action encoding and 2 when the action enters the regression head as a
/// normalized vector instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitConfig {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    pub head_hidden: usize,
    pub extra_head_inputs: usize,
    /// Trackway extent (cm), used to rescale the normalized output.
    pub extent: Vec2,
}

impl VitConfig {
    /// The desk-scale architecture for a 120x120 trackway image.
    pub fn standard(extent: Vec2) -> Self {
        VitConfig {
            rows: 120,
            cols: 120,
            channels: 3,
            patch: 12,
            embed: 64,
            blocks: 2,
            heads: 4,
            ff: 128,
            head_hidden: 32,
            extra_head_inputs: 0,
            extent,
        }
    }

    /// Same backbone over (depth, delta) only; the action vector joins the
    /// pooled token at the regression head.
    pub fn ablation(extent: Vec2) -> Self {
        VitConfig {
            channels: 2,
            extra_head_inputs: 2,
            ..Self::standard(extent)
        }
    }

    /// Tiny configuration for gradient checking.
    pub fn tiny(channels: usize, extra_head_inputs: usize) -> Self {
        VitConfig {
            rows: 8,
            cols: 8,
            channels,
            patch: 4,
            embed: 8,
            blocks: 1,
            heads: 2,
            ff: 16,
            head_hidden: 4,
            extra_head_inputs,
            extent: Vec2::new(60.0, 60.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.patch == 0 {
            return Err(Error::Config("image and patch dims must be positive".into()));
        }
        if self.rows % self.patch != 0 || self.cols % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide image {}x{}",
                self.patch, self.rows, self.cols
            )));
        }
        if self.embed % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed
            )));
        }
        if !(2..=3).contains(&self.channels) || (self.extra_head_inputs != 0 && self.extra_head_inputs != 2) {
            return Err(Error::Config("channels must be 2 or 3, extra head inputs 0 or 2".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.rows / self.patch) * (self.cols / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// All learnable tensors, stored as one flat f64 vector with a fixed layout
/// (see `ParamGroup`). Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: VitConfig,
    pub data: Vec<f64>,
}

struct Layout {
    groups: Vec<ParamGroup>,
    total: usize,
}

impl Layout {
    fn build(cfg: &VitConfig) -> Layout {
        let e = cfg.embed;
        let mut groups = Vec::new();
        let mut offset = 0;
        let mut push = |groups: &mut Vec<ParamGroup>, name: String, len: usize| {
            groups.push(ParamGroup {
                name,
                offset,
                len,
            });
            offset += len;
        };
        push(&mut groups, "patch_w".into(), cfg.patch_dim() * e);
        push(&mut groups, "patch_b".into(), e);
        push(&mut groups, "pos".into(), cfg.tokens() * e);
        for b in 0..cfg.blocks {
            for (suffix, len) in [
                ("ln1_g", e),
                ("ln1_b", e),
                ("wq", e * e),
                ("bq", e),
                ("wk", e * e),
                ("bk", e),
                ("wv", e * e),
                ("bv", e),
                ("wo", e * e),
                ("bo", e),
                ("ln2_g", e),
                ("ln2_b", e),
                ("ff_w1", e * cfg.ff),
                ("ff_b1", cfg.ff),
                ("ff_w2", cfg.ff * e),
                ("ff_b2", e),
            ] {
                push(&mut groups, format!("block{b}.{suffix}"), len);
            }
        }
        push(&mut groups, "final_g".into(), e);
        push(&mut groups, "final_b".into(), e);
        let head_in = e + cfg.extra_head_inputs;
        push(&mut groups, "head_w1".into(), head_in * cfg.head_hidden);
        push(&mut groups, "head_b1".into(), cfg.head_hidden);
        push(&mut groups, "head_w2".into(), cfg.head_hidden * 2);
        push(&mut groups, "head_b2".into(), 2);
        Layout { groups, total: offset }
    }

    fn find(&self, name: &str) -> &ParamGroup {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .unwrap_or_else(|| panic!("no parameter group {name}"))
    }
}

impl ModelParams {
    /// Seeded initialization: uniform Xavier weights, zero biases, unit
    /// normalization gains, small uniform position embeddings.
    pub fn init(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.total];
        for group in &layout.groups {
            let slice = &mut data[group.offset..group.offset + group.len];
            let leaf = group.name.rsplit('.').next().unwrap();
            match leaf {
                "ln1_g" | "ln2_g" | "final_g" => slice.fill(1.0),
                "pos" => {
                    for v in slice.iter_mut() {
                        *v = rng.gen_range(-0.02..0.02);
                    }
                }
                name if name.starts_with('w') || name.starts_with("ff_w") || name.starts_with("head_w") || name == "patch_w" => {
                    let (fan_in, fan_out) = fan_dims(&cfg, leaf);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in slice.iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                _ => {} // biases stay zero
            }
        }
        Ok(ModelParams { cfg, data })
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        Layout::build(&self.cfg).groups
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn slice(&self, layout: &Layout, name: &str) -> std::ops::Range<usize> {
        let g = layout.find(name);
        g.offset..g.offset + g.len
    }
}

fn fan_dims(cfg: &VitConfig, leaf: &str) -> (usize, usize) {
    let e = cfg.embed;
    match leaf {
        "patch_w" => (cfg.patch_dim(), e),
        "wq" | "wk" | "wv" | "wo" => (e, e),
        "ff_w1" => (e, cfg.ff),
        "ff_w2" => (cfg.ff, e),
        "head_w1" => (e + cfg.extra_head_inputs, cfg.head_hidden),
        "head_w2" => (cfg.head_hidden, 2),
        other => panic!("unknown weight tensor {other}"),
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    patches: Vec<f64>, // [T, patch_dim]
    blocks: Vec<BlockCache>,
    final_xhat: Vec<f64>,
    final_inv_std: Vec<f64>,
    pooled_full: Vec<f64>,      // pooled token (+ action vector when present)
    head_pre1: Vec<f64>,
    head_act1: Vec<f64>,
    pub out: [f64; 2],          // sigmoid outputs in (0,1)
}

struct BlockCache {
    ln1_xhat: Vec<f64>,
    ln1_inv_std: Vec<f64>,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,   // [heads, T, T] softmax weights
    concat: Vec<f64>, // [T, E] heads re-assembled
    ln2_xhat: Vec<f64>,
    ln2_inv_std: Vec<f64>,
    ln2_out: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
}

/// Extract standardized image channels into per-token patch vectors:
/// token (pr, pc), features ordered channel-major then row-major in patch.
fn patchify(cfg: &VitConfig, input: &[f64]) -> Vec<f64> {
    let p = cfg.patch;
    let (rows, cols) = (cfg.rows, cfg.cols);
    let tokens_across = cols / p;
    let mut patches = vec![0.0; cfg.tokens() * cfg.patch_dim()];
    let pd = cfg.patch_dim();
    for t in 0..cfg.tokens() {
        let pr = t / tokens_across;
        let pc = t % tokens_across;
        let dst = &mut patches[t * pd..(t + 1) * pd];
        let mut f = 0;
        for ch in 0..cfg.channels {
            let plane = &input[ch * rows * cols..(ch + 1) * rows * cols];
            for i in 0..p {
                let row = pr * p + i;
                let src = &plane[row * cols + pc * p..row * cols + pc * p + p];
                dst[f..f + p].copy_from_slice(src);
                f += p;
            }
        }
    }
    patches
}

/// Forward pass for one sample. `input` is the standardized channel stack
/// `[channels, rows, cols]`; `extra` is the normalized action vector for the
/// head-input variant. Returns the sigmoid outputs with the cache.
pub fn forward(
    params: &ModelParams,
    input: &[f64],
    extra: Option<[f64; 2]>,
) -> Result<ForwardCache> {
    let cfg = &params.cfg;
    let layout = Layout::build(cfg);
    let e = cfg.embed;
    let t = cfg.tokens();
    let pd = cfg.patch_dim();
    if input.len() != cfg.channels * cfg.rows * cfg.cols {
        return Err(Error::ShapeMismatch(format!(
            "input length {} != {} channels x {}x{}",
            input.len(),
            cfg.channels,
            cfg.rows,
            cfg.cols
        )));
    }
    if extra.is_some() != (cfg.extra_head_inputs == 2) {
        return Err(Error::ShapeMismatch(
            "action vector presence must match the model variant".into(),
        ));
    }
    let p = |name: &str| &params.data[params.slice(&layout, name)];

    let patches = patchify(cfg, input);
    let mut x0 = vec![0.0; t * e];
    matmul(&patches, p("patch_w"), &mut x0, t, pd, e);
    add_bias(&mut x0, p("patch_b"), e);
    for (xi, pi) in x0.iter_mut().zip(p("pos")) {
        *xi += *pi;
    }

    let dh = e / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = x0.clone();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let n = |s: &str| format!("block{b}.{s}");
        let x_in = x.clone();

        let mut ln1_out = vec![0.0; t * e];
        let mut ln1_xhat = vec![0.0; t * e];
        let mut ln1_inv_std = vec![0.0; t];
        layer_norm(&x_in, p(&n("ln1_g")), p(&n("ln1_b")), &mut ln1_out, &mut ln1_xhat, &mut ln1_inv_std, e);

        let mut q = vec![0.0; t * e];
        let mut k = vec![0.0; t * e];
        let mut v = vec![0.0; t * e];
        matmul(&ln1_out, p(&n("wq")), &mut q, t, e, e);
        add_bias(&mut q, p(&n("bq")), e);
        matmul(&ln1_out, p(&n("wk")), &mut k, t, e, e);
        add_bias(&mut k, p(&n("bk")), e);
        matmul(&ln1_out, p(&n("wv")), &mut v, t, e, e);
        add_bias(&mut v, p(&n("bv")), e);

        let mut attn = vec![0.0; cfg.heads * t * t];
        let mut concat = vec![0.0; t * e];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut oh = vec![0.0; t * dh];
        for h in 0..cfg.heads {
            gather_head(&q, &mut qh, h, dh, e);
            gather_head(&k, &mut kh, h, dh, e);
            gather_head(&v, &mut vh, h, dh, e);
            let scores = &mut attn[h * t * t..(h + 1) * t * t];
            matmul_bt(&qh, &kh, scores, t, dh, t);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            softmax_rows(scores, t);
            matmul(scores, &vh, &mut oh, t, t, dh);
            scatter_head(&oh, &mut concat, h, dh, e);
        }

        let mut attn_proj = vec![0.0; t * e];
        matmul(&concat, p(&n("wo")), &mut attn_proj, t, e, e);
        add_bias(&mut attn_proj, p(&n("bo")), e);
        let mut x_mid = x_in.clone();
        for (xm, ap) in x_mid.iter_mut().zip(&attn_proj) {
            *xm += *ap;
        }

        let mut ln2_out = vec![0.0; t * e];
        let mut ln2_xhat = vec![0.0; t * e];
        let mut ln2_inv_std = vec![0.0; t];
        layer_norm(&x_mid, p(&n("ln2_g")), p(&n("ln2_b")), &mut ln2_out, &mut ln2_xhat, &mut ln2_inv_std, e);

        let mut ff_pre = vec![0.0; t * cfg.ff];
        matmul(&ln2_out, p(&n("ff_w1")), &mut ff_pre, t, e, cfg.ff);
        add_bias(&mut ff_pre, p(&n("ff_b1")), cfg.ff);
        let ff_act: Vec<f64> = ff_pre.iter().map(|&u| gelu(u)).collect();
        let mut ff_out = vec![0.0; t * e];
        matmul(&ff_act, p(&n("ff_w2")), &mut ff_out, t, cfg.ff, e);
        add_bias(&mut ff_out, p(&n("ff_b2")), e);

        x = x_mid.clone();
        for (xv, f) in x.iter_mut().zip(&ff_out) {
            *xv += *f;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activations in block {b}")));
        }

        blocks.push(BlockCache {
            ln1_xhat,
            ln1_inv_std,
            ln1_out,
            q,
            k,
            v,
            attn,
            concat,
            ln2_xhat,
            ln2_inv_std,
            ln2_out,
            ff_pre,
            ff_act,
        });
    }

    let mut final_out = vec![0.0; t * e];
    let mut final_xhat = vec![0.0; t * e];
    let mut final_inv_std = vec![0.0; t];
    layer_norm(&x, p("final_g"), p("final_b"), &mut final_out, &mut final_xhat, &mut final_inv_std, e);

    let head_in = e + cfg.extra_head_inputs;
    let mut pooled_full = vec![0.0; head_in];
    for row in final_out.chunks_exact(e) {
        for (acc, &v) in pooled_full[..e].iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in pooled_full[..e].iter_mut() {
        *v /= t as f64;
    }
    if let Some(extra) = extra {
        pooled_full[e] = extra[0];
        pooled_full[e + 1] = extra[1];
    }

    let hh = cfg.head_hidden;
    let mut head_pre1 = vec![0.0; hh];
    matmul(&pooled_full, p("head_w1"), &mut head_pre1, 1, head_in, hh);
    add_bias(&mut head_pre1, p("head_b1"), hh);
    let head_act1: Vec<f64> = head_pre1.iter().map(|&u| gelu(u)).collect();
    let mut head_pre2 = vec![0.0; 2];
    matmul(&head_act1, p("head_w2"), &mut head_pre2, 1, hh, 2);
    add_bias(&mut head_pre2, p("head_b2"), 2);
    let out = [sigmoid(head_pre2[0]), sigmoid(head_pre2[1])];
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite activations in head".into()));
    }

    Ok(ForwardCache {
        patches,
        blocks,
        final_xhat,
        final_inv_std,
        pooled_full,
        head_pre1,
        head_act1,
        out,
    })
}

fn gather_head(src: &[f64], dst: &mut [f64], h: usize, dh: usize, e: usize) {
    for (t, row) in src.chunks_exact(e).enumerate() {
        dst[t * dh..(t + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], dst: &mut [f64], h: usize, dh: usize, e: usize) {
    for (t, row) in src.chunks_exact(dh).enumerate() {
        dst[t * e + h * dh..t * e + (h + 1) * dh].copy_from_slice(row);
    }
}

fn scatter_head_add(src: &[f64], dst: &mut [f64], h: usize, dh: usize, e: usize) {
    for (t, row) in src.chunks_exact(dh).enumerate() {
        for (d, &s) in dst[t * e + h * dh..t * e + (h + 1) * dh].iter_mut().zip(row) {
            *d += s;
        }
    }
}

/// Backward pass: gradient of a scalar loss with `d_out` = dL/d(sigmoid
/// outputs), returning dL/dparams in the flat layout.
pub fn backward(params: &ModelParams, cache: &ForwardCache, d_out: [f64; 2]) -> Vec<f64> {
    let cfg = &params.cfg;
    let layout = Layout::build(cfg);
    let e = cfg.embed;
    let t = cfg.tokens();
    let hh = cfg.head_hidden;
    let head_in = e + cfg.extra_head_inputs;
    let p = |name: &str| &params.data[params.slice(&layout, name)];
    let mut grads = vec![0.0; params.data.len()];

    // Split mutable access to the gradient vector by group. Gain/bias pairs
    // are adjacent in the layout, so a norm layer borrows one combined slice.
    macro_rules! g {
        ($gr:expr, $name:expr) => {{
            let r = params.slice(&layout, $name);
            &mut $gr[r]
        }};
    }
    macro_rules! g_pair {
        ($gr:expr, $gain:expr, $bias:expr) => {{
            let rg = params.slice(&layout, $gain);
            let rb = params.slice(&layout, $bias);
            debug_assert_eq!(rg.end, rb.start);
            $gr[rg.start..rb.end].split_at_mut(rg.end - rg.start)
        }};
    }

    // Head: sigmoid -> linear -> gelu -> linear.
    let mut d_pre2 = [0.0; 2];
    for j in 0..2 {
        let s = cache.out[j];
        d_pre2[j] = d_out[j] * s * (1.0 - s);
    }
    matmul_at_acc(&cache.head_act1, &d_pre2, g!(grads, "head_w2"), 1, hh, 2);
    col_sum_acc(&d_pre2, g!(grads, "head_b2"), 2);
    let mut d_act1 = vec![0.0; hh];
    matmul_bt(&d_pre2, p("head_w2"), &mut d_act1, 1, 2, hh);
    let d_pre1: Vec<f64> = d_act1
        .iter()
        .zip(&cache.head_pre1)
        .map(|(&d, &u)| d * gelu_derivative(u))
        .collect();
    matmul_at_acc(&cache.pooled_full, &d_pre1, g!(grads, "head_w1"), 1, head_in, hh);
    col_sum_acc(&d_pre1, g!(grads, "head_b1"), hh);
    let mut d_pooled_full = vec![0.0; head_in];
    matmul_bt(&d_pre1, p("head_w1"), &mut d_pooled_full, 1, hh, head_in);

    // Un-pool into the final-norm output, then through the final norm.
    let mut d_final_out = vec![0.0; t * e];
    let inv_t = 1.0 / t as f64;
    for row in d_final_out.chunks_exact_mut(e) {
        for (d, &dp) in row.iter_mut().zip(&d_pooled_full[..e]) {
            *d = dp * inv_t;
        }
    }
    let mut d_x = vec![0.0; t * e];
    {
        let (dg, db) = g_pair!(grads, "final_g", "final_b");
        layer_norm_backward(
            &d_final_out,
            &cache.final_xhat,
            &cache.final_inv_std,
            p("final_g"),
            &mut d_x,
            dg,
            db,
            e,
        );
    }

    let dh = e / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for (b, bc) in cache.blocks.iter().enumerate().rev() {
        let n = |s: &str| format!("block{b}.{s}");

        // Feed-forward half: x = x_mid + ff(ln2(x_mid)).
        let d_ff_out = d_x.clone(); // residual passes d_x through as well
        let mut d_ff_act = vec![0.0; t * cfg.ff];
        matmul_bt(&d_ff_out, p(&n("ff_w2")), &mut d_ff_act, t, e, cfg.ff);
        matmul_at_acc(&bc.ff_act, &d_ff_out, g!(grads, &n("ff_w2")), t, cfg.ff, e);
        col_sum_acc(&d_ff_out, g!(grads, &n("ff_b2")), e);
        let d_ff_pre: Vec<f64> = d_ff_act
            .iter()
            .zip(&bc.ff_pre)
            .map(|(&d, &u)| d * gelu_derivative(u))
            .collect();
        matmul_at_acc(&bc.ln2_out, &d_ff_pre, g!(grads, &n("ff_w1")), t, e, cfg.ff);
        col_sum_acc(&d_ff_pre, g!(grads, &n("ff_b1")), cfg.ff);
        let mut d_ln2_out = vec![0.0; t * e];
        matmul_bt(&d_ff_pre, p(&n("ff_w1")), &mut d_ln2_out, t, cfg.ff, e);
        let mut d_x_mid = d_x.clone();
        let mut d_ln2_in = vec![0.0; t * e];
        {
            let (dg, db) = g_pair!(grads, &n("ln2_g"), &n("ln2_b"));
            layer_norm_backward(
                &d_ln2_out,
                &bc.ln2_xhat,
                &bc.ln2_inv_std,
                p(&n("ln2_g")),
                &mut d_ln2_in,
                dg,
                db,
                e,
            );
        }
        for (dm, dl) in d_x_mid.iter_mut().zip(&d_ln2_in) {
            *dm += *dl;
        }

        // Attention half: x_mid = x_in + proj(concat).
        let d_proj = &d_x_mid;
        let mut d_concat = vec![0.0; t * e];
        matmul_bt(d_proj, p(&n("wo")), &mut d_concat, t, e, e);
        matmul_at_acc(&bc.concat, d_proj, g!(grads, &n("wo")), t, e, e);
        col_sum_acc(d_proj, g!(grads, &n("bo")), e);

        let mut d_q = vec![0.0; t * e];
        let mut d_k = vec![0.0; t * e];
        let mut d_v = vec![0.0; t * e];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut d_oh = vec![0.0; t * dh];
        let mut d_a = vec![0.0; t * t];
        let mut d_s = vec![0.0; t * t];
        let mut d_qh = vec![0.0; t * dh];
        let mut d_kh = vec![0.0; t * dh];
        let mut d_vh = vec![0.0; t * dh];
        for h in 0..cfg.heads {
            gather_head(&bc.q, &mut qh, h, dh, e);
            gather_head(&bc.k, &mut kh, h, dh, e);
            gather_head(&bc.v, &mut vh, h, dh, e);
            gather_head(&d_concat, &mut d_oh, h, dh, e);
            let a = &bc.attn[h * t * t..(h + 1) * t * t];
            // O = A V
            matmul_bt(&d_oh, &vh, &mut d_a, t, dh, t);
            matmul_at_acc(a, &d_oh, &mut d_vh, t, t, dh);
            softmax_backward(a, &d_a, &mut d_s, t);
            for s in d_s.iter_mut() {
                *s *= scale;
            }
            matmul(&d_s, &kh, &mut d_qh, t, t, dh);
            matmul_at_acc(&d_s, &qh, &mut d_kh, t, t, dh);
            scatter_head_add(&d_qh, &mut d_q, h, dh, e);
            scatter_head_add(&d_kh, &mut d_k, h, dh, e);
            scatter_head_add(&d_vh, &mut d_v, h, dh, e);
            d_vh.fill(0.0);
            d_kh.fill(0.0);
        }

        matmul_at_acc(&bc.ln1_out, &d_q, g!(grads, &n("wq")), t, e, e);
        col_sum_acc(&d_q, g!(grads, &n("bq")), e);
        matmul_at_acc(&bc.ln1_out, &d_k, g!(grads, &n("wk")), t, e, e);
        col_sum_acc(&d_k, g!(grads, &n("bk")), e);
        matmul_at_acc(&bc.ln1_out, &d_v, g!(grads, &n("wv")), t, e, e);
        col_sum_acc(&d_v, g!(grads, &n("bv")), e);

        let mut d_ln1_out = vec![0.0; t * e];
        let mut tmp = vec![0.0; t * e];
        matmul_bt(&d_q, p(&n("wq")), &mut d_ln1_out, t, e, e);
        matmul_bt(&d_k, p(&n("wk")), &mut tmp, t, e, e);
        for (a, b) in d_ln1_out.iter_mut().zip(&tmp) {
            *a += *b;
        }
        matmul_bt(&d_v, p(&n("wv")), &mut tmp, t, e, e);
        for (a, b) in d_ln1_out.iter_mut().zip(&tmp) {
            *a += *b;
        }

        let mut d_ln1_in = vec![0.0; t * e];
        {
            let (dg, db) = g_pair!(grads, &n("ln1_g"), &n("ln1_b"));
            layer_norm_backward(
                &d_ln1_out,
                &bc.ln1_xhat,
                &bc.ln1_inv_std,
                p(&n("ln1_g")),
                &mut d_ln1_in,
                dg,
                db,
                e,
            );
        }

        // d x_in = residual (d_x_mid) + ln1 path.
        d_x = d_x_mid;
        for (dx, dl) in d_x.iter_mut().zip(&d_ln1_in) {
            *dx += *dl;
        }
    }

    // Embedding: x0 = patches @ patch_w + patch_b + pos.
    for (gp, dx) in g!(grads, "pos").iter_mut().zip(&d_x) {
        *gp += *dx;
    }
    col_sum_acc(&d_x, g!(grads, "patch_b"), e);
    matmul_at_acc(&cache.patches, &d_x, g!(grads, "patch_w"), t, cfg.patch_dim(), e);

    grads
}
