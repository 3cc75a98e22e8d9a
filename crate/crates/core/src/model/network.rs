//! Forward pass with a tape of intermediates, and the matching backward pass.
//!
//! Positions are flattened row-major (`p = r * width + c`). `[PAD]`
//! positions are in no attention group, receive no residual updates and are
//! left out of the column sum, so they cannot influence any other position.

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{
    cast, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    log_sum_exp, AttentionProbs, GroupAttention, NormCache,
};
use super::{Attention, Layer, ModelError, Params, Real};
use crate::encoding::{TokenGrid, TokenId};

struct Geometry<F> {
    width: usize,
    valid: Vec<bool>,
    row_groups: Vec<Vec<usize>>,
    col_groups: Vec<Vec<usize>>,
    /// 1 at real positions, 0 at padding; shape (positions, 1)
    mask: Array2<F>,
}

impl<F: Real> Geometry<F> {
    fn new(grid: &TokenGrid) -> Self {
        let (rows, width) = (grid.rows(), grid.width());
        let valid: Vec<bool> = grid.pad_mask.iter().map(|&pad| !pad).collect();
        let row_groups = (0..rows)
            .map(|r| (0..width).map(|c| r * width + c).filter(|&p| valid[p]).collect())
            .filter(|g: &Vec<usize>| !g.is_empty())
            .collect();
        let col_groups = (0..width)
            .map(|c| (0..rows).map(|r| r * width + c).filter(|&p| valid[p]).collect())
            .filter(|g: &Vec<usize>| !g.is_empty())
            .collect();
        let mask = Array2::from_shape_fn((rows * width, 1), |(p, _)| {
            if valid[p] {
                F::one()
            } else {
                F::zero()
            }
        });
        Geometry {
            width,
            valid,
            row_groups,
            col_groups,
            mask,
        }
    }
}

struct AttnTape<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: AttentionProbs<F>,
    ctx: Array2<F>,
}

struct LayerTape<F> {
    n1: Array2<F>,
    norm1: NormCache<F>,
    row: AttnTape<F>,
    col: AttnTape<F>,
    gate1: Array2<F>,
    n2: Array2<F>,
    norm2: NormCache<F>,
    ffn_pre: Array2<F>,
    ffn_act: Array2<F>,
    gate2: Array2<F>,
}

struct Tape<F> {
    geometry: Geometry<F>,
    layers: Vec<LayerTape<F>>,
    pooled: Array2<F>,
    dense: NormCache<F>,
    normed: Array2<F>,
}

fn validate<F: Real>(params: &Params<F>, grid: &TokenGrid) -> Result<(), ModelError> {
    let cfg = &params.config;
    if grid.width() > cfg.max_row_positions {
        return Err(ModelError::WidthExceeded {
            width: grid.width(),
            max: cfg.max_row_positions,
        });
    }
    if let Some(&id) = grid.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    if grid.labels.len() != grid.width() {
        return Err(ModelError::LabelMismatch {
            labels: grid.labels.len(),
            width: grid.width(),
        });
    }
    if let Some(id) = grid.labels.iter().flatten().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id: *id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Mask times inverted dropout, broadcast to `(positions, cols)`.
fn gate<F: Real>(mask: &Array2<F>, cols: usize, dropout: Option<(&mut ChaCha8Rng, f64)>) -> Array2<F> {
    let mut g = Array2::from_shape_fn((mask.nrows(), cols), |(p, _)| mask[[p, 0]]);
    if let Some((rng, rate)) = dropout {
        let keep = cast::<F>(1.0 / (1.0 - rate));
        for x in g.iter_mut() {
            *x = if rng.random::<f64>() < rate { F::zero() } else { *x * keep };
        }
    }
    g
}

fn attention_forward<F: Real>(
    attn: &Attention<F>,
    x: &Array2<F>,
    groups: &[Vec<usize>],
    heads: usize,
) -> (Array2<F>, AttnTape<F>) {
    let q = linear(x, &attn.query.weight, &attn.query.bias);
    let k = linear(x, &attn.key.weight, &attn.key.bias);
    let v = linear(x, &attn.value.weight, &attn.value.bias);
    let (ctx, probs) = GroupAttention { groups, heads }.forward(&q, &k, &v);
    let out = linear(&ctx, &attn.output.weight, &attn.output.bias);
    (out, AttnTape { q, k, v, probs, ctx })
}

/// Returns the gradient with respect to the attention input.
fn attention_backward<F: Real>(
    attn: &Attention<F>,
    grad: &mut Attention<F>,
    x: &Array2<F>,
    tape: &AttnTape<F>,
    groups: &[Vec<usize>],
    heads: usize,
    dout: &Array2<F>,
) -> Array2<F> {
    let dctx = linear_backward(
        &tape.ctx,
        &attn.output.weight,
        dout,
        &mut grad.output.weight,
        &mut grad.output.bias,
    );
    let (dq, dk, dv) =
        GroupAttention { groups, heads }.backward(&tape.q, &tape.k, &tape.v, &tape.probs, &dctx);
    let mut dx = linear_backward(x, &attn.query.weight, &dq, &mut grad.query.weight, &mut grad.query.bias);
    dx += &linear_backward(x, &attn.key.weight, &dk, &mut grad.key.weight, &mut grad.key.bias);
    dx += &linear_backward(x, &attn.value.weight, &dv, &mut grad.value.weight, &mut grad.value.bias);
    dx
}

fn layer_forward<F: Real>(
    layer: &Layer<F>,
    h: &mut Array2<F>,
    geo: &Geometry<F>,
    heads: usize,
    mut dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> LayerTape<F> {
    let hidden = h.ncols();
    let (n1, norm1) = layer_norm(h, &layer.attn_norm.scale, &layer.attn_norm.offset);
    let (row_out, row) = attention_forward(&layer.row_attn, &n1, &geo.row_groups, heads);
    let (col_out, col) = attention_forward(&layer.col_attn, &n1, &geo.col_groups, heads);
    let gate1 = gate(&geo.mask, hidden, dropout.as_mut().map(|(r, p)| (&mut **r, *p)));
    *h += &((row_out + col_out) * &gate1);

    let (n2, norm2) = layer_norm(h, &layer.ffn_norm.scale, &layer.ffn_norm.offset);
    let ffn_pre = linear(&n2, &layer.ffn_in.weight, &layer.ffn_in.bias);
    let ffn_act = gelu(&ffn_pre);
    let ffn_out = linear(&ffn_act, &layer.ffn_out.weight, &layer.ffn_out.bias);
    let gate2 = gate(&geo.mask, hidden, dropout.as_mut().map(|(r, p)| (&mut **r, *p)));
    *h += &(ffn_out * &gate2);

    LayerTape {
        n1,
        norm1,
        row,
        col,
        gate1,
        n2,
        norm2,
        ffn_pre,
        ffn_act,
        gate2,
    }
}

/// Takes the gradient at the layer output, returns it at the layer input.
fn layer_backward<F: Real>(
    layer: &Layer<F>,
    grad: &mut Layer<F>,
    tape: &LayerTape<F>,
    geo: &Geometry<F>,
    heads: usize,
    dh: Array2<F>,
) -> Array2<F> {
    let dffn = &dh * &tape.gate2;
    let dact = linear_backward(
        &tape.ffn_act,
        &layer.ffn_out.weight,
        &dffn,
        &mut grad.ffn_out.weight,
        &mut grad.ffn_out.bias,
    );
    let dpre = gelu_backward(&tape.ffn_pre, &dact);
    let dn2 = linear_backward(&tape.n2, &layer.ffn_in.weight, &dpre, &mut grad.ffn_in.weight, &mut grad.ffn_in.bias);
    let mut dh = dh;
    dh += &layer_norm_backward(
        &tape.norm2,
        &layer.ffn_norm.scale,
        &dn2,
        &mut grad.ffn_norm.scale,
        &mut grad.ffn_norm.offset,
    );

    let dsum = &dh * &tape.gate1;
    let mut dn1 = attention_backward(
        &layer.row_attn,
        &mut grad.row_attn,
        &tape.n1,
        &tape.row,
        &geo.row_groups,
        heads,
        &dsum,
    );
    dn1 += &attention_backward(
        &layer.col_attn,
        &mut grad.col_attn,
        &tape.n1,
        &tape.col,
        &geo.col_groups,
        heads,
        &dsum,
    );
    dh += &layer_norm_backward(
        &tape.norm1,
        &layer.attn_norm.scale,
        &dn1,
        &mut grad.attn_norm.scale,
        &mut grad.attn_norm.offset,
    );
    dh
}

fn run<F: Real>(
    params: &Params<F>,
    grid: &TokenGrid,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> (Array2<F>, Tape<F>) {
    let cfg = &params.config;
    let geometry = Geometry::<F>::new(grid);
    let width = geometry.width;
    let mut h = Array2::<F>::zeros((grid.rows() * width, cfg.hidden_size));
    for (p, (&id, mut row)) in grid.ids.iter().zip(h.rows_mut()).enumerate() {
        if geometry.valid[p] {
            row.assign(&params.token_embedding.row(id as usize));
            row += &params.position_embedding.row(p % width);
        }
    }
    let rate = cfg.dropout;
    let layers = params
        .layers
        .iter()
        .map(|layer| {
            let d = dropout.as_mut().filter(|_| rate > 0.0).map(|r| (&mut **r, rate));
            layer_forward(layer, &mut h, &geometry, cfg.num_heads, d)
        })
        .collect();

    let mut pooled = Array2::<F>::zeros((width, cfg.hidden_size));
    for (p, row) in h.rows().into_iter().enumerate() {
        if geometry.valid[p] {
            let mut acc = pooled.row_mut(p % width);
            acc += &row;
        }
    }
    let dense_out = linear(&pooled, &params.head_dense.weight, &params.head_dense.bias);
    let (normed, dense) = layer_norm(&dense_out, &params.head_norm.scale, &params.head_norm.offset);
    let logits = linear(&normed, &params.classifier.weight, &params.classifier.bias);
    (
        logits,
        Tape {
            geometry,
            layers,
            pooled,
            dense,
            normed,
        },
    )
}

fn backprop<F: Real>(params: &Params<F>, tape: &Tape<F>, grid: &TokenGrid, dlogits: &Array2<F>, grad: &mut Params<F>) {
    let cfg = &params.config;
    let geo = &tape.geometry;
    let dnormed = linear_backward(
        &tape.normed,
        &params.classifier.weight,
        dlogits,
        &mut grad.classifier.weight,
        &mut grad.classifier.bias,
    );
    let ddense = layer_norm_backward(
        &tape.dense,
        &params.head_norm.scale,
        &dnormed,
        &mut grad.head_norm.scale,
        &mut grad.head_norm.offset,
    );
    let dpooled = linear_backward(
        &tape.pooled,
        &params.head_dense.weight,
        &ddense,
        &mut grad.head_dense.weight,
        &mut grad.head_dense.bias,
    );

    let mut dh = Array2::<F>::zeros((geo.valid.len(), cfg.hidden_size));
    for (p, mut row) in dh.rows_mut().into_iter().enumerate() {
        if geo.valid[p] {
            row.assign(&dpooled.row(p % geo.width));
        }
    }
    for ((layer, g), lt) in params
        .layers
        .iter()
        .zip(grad.layers.iter_mut())
        .zip(&tape.layers)
        .rev()
    {
        dh = layer_backward(layer, g, lt, geo, cfg.num_heads, dh);
    }
    for (p, (&id, row)) in grid.ids.iter().zip(dh.rows()).enumerate() {
        if geo.valid[p] {
            let mut t = grad.token_embedding.row_mut(id as usize);
            t += &row;
            let mut c = grad.position_embedding.row_mut(p % geo.width);
            c += &row;
        }
    }
}

/// Logits of shape `(width, vocab_size)`, inference mode (no dropout).
pub fn forward<F: Real>(params: &Params<F>, grid: &TokenGrid) -> Result<Array2<F>, ModelError> {
    validate(params, grid)?;
    Ok(run(params, grid, None).0)
}

/// Mean cross-entropy over labelled columns.
pub fn loss<F: Real>(logits: &Array2<F>, labels: &[Option<TokenId>]) -> Result<F, ModelError> {
    if labels.len() != logits.nrows() {
        return Err(ModelError::LabelMismatch {
            labels: labels.len(),
            width: logits.nrows(),
        });
    }
    let (sum, n) = summed_loss(logits, labels);
    if n == 0 {
        return Err(ModelError::NoSupervisedPositions);
    }
    Ok(sum / cast(n as f64))
}

fn summed_loss<F: Real>(logits: &Array2<F>, labels: &[Option<TokenId>]) -> (F, usize) {
    let mut sum = F::zero();
    let mut n = 0;
    for (c, label) in labels.iter().enumerate() {
        if let Some(label) = *label {
            sum += log_sum_exp(logits.view(), c) - logits[[c, label as usize]];
            n += 1;
        }
    }
    (sum, n)
}

/// Gradient of the summed loss divided by `denominator`.
fn loss_gradient<F: Real>(logits: &Array2<F>, labels: &[Option<TokenId>], denominator: F) -> Array2<F> {
    let mut d = Array2::<F>::zeros(logits.raw_dim());
    for (c, label) in labels.iter().enumerate() {
        if let Some(label) = *label {
            let lse = log_sum_exp(logits.view(), c);
            let mut row = d.row_mut(c);
            row.assign(&logits.row(c).mapv(|x| (x - lse).exp() / denominator));
            row[label as usize] -= F::one() / denominator;
        }
    }
    d
}

/// Mean loss over every labelled position in the batch and its gradient.
/// Dropout is active when `rng` is given and the configured rate is
/// positive. Instances run in parallel; their gradients are summed in
/// batch order, so results do not depend on the thread count.
pub fn loss_and_gradients<F: Real>(
    params: &Params<F>,
    grids: &[&TokenGrid],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(F, Params<F>), ModelError> {
    for g in grids {
        validate(params, g)?;
    }
    let total: usize = grids.iter().map(|g| g.supervised()).sum();
    if total == 0 {
        return Err(ModelError::NoSupervisedPositions);
    }
    let denominator: F = cast(total as f64);
    let seeds: Option<Vec<u64>> = rng.map(|r| grids.iter().map(|_| r.next_u64()).collect());

    let per_instance = |i: usize| {
        let grid = grids[i];
        let mut local = seeds.as_ref().map(|s| ChaCha8Rng::seed_from_u64(s[i]));
        let (logits, tape) = run(params, grid, local.as_mut());
        let (sum, _) = summed_loss(&logits, &grid.labels);
        let dlogits = loss_gradient(&logits, &grid.labels, denominator);
        let mut grad = params.zeros_like();
        backprop(params, &tape, grid, &dlogits, &mut grad);
        (sum, grad)
    };

    let chunk = rayon::current_num_threads().max(1);
    let mut loss_sum = F::zero();
    let mut total_grad: Option<Params<F>> = None;
    for start in (0..grids.len()).step_by(chunk) {
        let end = (start + chunk).min(grids.len());
        let results: Vec<(F, Params<F>)> = if chunk == 1 {
            (start..end).map(per_instance).collect()
        } else {
            (start..end).into_par_iter().map(per_instance).collect()
        };
        for (sum, grad) in results {
            loss_sum += sum;
            match total_grad.as_mut() {
                None => total_grad = Some(grad),
                Some(acc) => {
                    for (a, g) in acc.tensors_mut().into_iter().zip(grad.tensors()) {
                        for (x, &y) in a.data.iter_mut().zip(g.data) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    let grad = total_grad.expect("at least one instance");
    Ok((loss_sum / denominator, grad))
}

/// Argmax token per column of the target row's sites.
pub fn predict_ids<F: Real>(params: &Params<F>, grid: &TokenGrid) -> Result<Vec<TokenId>, ModelError> {
    let logits = forward(params, grid)?;
    Ok(grid
        .site_columns()
        .map(|c| argmax(logits.row(c).to_owned()))
        .collect())
}

fn argmax<F: Real>(row: Array1<F>) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}
