//! Residual MLP: stem -> residual blocks -> zero-initialized linear head.
//!
//! Activations are tanh throughout (smooth, so central differences converge
//! cleanly in the gradient checks).

use rand::Rng;
use rand_distr::StandardNormal;

use super::{assemble_mlp_input, two_slices, ArchSpec, DenoiserInput, Layout, ModelConfig};
use crate::Real;

fn dims(config: &ModelConfig) -> (usize, usize, usize, usize) {
    let (hidden, blocks) = match config.arch {
        ArchSpec::Mlp { hidden, blocks } => (hidden, blocks),
        _ => unreachable!("mlp path called with non-mlp arch"),
    };
    let input = (config.s + config.p + 1) * config.frame_len() + config.time_embed_dim;
    let output = config.s * config.frame_len();
    (input, hidden, blocks, output)
}

pub(super) fn layout(config: &ModelConfig) -> Layout {
    let (input, hidden, blocks, output) = dims(config);
    let mut l = Layout::default();
    l.push("stem.weight", &[hidden, input]);
    l.push("stem.bias", &[hidden]);
    for k in 0..blocks {
        l.push(&format!("block{k}.w1"), &[hidden, hidden]);
        l.push(&format!("block{k}.b1"), &[hidden]);
        l.push(&format!("block{k}.w2"), &[hidden, hidden]);
        l.push(&format!("block{k}.b2"), &[hidden]);
    }
    l.push("head.weight", &[output, hidden]);
    l.push("head.bias", &[output]);
    l
}

pub(super) fn init<R: Rng + ?Sized>(
    _config: &ModelConfig,
    layout: &Layout,
    theta: &mut [Real],
    rng: &mut R,
) {
    for entry in layout.entries() {
        // Head stays zero; biases stay zero; weights get fan-in scaling.
        if entry.name.starts_with("head") || entry.name.ends_with("bias") || entry.name.contains(".b")
        {
            continue;
        }
        let fan_in = *entry.shape.last().unwrap() as Real;
        let scale = fan_in.sqrt().recip();
        for v in &mut theta[entry.offset..entry.offset + entry.len] {
            let z: Real = rng.sample(StandardNormal);
            *v = scale * z;
        }
    }
}

/// `out[r] = sum_c w[r * cols + c] * x[c] + b[r]`
fn affine(w: &[Real], b: &[Real], rows: usize, cols: usize, x: &[Real]) -> Vec<Real> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    out
}

/// `gx[c] += sum_r w[r * cols + c] * gy[r]`
fn backprop_input(w: &[Real], rows: usize, cols: usize, gy: &[Real], gx: &mut [Real]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = gy[r];
        for (gxv, wv) in gx.iter_mut().zip(row) {
            *gxv += wv * g;
        }
    }
}

/// `gw[r * cols + c] += gy[r] * x[c]`, `gb[r] += gy[r]`
fn accumulate_affine(
    gw: &mut [Real],
    gb: &mut [Real],
    rows: usize,
    cols: usize,
    gy: &[Real],
    x: &[Real],
) {
    for r in 0..rows {
        let g = gy[r];
        gb[r] += g;
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (wv, xv) in row.iter_mut().zip(x) {
            *wv += g * xv;
        }
    }
}

fn finite(name: &str, values: &[Real]) -> Result<(), String> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(name.to_string())
    }
}

pub(super) struct Cache {
    x: Vec<Real>,
    h_stem: Vec<Real>,
    /// Per block: (input h, post-tanh u).
    blocks: Vec<(Vec<Real>, Vec<Real>)>,
    h_final: Vec<Real>,
}

pub(super) fn forward(
    config: &ModelConfig,
    layout: &Layout,
    theta: &[Real],
    input: &DenoiserInput,
) -> Result<(Vec<Real>, Cache), String> {
    let (input_dim, hidden, blocks, output) = dims(config);
    let x = assemble_mlp_input(config, input);
    finite("input", &x)?;

    let w = layout.slice(theta, "stem.weight");
    let b = layout.slice(theta, "stem.bias");
    let mut h: Vec<Real> = affine(w, b, hidden, input_dim, &x)
        .into_iter()
        .map(Real::tanh)
        .collect();
    finite("stem", &h)?;
    let h_stem = h.clone();

    let mut cached_blocks = Vec::with_capacity(blocks);
    for k in 0..blocks {
        let w1 = layout.slice(theta, &format!("block{k}.w1"));
        let b1 = layout.slice(theta, &format!("block{k}.b1"));
        let w2 = layout.slice(theta, &format!("block{k}.w2"));
        let b2 = layout.slice(theta, &format!("block{k}.b2"));
        let u: Vec<Real> = affine(w1, b1, hidden, hidden, &h)
            .into_iter()
            .map(Real::tanh)
            .collect();
        let delta = affine(w2, b2, hidden, hidden, &u);
        let h_in = std::mem::replace(&mut h, Vec::new());
        h = h_in.iter().zip(&delta).map(|(a, d)| a + d).collect();
        finite(&format!("block{k}"), &h)?;
        cached_blocks.push((h_in, u));
    }

    let wo = layout.slice(theta, "head.weight");
    let bo = layout.slice(theta, "head.bias");
    let out = affine(wo, bo, output, hidden, &h);
    finite("head", &out)?;

    Ok((
        out,
        Cache {
            x,
            h_stem,
            blocks: cached_blocks,
            h_final: h,
        },
    ))
}

pub(super) fn backward(
    config: &ModelConfig,
    layout: &Layout,
    theta: &[Real],
    cache: &Cache,
    gout: &[Real],
    grad: &mut [Real],
) {
    let (input_dim, hidden, blocks, output) = dims(config);

    // Head.
    {
        let (gw, gb) = (
            layout.range_of("head.weight"),
            layout.range_of("head.bias"),
        );
        let (gw_slice, gb_slice) = two_slices(grad, gw, gb);
        accumulate_affine(gw_slice, gb_slice, output, hidden, gout, &cache.h_final);
    }
    let mut gh = vec![0.0; hidden];
    backprop_input(
        layout.slice(theta, "head.weight"),
        output,
        hidden,
        gout,
        &mut gh,
    );

    // Blocks in reverse.
    for k in (0..blocks).rev() {
        let (h_in, u) = &cache.blocks[k];
        let mut gu = vec![0.0; hidden];
        backprop_input(
            layout.slice(theta, &format!("block{k}.w2")),
            hidden,
            hidden,
            &gh,
            &mut gu,
        );
        {
            let (gw2, gb2) = (
                layout.range_of(&format!("block{k}.w2")),
                layout.range_of(&format!("block{k}.b2")),
            );
            let (gw_slice, gb_slice) = two_slices(grad, gw2, gb2);
            accumulate_affine(gw_slice, gb_slice, hidden, hidden, &gh, u);
        }
        // Through tanh.
        let gz: Vec<Real> = gu.iter().zip(u).map(|(g, uv)| g * (1.0 - uv * uv)).collect();
        {
            let (gw1, gb1) = (
                layout.range_of(&format!("block{k}.w1")),
                layout.range_of(&format!("block{k}.b1")),
            );
            let (gw_slice, gb_slice) = two_slices(grad, gw1, gb1);
            accumulate_affine(gw_slice, gb_slice, hidden, hidden, &gz, h_in);
        }
        // gh flows through the skip connection plus w1.
        backprop_input(
            layout.slice(theta, &format!("block{k}.w1")),
            hidden,
            hidden,
            &gz,
            &mut gh,
        );
    }

    // Stem.
    let gz0: Vec<Real> = gh
        .iter()
        .zip(&cache.h_stem)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let (gw, gb) = (
        layout.range_of("stem.weight"),
        layout.range_of("stem.bias"),
    );
    let (gw_slice, gb_slice) = two_slices(grad, gw, gb);
    accumulate_affine(gw_slice, gb_slice, hidden, input_dim, &gz0, &cache.x);
}

