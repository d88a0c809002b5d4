//! Residual conv net for `[H, W]` grid frames.
//!
//! Noisy states and observations are stacked along the channel axis; every
//! conv is 3x3 with circular padding (the synthetic grids are periodic). The
//! time embedding enters each conv stage as a learned per-channel bias.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{embed, two_slices, ArchSpec, DenoiserInput, Layout, ModelConfig};
use crate::Real;

struct Dims {
    c_in: usize,
    c_mid: usize,
    blocks: usize,
    c_out: usize,
    h: usize,
    w: usize,
    temb: usize,
}

fn dims(config: &ModelConfig) -> Dims {
    let (channels, blocks) = match config.arch {
        ArchSpec::Conv { channels, blocks } => (channels, blocks),
        _ => unreachable!("conv path called with non-conv arch"),
    };
    Dims {
        c_in: config.s + config.p + 1,
        c_mid: channels,
        blocks,
        c_out: config.s,
        h: config.frame_shape[0],
        w: config.frame_shape[1],
        temb: config.time_embed_dim,
    }
}

pub(super) fn layout(config: &ModelConfig) -> Layout {
    let d = dims(config);
    let mut l = Layout::default();
    l.push("stem.kernel", &[d.c_mid, d.c_in, 3, 3]);
    l.push("stem.bias", &[d.c_mid]);
    l.push("stem.temb", &[d.c_mid, d.temb]);
    for k in 0..d.blocks {
        l.push(&format!("block{k}.k1"), &[d.c_mid, d.c_mid, 3, 3]);
        l.push(&format!("block{k}.b1"), &[d.c_mid]);
        l.push(&format!("block{k}.temb"), &[d.c_mid, d.temb]);
        l.push(&format!("block{k}.k2"), &[d.c_mid, d.c_mid, 3, 3]);
        l.push(&format!("block{k}.b2"), &[d.c_mid]);
    }
    l.push("head.kernel", &[d.c_out, d.c_mid, 3, 3]);
    l.push("head.bias", &[d.c_out]);
    l
}

pub(super) fn init<R: Rng + ?Sized>(
    _config: &ModelConfig,
    layout: &Layout,
    theta: &mut [Real],
    rng: &mut R,
) {
    for entry in layout.entries() {
        if entry.name.starts_with("head") || entry.name.ends_with("bias") || entry.name.contains(".b")
        {
            continue;
        }
        // Kernels: fan_in = c_in * 9; time projections: fan_in = temb dim.
        let fan_in: usize = entry.shape[1..].iter().product();
        let scale = (fan_in as Real).sqrt().recip();
        for v in &mut theta[entry.offset..entry.offset + entry.len] {
            let z: Real = rng.sample(StandardNormal);
            *v = scale * z;
        }
    }
}

/// 3x3 circular convolution: `out[o, y, x] += sum_{c, dy, dx} kernel * input`.
/// `base[o]` seeds every output position (bias plus time-embedding bias).
fn conv3x3(
    input: &[Real],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[Real],
    base: &[Real],
    c_out: usize,
) -> Vec<Real> {
    let mut out = Vec::with_capacity(c_out * h * w);
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = base[o];
                for c in 0..c_in {
                    let kbase = ((o * c_in) + c) * 9;
                    let ibase = c * h * w;
                    for dy in 0..3 {
                        let yy = (y + h + dy - 1) % h;
                        for dx in 0..3 {
                            let xx = (x + w + dx - 1) % w;
                            acc += kernel[kbase + dy * 3 + dx] * input[ibase + yy * w + xx];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Backward of [`conv3x3`]: scatters `gout` into kernel, bias and input
/// gradients. `gin` may be `None` for the stem (input gradient unused).
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[Real],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[Real],
    c_out: usize,
    gout: &[Real],
    gkernel: &mut [Real],
    gbias: &mut [Real],
    mut gin: Option<&mut [Real]>,
) {
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let g = gout[(o * h + y) * w + x];
                gbias[o] += g;
                for c in 0..c_in {
                    let kbase = ((o * c_in) + c) * 9;
                    let ibase = c * h * w;
                    for dy in 0..3 {
                        let yy = (y + h + dy - 1) % h;
                        for dx in 0..3 {
                            let xx = (x + w + dx - 1) % w;
                            let idx = ibase + yy * w + xx;
                            gkernel[kbase + dy * 3 + dx] += g * input[idx];
                            if let Some(gi) = gin.as_deref_mut() {
                                gi[idx] += g * kernel[kbase + dy * 3 + dx];
                            }
                        }
                    }
                }
            }
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

/// Per-channel base: `bias[o] + temb_proj[o] . emb`.
fn channel_base(bias: &[Real], proj: &[Real], emb: &[Real]) -> Vec<Real> {
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &proj[o * emb.len()..(o + 1) * emb.len()];
            b + row.iter().zip(emb).map(|(p, e)| p * e).sum::<Real>()
        })
        .collect()
}

pub(super) struct Cache {
    input: Vec<Real>,
    emb: Vec<Real>,
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
    let d = dims(config);
    let (h, w) = (d.h, d.w);
    let mut stacked = Vec::with_capacity(d.c_in * h * w);
    stacked.extend_from_slice(input.noisy.latents().as_slice());
    stacked.extend_from_slice(input.observations.as_slice());
    finite("input", &stacked)?;
    let emb = embed::time_embedding(input.t, d.temb);

    let base = channel_base(
        layout.slice(theta, "stem.bias"),
        layout.slice(theta, "stem.temb"),
        &emb,
    );
    let mut feat: Vec<Real> = conv3x3(
        &stacked,
        d.c_in,
        h,
        w,
        layout.slice(theta, "stem.kernel"),
        &base,
        d.c_mid,
    )
    .into_iter()
    .map(Real::tanh)
    .collect();
    finite("stem", &feat)?;
    let h_stem = feat.clone();

    let mut blocks = Vec::with_capacity(d.blocks);
    for k in 0..d.blocks {
        let base1 = channel_base(
            layout.slice(theta, &format!("block{k}.b1")),
            layout.slice(theta, &format!("block{k}.temb")),
            &emb,
        );
        let u: Vec<Real> = conv3x3(
            &feat,
            d.c_mid,
            h,
            w,
            layout.slice(theta, &format!("block{k}.k1")),
            &base1,
            d.c_mid,
        )
        .into_iter()
        .map(Real::tanh)
        .collect();
        let delta = conv3x3(
            &u,
            d.c_mid,
            h,
            w,
            layout.slice(theta, &format!("block{k}.k2")),
            layout.slice(theta, &format!("block{k}.b2")),
            d.c_mid,
        );
        let h_in = std::mem::take(&mut feat);
        feat = h_in.iter().zip(&delta).map(|(a, b)| a + b).collect();
        finite(&format!("block{k}"), &feat)?;
        blocks.push((h_in, u));
    }

    let out = conv3x3(
        &feat,
        d.c_mid,
        h,
        w,
        layout.slice(theta, "head.kernel"),
        layout.slice(theta, "head.bias"),
        d.c_out,
    );
    finite("head", &out)?;

    Ok((
        out,
        Cache {
            input: stacked,
            emb,
            h_stem,
            blocks,
            h_final: feat,
        },
    ))
}

/// Accumulates the time-embedding projection gradient from per-channel bias
/// gradients: `gproj[o, e] += gchan[o] * emb[e]`.
fn accumulate_temb(gproj: &mut [Real], gchan: &[Real], emb: &[Real]) {
    for (o, &g) in gchan.iter().enumerate() {
        let row = &mut gproj[o * emb.len()..(o + 1) * emb.len()];
        for (p, e) in row.iter_mut().zip(emb) {
            *p += g * e;
        }
    }
}

pub(super) fn backward(
    config: &ModelConfig,
    layout: &Layout,
    theta: &[Real],
    cache: &Cache,
    gout: &[Real],
    grad: &mut [Real],
) {
    let d = dims(config);
    let (h, w) = (d.h, d.w);
    let plane = h * w;

    // Head.
    let mut gfeat = vec![0.0; d.c_mid * plane];
    {
        let (kr, br) = (layout.range_of("head.kernel"), layout.range_of("head.bias"));
        let (gk, gb) = two_slices(grad, kr, br);
        conv3x3_backward(
            &cache.h_final,
            d.c_mid,
            h,
            w,
            layout.slice(theta, "head.kernel"),
            d.c_out,
            gout,
            gk,
            gb,
            Some(&mut gfeat),
        );
    }

    // Blocks in reverse.
    for k in (0..d.blocks).rev() {
        let (h_in, u) = &cache.blocks[k];
        let mut gu = vec![0.0; d.c_mid * plane];
        {
            let (kr, br) = (
                layout.range_of(&format!("block{k}.k2")),
                layout.range_of(&format!("block{k}.b2")),
            );
            let (gk, gb) = two_slices(grad, kr, br);
            conv3x3_backward(
                u,
                d.c_mid,
                h,
                w,
                layout.slice(theta, &format!("block{k}.k2")),
                d.c_mid,
                &gfeat,
                gk,
                gb,
                Some(&mut gu),
            );
        }
        // Through tanh.
        for (g, uv) in gu.iter_mut().zip(u) {
            *g *= 1.0 - uv * uv;
        }
        // Per-channel bias gradient for b1 and the time projection.
        {
            let gchan: Vec<Real> = (0..d.c_mid)
                .map(|o| gu[o * plane..(o + 1) * plane].iter().sum())
                .collect();
            let tr = layout.range_of(&format!("block{k}.temb"));
            accumulate_temb(&mut grad[tr], &gchan, &cache.emb);
        }
        {
            let (kr, br) = (
                layout.range_of(&format!("block{k}.k1")),
                layout.range_of(&format!("block{k}.b1")),
            );
            let (gk, gb) = two_slices(grad, kr, br);
            // gfeat accumulates the skip path plus conv1's input gradient.
            conv3x3_backward(
                h_in,
                d.c_mid,
                h,
                w,
                layout.slice(theta, &format!("block{k}.k1")),
                d.c_mid,
                &gu,
                gk,
                gb,
                Some(&mut gfeat),
            );
        }
    }

    // Stem.
    let mut gz = gfeat;
    for (g, hv) in gz.iter_mut().zip(&cache.h_stem) {
        *g *= 1.0 - hv * hv;
    }
    {
        let gchan: Vec<Real> = (0..d.c_mid)
            .map(|o| gz[o * plane..(o + 1) * plane].iter().sum())
            .collect();
        let tr = layout.range_of("stem.temb");
        accumulate_temb(&mut grad[tr], &gchan, &cache.emb);
    }
    let (kr, br) = (layout.range_of("stem.kernel"), layout.range_of("stem.bias"));
    let (gk, gb) = two_slices(grad, kr, br);
    conv3x3_backward(
        &cache.input,
        d.c_in,
        h,
        w,
        layout.slice(theta, "stem.kernel"),
        d.c_mid,
        &gz,
        gk,
        gb,
        None,
    );
}
