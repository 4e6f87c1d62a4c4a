//! Naive straight-line reference implementations used as independent
//! oracles. Everything here is plain nested loops over flat f64 buffers,
//! deliberately sharing no code with the library's tensor ops.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveMetric {
    Gaussian,
    EmbeddedGaussian,
    DotProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaivePooling {
    Avg,
    Max,
    AvgAndMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveUpsample {
    Nearest,
    Bilinear,
}

pub struct NaiveClca {
    pub c_mid: usize,
    pub c_top: usize,
    pub c_int: usize,
    pub w_l: Vec<f64>,
    pub b_l: Vec<f64>,
    pub w_g: Vec<f64>,
    pub b_g: Vec<f64>,
    pub w_theta: Vec<f64>,
    pub b_theta: Vec<f64>,
    pub w_phi: Vec<f64>,
    pub b_phi: Vec<f64>,
    pub w_k: Vec<f64>,
    pub b_k: Vec<f64>,
    pub w_y: Vec<f64>,
    pub b_y: Vec<f64>,
    pub metric: NaiveMetric,
    pub upsample: NaiveUpsample,
}

pub fn seeded_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

impl NaiveClca {
    pub fn random(
        c_mid: usize,
        c_top: usize,
        c_int: usize,
        metric: NaiveMetric,
        upsample: NaiveUpsample,
        seed: u64,
    ) -> Self {
        let mut s = seed;
        let mut next = |n: usize| {
            s += 1;
            seeded_vec(s, n, -0.5, 0.5)
        };
        NaiveClca {
            c_mid,
            c_top,
            c_int,
            w_l: next(c_mid * c_mid),
            b_l: next(c_mid),
            w_g: next(c_mid * c_top),
            b_g: next(c_mid),
            w_theta: next(c_int * c_mid),
            b_theta: next(c_int),
            w_phi: next(c_int * c_mid),
            b_phi: next(c_int),
            w_k: next(c_int * c_mid),
            b_k: next(c_int),
            w_y: next(c_mid * c_int),
            b_y: next(c_mid),
            metric,
            upsample,
        }
    }
}

/// matrix [rows x cols] times per-position vector, plus bias.
fn matvec(w: &[f64], bias: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = bias[r];
        for c in 0..cols {
            acc += w[r * cols + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

/// Upsample one [c, h, w] image to [c, th, tw].
pub fn naive_upsample(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
    mode: NaiveUpsample,
) -> Vec<f64> {
    if th == h && tw == w {
        return x.to_vec();
    }
    let mut out = vec![0.0; c * th * tw];
    for ci in 0..c {
        for y in 0..th {
            for xx in 0..tw {
                let v = match mode {
                    NaiveUpsample::Nearest => {
                        let sy = y * h / th;
                        let sx = xx * w / tw;
                        x[ci * h * w + sy * w + sx]
                    }
                    NaiveUpsample::Bilinear => {
                        let fy = ((y as f64 + 0.5) * h as f64 / th as f64 - 0.5)
                            .clamp(0.0, (h - 1) as f64);
                        let fx = ((xx as f64 + 0.5) * w as f64 / tw as f64 - 0.5)
                            .clamp(0.0, (w - 1) as f64);
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                        let v00 = x[ci * h * w + y0 * w + x0];
                        let v01 = x[ci * h * w + y0 * w + x1];
                        let v10 = x[ci * h * w + y1 * w + x0];
                        let v11 = x[ci * h * w + y1 * w + x1];
                        (v00 * (1.0 - dx) + v01 * dx) * (1.0 - dy)
                            + (v10 * (1.0 - dx) + v11 * dx) * dy
                    }
                };
                out[ci * th * tw + y * tw + xx] = v;
            }
        }
    }
    out
}

/// Reference CLCA forward for one batch of images.
///
/// mid is [b, c_mid, mh, mw]; top is [b, c_top, th, tw]. Per position i,
/// fused_i = W_l mid_i + b_l + W_g top_up_i + b_g; relations are computed
/// on the fused vectors, values on the original mid vectors, then the
/// output projection and the residual.
pub fn naive_clca_forward(
    mid: &[f64],
    batch: usize,
    mh: usize,
    mw: usize,
    top: &[f64],
    th: usize,
    tw: usize,
    p: &NaiveClca,
) -> Vec<f64> {
    let n = mh * mw;
    let mut out = vec![0.0; batch * p.c_mid * n];
    for b in 0..batch {
        let mid_img = &mid[b * p.c_mid * n..(b + 1) * p.c_mid * n];
        let top_img = &top[b * p.c_top * th * tw..(b + 1) * p.c_top * th * tw];
        let top_up = naive_upsample(top_img, p.c_top, th, tw, mh, mw, p.upsample);

        // per-position fused and value vectors
        let vec_at = |buf: &[f64], c: usize, i: usize| -> Vec<f64> {
            (0..c).map(|ch| buf[ch * n + i]).collect()
        };
        let mut fused = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let mid_i = vec_at(mid_img, p.c_mid, i);
            let top_i = vec_at(&top_up, p.c_top, i);
            let local = matvec(&p.w_l, &p.b_l, &mid_i, p.c_mid, p.c_mid);
            let global = matvec(&p.w_g, &p.b_g, &top_i, p.c_mid, p.c_top);
            fused.push(
                local
                    .iter()
                    .zip(&global)
                    .map(|(a, g)| a + g)
                    .collect::<Vec<f64>>(),
            );
            values.push(matvec(&p.w_k, &p.b_k, &mid_i, p.c_int, p.c_mid));
        }

        // pairwise relation logits on the fused vectors
        let dot = |a: &[f64], bv: &[f64]| a.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>();
        let mut rel = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                rel[i * n + j] = match p.metric {
                    NaiveMetric::Gaussian => dot(&fused[i], &fused[j]),
                    _ => {
                        let ti = matvec(&p.w_theta, &p.b_theta, &fused[i], p.c_int, p.c_mid);
                        let pj = matvec(&p.w_phi, &p.b_phi, &fused[j], p.c_int, p.c_mid);
                        dot(&ti, &pj)
                    }
                };
            }
        }
        // normalize
        match p.metric {
            NaiveMetric::Gaussian | NaiveMetric::EmbeddedGaussian => {
                for i in 0..n {
                    let row = &mut rel[i * n..(i + 1) * n];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
            NaiveMetric::DotProduct => {
                for v in rel.iter_mut() {
                    *v /= n as f64;
                }
            }
        }

        // aggregate values and project back with the residual
        for i in 0..n {
            let mut agg = vec![0.0; p.c_int];
            for j in 0..n {
                for ch in 0..p.c_int {
                    agg[ch] += rel[i * n + j] * values[j][ch];
                }
            }
            let proj = matvec(&p.w_y, &p.b_y, &agg, p.c_mid, p.c_int);
            for ch in 0..p.c_mid {
                out[(b * p.c_mid + ch) * n + i] = proj[ch] + mid_img[ch * n + i];
            }
        }
    }
    out
}

/// Reference CLSA forward: channel pooling, 3x3 conv to one channel,
/// optional sigmoid, integer-factor average downsample, gate the top map.
#[allow(clippy::too_many_arguments)]
pub fn naive_clsa_forward(
    refined: &[f64],
    batch: usize,
    c: usize,
    mh: usize,
    mw: usize,
    top: &[f64],
    c_top: usize,
    th: usize,
    tw: usize,
    kernel: &[f64],
    bias: f64,
    pooling: NaivePooling,
    sigmoid_gate: bool,
) -> Vec<f64> {
    let maps = naive_clsa_attention_map(refined, batch, c, mh, mw, kernel, bias, pooling, sigmoid_gate);
    let fy = mh / th;
    let fx = mw / tw;
    let mut out = vec![0.0; batch * c_top * th * tw];
    for b in 0..batch {
        let map = &maps[b * mh * mw..(b + 1) * mh * mw];
        // integer-factor average downsample
        let mut small = vec![0.0; th * tw];
        for y in 0..th {
            for x in 0..tw {
                let mut acc = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += map[(y * fy + dy) * mw + x * fx + dx];
                    }
                }
                small[y * tw + x] = acc / (fy * fx) as f64;
            }
        }
        for ch in 0..c_top {
            for pos in 0..th * tw {
                out[(b * c_top + ch) * th * tw + pos] =
                    top[(b * c_top + ch) * th * tw + pos] * small[pos];
            }
        }
    }
    out
}

/// Reference CLSA attention map, [b, mh*mw] flattened.
#[allow(clippy::too_many_arguments)]
pub fn naive_clsa_attention_map(
    refined: &[f64],
    batch: usize,
    c: usize,
    mh: usize,
    mw: usize,
    kernel: &[f64],
    bias: f64,
    pooling: NaivePooling,
    sigmoid_gate: bool,
) -> Vec<f64> {
    let n = mh * mw;
    let pool_ch = match pooling {
        NaivePooling::AvgAndMax => 2,
        _ => 1,
    };
    let mut out = vec![0.0; batch * n];
    for b in 0..batch {
        let img = &refined[b * c * n..(b + 1) * c * n];
        let mut pooled = vec![0.0; pool_ch * n];
        for i in 0..n {
            let mut mean = 0.0;
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = img[ch * n + i];
                mean += v;
                if v > max {
                    max = v;
                }
            }
            mean /= c as f64;
            match pooling {
                NaivePooling::Avg => pooled[i] = mean,
                NaivePooling::Max => pooled[i] = max,
                NaivePooling::AvgAndMax => {
                    pooled[i] = mean;
                    pooled[n + i] = max;
                }
            }
        }
        // 3x3 conv, pad 1, single output channel
        for y in 0..mh as isize {
            for x in 0..mw as isize {
                let mut acc = bias;
                for ch in 0..pool_ch {
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let iy = y + ky;
                            let ix = x + kx;
                            if iy < 0 || iy >= mh as isize || ix < 0 || ix >= mw as isize {
                                continue;
                            }
                            acc += pooled[ch * n + iy as usize * mw + ix as usize]
                                * kernel[(ch * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                        }
                    }
                }
                let v = if sigmoid_gate {
                    1.0 / (1.0 + (-acc).exp())
                } else {
                    acc
                };
                out[b * n + y as usize * mw + x as usize] = v;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- shared CLCA/CLSA oracle grids ----

use clan::attention::{
    clca_forward, clsa_forward, ClcaParams, ClsaParams, FeatureMap, GateMode, RelationMetric,
    SpatialPooling,
};
use clan::tensor::{ResampleMode, Tensor};

pub fn metric_of(m: NaiveMetric) -> RelationMetric {
    match m {
        NaiveMetric::Gaussian => RelationMetric::Gaussian,
        NaiveMetric::EmbeddedGaussian => RelationMetric::EmbeddedGaussian,
        NaiveMetric::DotProduct => RelationMetric::DotProduct,
    }
}

pub fn upsample_of(u: NaiveUpsample) -> ResampleMode {
    match u {
        NaiveUpsample::Nearest => ResampleMode::Nearest,
        NaiveUpsample::Bilinear => ResampleMode::Bilinear,
    }
}

/// Library-side params carrying exactly the naive reference's weights.
pub fn build_clca_params(p: &NaiveClca) -> ClcaParams<f64> {
    let t = |shape: &[usize], data: &[f64]| Tensor::param(shape, data.to_vec()).unwrap();
    ClcaParams {
        w_l: t(&[p.c_mid, p.c_mid], &p.w_l),
        b_l: t(&[p.c_mid], &p.b_l),
        w_g: t(&[p.c_mid, p.c_top], &p.w_g),
        b_g: t(&[p.c_mid], &p.b_g),
        w_theta: t(&[p.c_int, p.c_mid], &p.w_theta),
        b_theta: t(&[p.c_int], &p.b_theta),
        w_phi: t(&[p.c_int, p.c_mid], &p.w_phi),
        b_phi: t(&[p.c_int], &p.b_phi),
        w_k: t(&[p.c_int, p.c_mid], &p.w_k),
        b_k: t(&[p.c_int], &p.b_k),
        w_y: t(&[p.c_mid, p.c_int], &p.w_y),
        b_y: t(&[p.c_mid], &p.b_y),
        metric: metric_of(p.metric),
        upsample: upsample_of(p.upsample),
        c_mid: p.c_mid,
        c_top: p.c_top,
        c_int: p.c_int,
    }
}

pub struct ClcaCase {
    batch: usize,
    c_mid: usize,
    mh: usize,
    mw: usize,
    c_top: usize,
    th: usize,
    tw: usize,
    metric: NaiveMetric,
    upsample: NaiveUpsample,
    seed: u64,
}

pub fn clca_cases() -> Vec<ClcaCase> {
    let metrics = [
        NaiveMetric::Gaussian,
        NaiveMetric::EmbeddedGaussian,
        NaiveMetric::DotProduct,
    ];
    let shapes = [
        // (batch, c_mid, mh, mw, c_top, th, tw)
        (1, 4, 4, 4, 8, 2, 2),
        (2, 3, 3, 3, 5, 1, 1),
        (1, 8, 2, 2, 4, 2, 2),
        (2, 5, 4, 2, 6, 2, 1),
    ];
    let mut cases = Vec::new();
    let mut seed = 9000;
    for metric in metrics {
        for upsample in [NaiveUpsample::Nearest, NaiveUpsample::Bilinear] {
            for &(batch, c_mid, mh, mw, c_top, th, tw) in &shapes {
                seed += 17;
                cases.push(ClcaCase {
                    batch,
                    c_mid,
                    mh,
                    mw,
                    c_top,
                    th,
                    tw,
                    metric,
                    upsample,
                    seed,
                });
            }
        }
    }
    cases
}

/// Run every CLCA case; returns (case count, worst abs error).
pub fn run_clca_oracle_grid() -> (usize, f64) {
    let cases = clca_cases();
    let mut worst = 0.0f64;
    for case in &cases {
        let naive = NaiveClca::random(
            case.c_mid,
            case.c_top,
            case.c_int(),
            case.metric,
            case.upsample,
            case.seed,
        );
        let mid_data = seeded_vec(case.seed + 1000, case.batch * case.c_mid * case.mh * case.mw, -1.0, 1.0);
        let top_data = seeded_vec(case.seed + 2000, case.batch * case.c_top * case.th * case.tw, -1.0, 1.0);

        let expect = naive_clca_forward(
            &mid_data, case.batch, case.mh, case.mw, &top_data, case.th, case.tw, &naive,
        );

        let params = build_clca_params(&naive);
        let mid = FeatureMap::new(
            Tensor::from_vec(&[case.batch, case.c_mid, case.mh, case.mw], mid_data).unwrap(),
            1,
        )
        .unwrap();
        let top = FeatureMap::new(
            Tensor::from_vec(&[case.batch, case.c_top, case.th, case.tw], top_data).unwrap(),
            2,
        )
        .unwrap();
        let got = clca_forward(&mid, &top, &params).unwrap();
        worst = worst.max(max_abs_diff(&got.tensor.data_vec(), &expect));
    }
    (cases.len(), worst)
}

impl ClcaCase {
    fn c_int(&self) -> usize {
        (self.c_mid / 2).max(1)
    }
}

pub struct ClsaCase {
    batch: usize,
    c: usize,
    mh: usize,
    mw: usize,
    c_top: usize,
    factor: usize,
    pooling: NaivePooling,
    gate: bool,
    seed: u64,
}

pub fn clsa_cases() -> Vec<ClsaCase> {
    let mut cases = Vec::new();
    let mut seed = 40000;
    for pooling in [NaivePooling::Avg, NaivePooling::Max, NaivePooling::AvgAndMax] {
        for gate in [false, true] {
            for factor in [1usize, 2] {
                seed += 23;
                cases.push(ClsaCase {
                    batch: 2,
                    c: 5,
                    mh: 4,
                    mw: 4,
                    c_top: 3,
                    factor,
                    pooling,
                    gate,
                    seed,
                });
            }
        }
    }
    cases
}

pub fn pooling_of(p: NaivePooling) -> SpatialPooling {
    match p {
        NaivePooling::Avg => SpatialPooling::Avg,
        NaivePooling::Max => SpatialPooling::Max,
        NaivePooling::AvgAndMax => SpatialPooling::AvgAndMax,
    }
}

pub fn run_clsa_oracle_grid() -> (usize, f64) {
    let cases = clsa_cases();
    let mut worst = 0.0f64;
    for case in &cases {
        let (th, tw) = (case.mh / case.factor, case.mw / case.factor);
        let pool_ch = match case.pooling {
            NaivePooling::AvgAndMax => 2,
            _ => 1,
        };
        let kernel = seeded_vec(case.seed, pool_ch * 9, -0.6, 0.6);
        let bias = 0.1;
        let refined = seeded_vec(case.seed + 1, case.batch * case.c * case.mh * case.mw, -1.0, 1.0);
        let top = seeded_vec(case.seed + 2, case.batch * case.c_top * th * tw, -1.0, 1.0);

        let expect = naive_clsa_forward(
            &refined, case.batch, case.c, case.mh, case.mw, &top, case.c_top, th, tw, &kernel,
            bias, case.pooling, case.gate,
        );

        let params = ClsaParams {
            kernel: Tensor::param(&[1, pool_ch, 3, 3], kernel).unwrap(),
            bias: Tensor::param(&[1], vec![bias]).unwrap(),
            pooling: pooling_of(case.pooling),
            gate: if case.gate {
                GateMode::Sigmoid
            } else {
                GateMode::Linear
            },
        };
        let refined_map = FeatureMap::new(
            Tensor::from_vec(&[case.batch, case.c, case.mh, case.mw], refined).unwrap(),
            1,
        )
        .unwrap();
        let top_map = FeatureMap::new(
            Tensor::from_vec(&[case.batch, case.c_top, th, tw], top).unwrap(),
            2,
        )
        .unwrap();
        let got = clsa_forward(&refined_map, &top_map, &params).unwrap();
        worst = worst.max(max_abs_diff(&got.tensor.data_vec(), &expect));
    }
    (cases.len(), worst)
}

