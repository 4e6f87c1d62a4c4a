//! Forward and backward rules for every tensor operation.
//!
//! Every reduction runs sequentially in flat index order so results are
//! bitwise reproducible. Rayon is used only across disjoint output slices;
//! each output element is still produced by one fixed-order loop.

use rayon::prelude::*;

use super::{BackwardArgs, Element, GradContribs, Tensor};
use crate::error::{ClanError, Result};

/// Pooling mode for [`Tensor::pool2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Spatial resize mode for [`Tensor::resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

fn dims2<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(ClanError::dimension(op, format!("expected rank 2, got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

fn dims4<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(ClanError::dimension(op, format!("expected rank 4, got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

impl<E: Element> Tensor<E> {
    /// Standard matrix product of rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(ClanError::dimension(
                "matmul",
                format!("inner extents differ: [{m}x{k}] vs [{k2}x{n}]"),
            ));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![E::zero(); m * n];
        matmul_into(&a, &b, &mut out, k, n);
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let a = args.inputs[0].data();
                let b = args.inputs[1].data();
                let g = args.out_grad;
                let mut contribs: GradContribs<E> = vec![None, None];
                if args.needs[0] {
                    // dL/da = g . b^T
                    let mut da = vec![E::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = E::zero();
                            for j in 0..n {
                                acc += g[i * n + j] * b[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    contribs[0] = Some(da);
                }
                if args.needs[1] {
                    // dL/db = a^T . g
                    let mut db = vec![E::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    contribs[1] = Some(db);
                }
                contribs
            }),
        ))
    }

    /// 2-d cross-correlation plus per-output-channel bias.
    ///
    /// `x`: [b, c_in, h, w], `kernel`: [c_out, c_in, kh, kw] with odd kh/kw,
    /// `bias`: [c_out]. Output extents must come out integral.
    /// 2-d cross-correlation plus per-output-channel bias.
    ///
    /// `x`: [b, c_in, h, w], `kernel`: [c_out, c_in, kh, kw] with odd kh/kw,
    /// `bias`: [c_out]. Output extents must come out integral. Internally
    /// lowered to per-image im2col plus a matrix product; each output
    /// element still accumulates over (ci, ky, kx) in ascending order.
    pub fn conv2d(
        &self,
        kernel: &Tensor<E>,
        bias: &Tensor<E>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<E>> {
        let (batch, c_in, h, w) = dims4(self, "conv2d")?;
        let (c_out, kc, kh, kw) = dims4(kernel, "conv2d")?;
        if kc != c_in {
            return Err(ClanError::dimension(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if bias.shape() != vec![c_out] {
            return Err(ClanError::dimension(
                "conv2d",
                format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(ClanError::config(
                "conv2d",
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(ClanError::config("conv2d", "stride must be >= 1"));
        }
        let oh = out_extent(h, kh, stride, padding, "conv2d")?;
        let ow = out_extent(w, kw, stride, padding, "conv2d")?;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        };

        let x = self.data();
        let k = kernel.data();
        let bb = bias.data();
        let mut out = vec![E::zero(); batch * c_out * oh * ow];
        {
            let x: &[E] = &x;
            let k: &[E] = &k;
            let bb: &[E] = &bb;
            out.par_chunks_mut(c_out * oh * ow)
                .enumerate()
                .for_each(|(b, o)| {
                    let col = im2col(&x[b * c_in * h * w..(b + 1) * c_in * h * w], &geom);
                    let npos = oh * ow;
                    for co in 0..c_out {
                        let orow = &mut o[co * npos..(co + 1) * npos];
                        for v in orow.iter_mut() {
                            *v = bb[co];
                        }
                        for p in 0..geom.ckk() {
                            let kv = k[co * geom.ckk() + p];
                            let crow = &col[p * npos..(p + 1) * npos];
                            for (ov, &cv) in orow.iter_mut().zip(crow) {
                                *ov += kv * cv;
                            }
                        }
                    }
                });
        }
        drop(x);
        drop(k);
        drop(bb);

        Ok(Tensor::from_op(
            vec![batch, c_out, oh, ow],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let x = args.inputs[0].data();
                let k = args.inputs[1].data();
                let g = args.out_grad;
                let x: &[E] = &x;
                let k: &[E] = &k;
                let npos = geom.oh * geom.ow;
                let ckk = geom.ckk();
                let mut contribs: GradContribs<E> = vec![None, None, None];
                if args.needs[0] {
                    // dcol = k^T . g, scattered back through col2im
                    let mut dx = vec![E::zero(); batch * c_in * h * w];
                    dx.par_chunks_mut(c_in * h * w).enumerate().for_each(|(b, d)| {
                        let gb = &g[b * c_out * npos..(b + 1) * c_out * npos];
                        let mut dcol = vec![E::zero(); ckk * npos];
                        for p in 0..ckk {
                            let drow = &mut dcol[p * npos..(p + 1) * npos];
                            for co in 0..c_out {
                                let kv = k[co * ckk + p];
                                let grow = &gb[co * npos..(co + 1) * npos];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv += kv * gv;
                                }
                            }
                        }
                        col2im(&dcol, d, &geom);
                    });
                    contribs[0] = Some(dx);
                }
                if args.needs[1] {
                    // dk[co, p] = sum_b sum_pos g[b, co, pos] * col_b[p, pos]
                    let mut dk = vec![E::zero(); c_out * ckk];
                    for b in 0..batch {
                        let col = im2col(&x[b * c_in * h * w..(b + 1) * c_in * h * w], &geom);
                        let gb = &g[b * c_out * npos..(b + 1) * c_out * npos];
                        dk.par_chunks_mut(ckk).enumerate().for_each(|(co, drow)| {
                            let grow = &gb[co * npos..(co + 1) * npos];
                            for (p, dv) in drow.iter_mut().enumerate() {
                                let crow = &col[p * npos..(p + 1) * npos];
                                let mut acc = E::zero();
                                for (&gv, &cv) in grow.iter().zip(crow) {
                                    acc += gv * cv;
                                }
                                *dv += acc;
                            }
                        });
                    }
                    contribs[1] = Some(dk);
                }
                if args.needs[2] {
                    let mut db = vec![E::zero(); c_out];
                    for b in 0..batch {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let base = (b * c_out + co) * npos;
                            for v in &g[base..base + npos] {
                                *dbv += *v;
                            }
                        }
                    }
                    contribs[2] = Some(db);
                }
                contribs
            }),
        ))
    }

    /// Windowed spatial mean or max over [b, c, h, w].
    ///
    /// Max routes its gradient to the arg-max element, first occurrence in
    /// flat index order on ties.
    pub fn pool2d(&self, mode: PoolMode, window: usize, stride: usize) -> Result<Tensor<E>> {
        let (batch, c, h, w) = dims4(self, "pool2d")?;
        if window == 0 || stride == 0 {
            return Err(ClanError::config("pool2d", "window and stride must be >= 1"));
        }
        if window > h || window > w {
            return Err(ClanError::config(
                "pool2d",
                format!("window {window} larger than spatial extent {h}x{w}"),
            ));
        }
        if (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(ClanError::config(
                "pool2d",
                format!("window {window}/stride {stride} does not tile extent {h}x{w}"),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = self.data();
        let mut out = vec![E::zero(); batch * c * oh * ow];
        let mut argmax = vec![0usize; if mode == PoolMode::Max { out.len() } else { 0 }];
        let inv_area = E::from_f64(1.0 / (window * window) as f64);
        for plane in 0..batch * c {
            let xbase = plane * h * w;
            let obase = plane * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = obase + oy * ow + ox;
                    match mode {
                        PoolMode::Avg => {
                            let mut acc = E::zero();
                            for dy in 0..window {
                                let row = xbase + (oy * stride + dy) * w + ox * stride;
                                for dx in 0..window {
                                    acc += x[row + dx];
                                }
                            }
                            out[o] = acc * inv_area;
                        }
                        PoolMode::Max => {
                            let mut best = x[xbase + (oy * stride) * w + ox * stride];
                            let mut best_idx = xbase + (oy * stride) * w + ox * stride;
                            for dy in 0..window {
                                let row = xbase + (oy * stride + dy) * w + ox * stride;
                                for dx in 0..window {
                                    if x[row + dx] > best {
                                        best = x[row + dx];
                                        best_idx = row + dx;
                                    }
                                }
                            }
                            out[o] = best;
                            argmax[o] = best_idx;
                        }
                    }
                }
            }
        }
        drop(x);
        let in_len = batch * c * h * w;
        Ok(Tensor::from_op(
            vec![batch, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); in_len];
                match mode {
                    PoolMode::Avg => {
                        for plane in 0..batch * c {
                            let xbase = plane * h * w;
                            let obase = plane * oh * ow;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[obase + oy * ow + ox] * inv_area;
                                    for dy in 0..window {
                                        let row = xbase + (oy * stride + dy) * w + ox * stride;
                                        for dx_i in 0..window {
                                            dx[row + dx_i] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-position mean and max over the channel axis:
    /// [b, c, h, w] -> [b, 2, h, w] with channel 0 = mean, channel 1 = max.
    pub fn channel_pool(&self) -> Result<Tensor<E>> {
        let (batch, c, h, w) = dims4(self, "channel_pool")?;
        let hw = h * w;
        let x = self.data();
        let mut out = vec![E::zero(); batch * 2 * hw];
        let mut argmax = vec![0usize; batch * hw];
        let inv_c = E::from_f64(1.0 / c as f64);
        for b in 0..batch {
            for p in 0..hw {
                let mut acc = E::zero();
                let mut best = x[(b * c) * hw + p];
                let mut best_ch = 0usize;
                for ci in 0..c {
                    let v = x[(b * c + ci) * hw + p];
                    acc += v;
                    if v > best {
                        best = v;
                        best_ch = ci;
                    }
                }
                out[(b * 2) * hw + p] = acc * inv_c;
                out[(b * 2 + 1) * hw + p] = best;
                argmax[b * hw + p] = best_ch;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![batch, 2, h, w],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); batch * c * hw];
                for b in 0..batch {
                    for p in 0..hw {
                        let g_mean = g[(b * 2) * hw + p] * inv_c;
                        for ci in 0..c {
                            dx[(b * c + ci) * hw + p] += g_mean;
                        }
                        let best_ch = argmax[b * hw + p];
                        dx[(b * c + best_ch) * hw + p] += g[(b * 2 + 1) * hw + p];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise softmax along the last axis (rank >= 2), stabilized by
    /// row-max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(ClanError::dimension(
                "softmax_rows",
                format!("expected rank >= 2, got {:?}", shape),
            ));
        }
        let n = *shape.last().unwrap();
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(ClanError::numeric("softmax_rows", "NaN in input"));
        }
        let rows = x.len() / n;
        let mut out = vec![E::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mut m = row[0];
            for &v in row.iter() {
                if v > m {
                    m = v;
                }
            }
            let mut sum = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * n + j] = e;
                sum += e;
            }
            let inv = E::one() / sum;
            for j in 0..n {
                out[r * n + j] *= inv;
            }
        }
        drop(x);
        let y_saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); y_saved.len()];
                // dx = y * (g - sum(g*y)) per row
                for r in 0..rows {
                    let base = r * n;
                    let mut dot = E::zero();
                    for j in 0..n {
                        dot += g[base + j] * y_saved[base + j];
                    }
                    for j in 0..n {
                        dx[base + j] = y_saved[base + j] * (g[base + j] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Spatial resize of [b, c, h, w].
    ///
    /// Upsampling uses the selected mode: nearest maps each target pixel to
    /// `floor(dst * src / target)`, bilinear interpolates at half-pixel
    /// centers. Downsampling always averages over an integer factor per
    /// axis; fractional downsampling is rejected.
    pub fn resample(&self, target_h: usize, target_w: usize, mode: ResampleMode) -> Result<Tensor<E>> {
        let (_, _, h, w) = dims4(self, "resample")?;
        if target_h == 0 || target_w == 0 {
            return Err(ClanError::config("resample", "target extents must be >= 1"));
        }
        if target_h == h && target_w == w {
            return Ok(self.passthrough());
        }
        if target_h <= h && target_w <= w {
            if h % target_h != 0 || w % target_w != 0 {
                return Err(ClanError::config(
                    "resample",
                    format!("non-integer downsample factor: {h}x{w} -> {target_h}x{target_w}"),
                ));
            }
            return self.downsample_avg(h / target_h, w / target_w);
        }
        if target_h < h || target_w < w {
            return Err(ClanError::config(
                "resample",
                format!("mixed up/down resize not supported: {h}x{w} -> {target_h}x{target_w}"),
            ));
        }
        match mode {
            ResampleMode::Nearest => self.upsample_nearest(target_h, target_w),
            ResampleMode::Bilinear => self.upsample_bilinear(target_h, target_w),
        }
    }

    fn passthrough(&self) -> Tensor<E> {
        Tensor::from_op(
            self.shape(),
            self.data_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                if args.needs[0] {
                    vec![Some(args.out_grad.to_vec())]
                } else {
                    vec![None]
                }
            }),
        )
    }

    fn downsample_avg(&self, fy: usize, fx: usize) -> Result<Tensor<E>> {
        let (batch, c, h, w) = dims4(self, "resample")?;
        let (oh, ow) = (h / fy, w / fx);
        let inv = E::from_f64(1.0 / (fy * fx) as f64);
        let x = self.data();
        let mut out = vec![E::zero(); batch * c * oh * ow];
        for plane in 0..batch * c {
            let xbase = plane * h * w;
            let obase = plane * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::zero();
                    for dy in 0..fy {
                        let row = xbase + (oy * fy + dy) * w + ox * fx;
                        for dx in 0..fx {
                            acc += x[row + dx];
                        }
                    }
                    out[obase + oy * ow + ox] = acc * inv;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![batch, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); batch * c * h * w];
                for plane in 0..batch * c {
                    let xbase = plane * h * w;
                    let obase = plane * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[obase + oy * ow + ox] * inv;
                            for dy in 0..fy {
                                let row = xbase + (oy * fy + dy) * w + ox * fx;
                                for dx_i in 0..fx {
                                    dx[row + dx_i] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    fn upsample_nearest(&self, th: usize, tw: usize) -> Result<Tensor<E>> {
        let (batch, c, h, w) = dims4(self, "resample")?;
        let x = self.data();
        // src index = floor(dst * src / target)
        let map_y: Vec<usize> = (0..th).map(|y| y * h / th).collect();
        let map_x: Vec<usize> = (0..tw).map(|xx| xx * w / tw).collect();
        let mut out = vec![E::zero(); batch * c * th * tw];
        for plane in 0..batch * c {
            let xbase = plane * h * w;
            let obase = plane * th * tw;
            for (y, &sy) in map_y.iter().enumerate() {
                for (xx, &sx) in map_x.iter().enumerate() {
                    out[obase + y * tw + xx] = x[xbase + sy * w + sx];
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![batch, c, th, tw],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); batch * c * h * w];
                for plane in 0..batch * c {
                    let xbase = plane * h * w;
                    let obase = plane * th * tw;
                    for (y, &sy) in map_y.iter().enumerate() {
                        for (xx, &sx) in map_x.iter().enumerate() {
                            dx[xbase + sy * w + sx] += g[obase + y * tw + xx];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    fn upsample_bilinear(&self, th: usize, tw: usize) -> Result<Tensor<E>> {
        let (batch, c, h, w) = dims4(self, "resample")?;
        // Half-pixel centers: src = (dst + 0.5) * src_extent / dst_extent - 0.5,
        // clamped to the valid range.
        let axis = |dst_n: usize, src_n: usize| -> Vec<(usize, usize, f64)> {
            (0..dst_n)
                .map(|d| {
                    let src = ((d as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5)
                        .clamp(0.0, (src_n - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(src_n - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let ys = axis(th, h);
        let xs = axis(tw, w);
        let x = self.data();
        let mut out = vec![E::zero(); batch * c * th * tw];
        for plane in 0..batch * c {
            let xbase = plane * h * w;
            let obase = plane * th * tw;
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = x[xbase + y0 * w + x0].as_f64();
                    let v01 = x[xbase + y0 * w + x1].as_f64();
                    let v10 = x[xbase + y1 * w + x0].as_f64();
                    let v11 = x[xbase + y1 * w + x1].as_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[obase + y * tw + xx] = E::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        drop(x);
        let ys_b = ys.clone();
        let xs_b = xs.clone();
        Ok(Tensor::from_op(
            vec![batch, c, th, tw],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); batch * c * h * w];
                for plane in 0..batch * c {
                    let xbase = plane * h * w;
                    let obase = plane * th * tw;
                    for (y, &(y0, y1, fy)) in ys_b.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in xs_b.iter().enumerate() {
                            let gv = g[obase + y * tw + xx].as_f64();
                            dx[xbase + y0 * w + x0] += E::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                            dx[xbase + y0 * w + x1] += E::from_f64(gv * (1.0 - fy) * fx);
                            dx[xbase + y1 * w + x0] += E::from_f64(gv * fy * (1.0 - fx));
                            dx[xbase + y1 * w + x1] += E::from_f64(gv * fy * fx);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Copy of a contiguous channel range of [b, c, h, w].
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let (batch, c, h, w) = dims4(self, "slice_channels")?;
        if start + len > c || len == 0 {
            return Err(ClanError::dimension(
                "slice_channels",
                format!("range {start}..{} out of {c} channels", start + len),
            ));
        }
        let hw = h * w;
        let x = self.data();
        let mut out = vec![E::zero(); batch * len * hw];
        for b in 0..batch {
            for ch in 0..len {
                let src = ((b * c) + start + ch) * hw;
                let dst = ((b * len) + ch) * hw;
                out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![batch, len, h, w],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); batch * c * hw];
                for b in 0..batch {
                    for ch in 0..len {
                        let dst = ((b * c) + start + ch) * hw;
                        let src = ((b * len) + ch) * hw;
                        dx[dst..dst + hw].copy_from_slice(&g[src..src + hw]);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Elementwise sum. Shapes must match, or `rhs` may be a per-position
    /// scalar map [b, 1, h, w] broadcast across the channels of a
    /// [b, c, h, w] lhs.
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        broadcast_binary(self, rhs, "add", |a, b| a + b, AddRule)
    }

    /// Elementwise product, with the same broadcast rule as [`Tensor::add`].
    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        broadcast_binary(self, rhs, "mul", |a, b| a * b, MulRule)
    }

    /// max(x, 0), gradient passes where input > 0.
    pub fn relu(&self) -> Tensor<E> {
        let x = self.data();
        let out: Vec<E> = x.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
        drop(x);
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let x = args.inputs[0].data();
                let dx: Vec<E> = x
                    .iter()
                    .zip(args.out_grad)
                    .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        let x = self.data();
        let out: Vec<E> = x.iter().map(|v| v.exp()).collect();
        drop(x);
        let y_saved = out.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let dx: Vec<E> = y_saved.iter().zip(args.out_grad).map(|(&y, &g)| g * y).collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Logistic squashing 1 / (1 + e^-x).
    pub fn sigmoid(&self) -> Tensor<E> {
        let x = self.data();
        let out: Vec<E> = x
            .iter()
            .map(|&v| {
                if v >= E::zero() {
                    E::one() / (E::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (E::one() + e)
                }
            })
            .collect();
        drop(x);
        let y_saved = out.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let dx: Vec<E> = y_saved
                    .iter()
                    .zip(args.out_grad)
                    .map(|(&y, &g)| g * y * (E::one() - y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: E) -> Tensor<E> {
        let x = self.data();
        let out: Vec<E> = x.iter().map(|&v| v * factor).collect();
        drop(x);
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                vec![Some(args.out_grad.iter().map(|&g| g * factor).collect())]
            }),
        )
    }

    /// Spatial mean per channel: [b, c, h, w] -> [b, c].
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let (batch, c, h, w) = dims4(self, "global_avg_pool")?;
        let hw = h * w;
        let inv = E::from_f64(1.0 / hw as f64);
        let x = self.data();
        let mut out = vec![E::zero(); batch * c];
        for (plane, o) in out.iter_mut().enumerate() {
            let mut acc = E::zero();
            for &v in &x[plane * hw..(plane + 1) * hw] {
                acc += v;
            }
            *o = acc * inv;
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![batch, c],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                let g = args.out_grad;
                let mut dx = vec![E::zero(); batch * c * hw];
                for plane in 0..batch * c {
                    let gv = g[plane] * inv;
                    for v in &mut dx[plane * hw..(plane + 1) * hw] {
                        *v = gv;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&self) -> Tensor<E> {
        let x = self.data();
        let mut acc = E::zero();
        for &v in x.iter() {
            acc += v;
        }
        let len = x.len();
        drop(x);
        Tensor::from_op(
            Vec::new(),
            vec![acc],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                if !args.needs[0] {
                    return vec![None];
                }
                vec![Some(vec![args.out_grad[0]; len])]
            }),
        )
    }

    /// Same data, new shape (element count preserved). Gradient passes
    /// through unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if super::numel_of(shape) != self.numel() {
            return Err(ClanError::dimension(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                if args.needs[0] {
                    vec![Some(args.out_grad.to_vec())]
                } else {
                    vec![None]
                }
            }),
        ))
    }

    /// Per-position channel mixing: a 1x1 convolution written as a matrix.
    ///
    /// `x` is [b, c_in, ...positions], `w` is [c_out, c_in], `bias` is
    /// [c_out] when present. Positions are the product of the trailing
    /// extents, so rank-3 [b, c, n] and rank-4 [b, c, h, w] both work.
    pub fn channel_project(&self, w: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() < 3 {
            return Err(ClanError::dimension(
                "channel_project",
                format!("expected rank >= 3, got {:?}", shape),
            ));
        }
        let (batch, c_in) = (shape[0], shape[1]);
        let n: usize = shape[2..].iter().product();
        let (c_out, wc) = dims2(w, "channel_project")?;
        if wc != c_in {
            return Err(ClanError::dimension(
                "channel_project",
                format!("weight [{c_out}x{wc}] does not match {c_in} input channels"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != vec![c_out] {
                return Err(ClanError::dimension(
                    "channel_project",
                    format!("bias shape {:?} does not match {c_out} output channels", b.shape()),
                ));
            }
        }
        let x = self.data();
        let wd = w.data();
        let bias_vals: Vec<E> = match bias {
            Some(b) => b.data_vec(),
            None => vec![E::zero(); c_out],
        };
        let mut out = vec![E::zero(); batch * c_out * n];
        {
            let x: &[E] = &x;
            let wd: &[E] = &wd;
            let bias_vals: &[E] = &bias_vals;
            out.par_chunks_mut(n).enumerate().for_each(|(row, o)| {
                let b = row / c_out;
                let co = row % c_out;
                for v in o.iter_mut() {
                    *v = bias_vals[co];
                }
                for ci in 0..c_in {
                    let wv = wd[co * c_in + ci];
                    let xrow = &x[(b * c_in + ci) * n..(b * c_in + ci + 1) * n];
                    for (v, &xv) in o.iter_mut().zip(xrow) {
                        *v += wv * xv;
                    }
                }
            });
        }
        drop(x);
        drop(wd);

        let mut out_shape = shape.clone();
        out_shape[1] = c_out;
        let mut inputs = vec![self.clone(), w.clone()];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            inputs,
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let x = args.inputs[0].data();
                let wd = args.inputs[1].data();
                let g = args.out_grad;
                let x: &[E] = &x;
                let wd: &[E] = &wd;
                let mut contribs: GradContribs<E> =
                    vec![None, None, if has_bias { None } else { Some(Vec::new()) }];
                contribs.truncate(args.inputs.len());
                if args.needs[0] {
                    let mut dx = vec![E::zero(); batch * c_in * n];
                    dx.par_chunks_mut(n).enumerate().for_each(|(row, d)| {
                        let b = row / c_in;
                        let ci = row % c_in;
                        for co in 0..c_out {
                            let wv = wd[co * c_in + ci];
                            let grow = &g[(b * c_out + co) * n..(b * c_out + co + 1) * n];
                            for (dv, &gv) in d.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    });
                    contribs[0] = Some(dx);
                }
                if args.needs[1] {
                    let mut dw = vec![E::zero(); c_out * c_in];
                    dw.par_chunks_mut(c_in).enumerate().for_each(|(co, d)| {
                        for b in 0..batch {
                            let grow = &g[(b * c_out + co) * n..(b * c_out + co + 1) * n];
                            for (ci, dv) in d.iter_mut().enumerate() {
                                let xrow = &x[(b * c_in + ci) * n..(b * c_in + ci + 1) * n];
                                let mut acc = E::zero();
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    acc += gv * xv;
                                }
                                *dv += acc;
                            }
                        }
                    });
                    contribs[1] = Some(dw);
                }
                if has_bias && args.needs[2] {
                    let mut db = vec![E::zero(); c_out];
                    for b in 0..batch {
                        for (co, dv) in db.iter_mut().enumerate() {
                            for &gv in &g[(b * c_out + co) * n..(b * c_out + co + 1) * n] {
                                *dv += gv;
                            }
                        }
                    }
                    contribs[2] = Some(db);
                }
                contribs
            }),
        ))
    }

    /// Pairwise channel dot products between position sets:
    /// a [b, c, n] x b [b, c, m] -> [b, n, m] with
    /// out[i, j] = sum_c a[c, i] * b[c, j].
    pub fn position_affinity(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let sa = self.shape();
        let sb = rhs.shape();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(ClanError::dimension(
                "position_affinity",
                format!("incompatible shapes {:?} and {:?}", sa, sb),
            ));
        }
        let (batch, c, n) = (sa[0], sa[1], sa[2]);
        let m = sb[2];
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![E::zero(); batch * n * m];
        {
            let a: &[E] = &a;
            let b: &[E] = &b;
            out.par_chunks_mut(n * m).enumerate().for_each(|(bi, o)| {
                // Outer-product accumulation: channel-major keeps each
                // out[i, j] reduction in fixed c order.
                for ci in 0..c {
                    let arow = &a[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                    let brow = &b[(bi * c + ci) * m..(bi * c + ci + 1) * m];
                    for (i, &av) in arow.iter().enumerate() {
                        let orow = &mut o[i * m..(i + 1) * m];
                        for (ov, &bv) in orow.iter_mut().zip(brow) {
                            *ov += av * bv;
                        }
                    }
                }
            });
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![batch, n, m],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let a = args.inputs[0].data();
                let b = args.inputs[1].data();
                let g = args.out_grad;
                let a: &[E] = &a;
                let b: &[E] = &b;
                let mut contribs: GradContribs<E> = vec![None, None];
                if args.needs[0] {
                    let mut da = vec![E::zero(); batch * c * n];
                    da.par_chunks_mut(c * n).enumerate().for_each(|(bi, d)| {
                        for ci in 0..c {
                            let brow = &b[(bi * c + ci) * m..(bi * c + ci + 1) * m];
                            for i in 0..n {
                                let grow = &g[(bi * n + i) * m..(bi * n + i + 1) * m];
                                let mut acc = E::zero();
                                for (&gv, &bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                d[ci * n + i] = acc;
                            }
                        }
                    });
                    contribs[0] = Some(da);
                }
                if args.needs[1] {
                    let mut db = vec![E::zero(); batch * c * m];
                    db.par_chunks_mut(c * m).enumerate().for_each(|(bi, d)| {
                        for ci in 0..c {
                            let arow = &a[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                            for (i, &av) in arow.iter().enumerate() {
                                let grow = &g[(bi * n + i) * m..(bi * n + i + 1) * m];
                                let drow = &mut d[ci * m..(ci + 1) * m];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    });
                    contribs[1] = Some(db);
                }
                contribs
            }),
        ))
    }

    /// Weighted sum of position values by a relation matrix:
    /// rel [b, n, m] x values [b, c, m] -> [b, c, n] with
    /// out[c, i] = sum_j rel[i, j] * values[c, j].
    pub fn apply_relation(&self, values: &Tensor<E>) -> Result<Tensor<E>> {
        let sr = self.shape();
        let sv = values.shape();
        if sr.len() != 3 || sv.len() != 3 || sr[0] != sv[0] || sr[2] != sv[2] {
            return Err(ClanError::dimension(
                "apply_relation",
                format!("incompatible shapes {:?} and {:?}", sr, sv),
            ));
        }
        let (batch, n, m) = (sr[0], sr[1], sr[2]);
        let c = sv[1];
        let r = self.data();
        let v = values.data();
        let mut out = vec![E::zero(); batch * c * n];
        {
            let r: &[E] = &r;
            let v: &[E] = &v;
            out.par_chunks_mut(c * n).enumerate().for_each(|(bi, o)| {
                for ci in 0..c {
                    let vrow = &v[(bi * c + ci) * m..(bi * c + ci + 1) * m];
                    for i in 0..n {
                        let rrow = &r[(bi * n + i) * m..(bi * n + i + 1) * m];
                        let mut acc = E::zero();
                        for (&rv, &vv) in rrow.iter().zip(vrow) {
                            acc += rv * vv;
                        }
                        o[ci * n + i] = acc;
                    }
                }
            });
        }
        drop(r);
        drop(v);
        Ok(Tensor::from_op(
            vec![batch, c, n],
            out,
            vec![self.clone(), values.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let r = args.inputs[0].data();
                let v = args.inputs[1].data();
                let g = args.out_grad;
                let r: &[E] = &r;
                let v: &[E] = &v;
                let mut contribs: GradContribs<E> = vec![None, None];
                if args.needs[0] {
                    let mut dr = vec![E::zero(); batch * n * m];
                    dr.par_chunks_mut(n * m).enumerate().for_each(|(bi, d)| {
                        for ci in 0..c {
                            let vrow = &v[(bi * c + ci) * m..(bi * c + ci + 1) * m];
                            let grow = &g[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                            for (i, &gv) in grow.iter().enumerate() {
                                let drow = &mut d[i * m..(i + 1) * m];
                                for (dv, &vv) in drow.iter_mut().zip(vrow) {
                                    *dv += gv * vv;
                                }
                            }
                        }
                    });
                    contribs[0] = Some(dr);
                }
                if args.needs[1] {
                    let mut dv = vec![E::zero(); batch * c * m];
                    dv.par_chunks_mut(c * m).enumerate().for_each(|(bi, d)| {
                        for ci in 0..c {
                            let grow = &g[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                            let drow = &mut d[ci * m..(ci + 1) * m];
                            for (i, &gv) in grow.iter().enumerate() {
                                let rrow = &r[(bi * n + i) * m..(bi * n + i + 1) * m];
                                for (dvv, &rv) in drow.iter_mut().zip(rrow) {
                                    *dvv += gv * rv;
                                }
                            }
                        }
                    });
                    contribs[1] = Some(dv);
                }
                contribs
            }),
        ))
    }
}

fn matmul_into<E: Element>(a: &[E], b: &[E], out: &mut [E], k: usize, n: usize) {
    out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    });
}

/// Affine map for classifier heads: x [m, k] . w [k, n] + bias [n] per row.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = dims2(x, "linear")?;
    let (k2, n) = dims2(w, "linear")?;
    if k != k2 {
        return Err(ClanError::dimension(
            "linear",
            format!("inner extents differ: [{m}x{k}] vs [{k2}x{n}]"),
        ));
    }
    if bias.shape() != vec![n] {
        return Err(ClanError::dimension(
            "linear",
            format!("bias shape {:?} does not match {n} outputs", bias.shape()),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        orow.copy_from_slice(&bd);
        for p in 0..k {
            let xv = xd[i * k + p];
            let wrow = &wd[p * n..(p + 1) * n];
            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    }
    drop(xd);
    drop(wd);
    drop(bd);
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let xd = args.inputs[0].data();
            let wd = args.inputs[1].data();
            let g = args.out_grad;
            let mut contribs: GradContribs<E> = vec![None, None, None];
            if args.needs[0] {
                let mut dx = vec![E::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let wrow = &wd[p * n..(p + 1) * n];
                        let mut acc = E::zero();
                        for (&gv, &wv) in grow.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        dx[i * k + p] = acc;
                    }
                }
                contribs[0] = Some(dx);
            }
            if args.needs[1] {
                let mut dw = vec![E::zero(); k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let xv = xd[i * k + p];
                        let drow = &mut dw[p * n..(p + 1) * n];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += xv * gv;
                        }
                    }
                }
                contribs[1] = Some(dw);
            }
            if args.needs[2] {
                let mut db = vec![E::zero(); n];
                for i in 0..m {
                    for (dv, &gv) in db.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *dv += gv;
                    }
                }
                contribs[2] = Some(db);
            }
            contribs
        }),
    ))
}

/// Channel-axis concatenation of [b, c_i, h, w] tensors, in argument order.
pub fn concat_channels<E: Element>(xs: &[Tensor<E>]) -> Result<Tensor<E>> {
    if xs.is_empty() {
        return Err(ClanError::usage("concat_channels", "no inputs"));
    }
    let (batch, _, h, w) = dims4(&xs[0], "concat_channels")?;
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let (b, c, xh, xw) = dims4(x, "concat_channels")?;
        if b != batch || xh != h || xw != w {
            return Err(ClanError::dimension(
                "concat_channels",
                format!("extents {:?} do not match [{batch}, _, {h}, {w}]", x.shape()),
            ));
        }
        channels.push(c);
    }
    let total_c: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = vec![E::zero(); batch * total_c * hw];
    let mut offset = 0usize;
    for (x, &c) in xs.iter().zip(&channels) {
        let xd = x.data();
        for b in 0..batch {
            let dst = (b * total_c + offset) * hw;
            let src = b * c * hw;
            out[dst..dst + c * hw].copy_from_slice(&xd[src..src + c * hw]);
        }
        offset += c;
    }
    Ok(Tensor::from_op(
        vec![batch, total_c, h, w],
        out,
        xs.to_vec(),
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let g = args.out_grad;
            let mut contribs: GradContribs<E> = vec![None; args.inputs.len()];
            let mut offset = 0usize;
            for (idx, &c) in channels.iter().enumerate() {
                if args.needs[idx] {
                    let mut dx = vec![E::zero(); batch * c * hw];
                    for b in 0..batch {
                        let src = (b * total_c + offset) * hw;
                        let dst = b * c * hw;
                        dx[dst..dst + c * hw].copy_from_slice(&g[src..src + c * hw]);
                    }
                    contribs[idx] = Some(dx);
                }
                offset += c;
            }
            contribs
        }),
    ))
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    let (batch, classes) = dims2(logits, "cross_entropy")?;
    if labels.len() != batch {
        return Err(ClanError::dimension(
            "cross_entropy",
            format!("{} labels for batch of {batch}", labels.len()),
        ));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(ClanError::data(
                "cross_entropy",
                format!("label {y} at row {i} out of range for {classes} classes"),
            ));
        }
    }
    let z = logits.data();
    let mut probs = vec![E::zero(); batch * classes];
    let mut total = E::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &z[i * classes..(i + 1) * classes];
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = E::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            probs[i * classes + j] = e;
            sum += e;
        }
        let inv = E::one() / sum;
        for j in 0..classes {
            probs[i * classes + j] *= inv;
        }
        // loss_i = logsumexp(row) - row[y]
        total += m + sum.ln() - row[y];
    }
    drop(z);
    let inv_batch = E::from_f64(1.0 / batch as f64);
    let loss = total * inv_batch;
    let labels_owned = labels.to_vec();
    Ok(Tensor::from_op(
        Vec::new(),
        vec![loss],
        vec![logits.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            if !args.needs[0] {
                return vec![None];
            }
            let g = args.out_grad[0] * inv_batch;
            let mut dz = vec![E::zero(); batch * classes];
            for (i, &y) in labels_owned.iter().enumerate() {
                for j in 0..classes {
                    let indicator = if j == y { E::one() } else { E::zero() };
                    dz[i * classes + j] = (probs[i * classes + j] - indicator) * g;
                }
            }
            vec![Some(dz)]
        }),
    ))
}

/// Static geometry of one convolution.
#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn ckk(self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Unfold one image [c_in, h, w] into [c_in*kh*kw, oh*ow]; out-of-bounds
/// taps are zero.
fn im2col<E: Element>(x: &[E], geom: &ConvGeom) -> Vec<E> {
    let npos = geom.oh * geom.ow;
    let mut col = vec![E::zero(); geom.ckk() * npos];
    let mut row = 0usize;
    for ci in 0..geom.c_in {
        let plane = &x[ci * geom.h * geom.w..(ci + 1) * geom.h * geom.w];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let dst = &mut col[row * npos..(row + 1) * npos];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let src_base = iy as usize * geom.w;
                    let drow = &mut dst[oy * geom.ow..(oy + 1) * geom.ow];
                    for (ox, dv) in drow.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix >= 0 && ix < geom.w as isize {
                            *dv = plane[src_base + ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Fold a [c_in*kh*kw, oh*ow] gradient back onto one image, accumulating
/// overlaps in fixed row-then-position order.
fn col2im<E: Element>(col: &[E], dx: &mut [E], geom: &ConvGeom) {
    let npos = geom.oh * geom.ow;
    let mut row = 0usize;
    for ci in 0..geom.c_in {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let src = &col[row * npos..(row + 1) * npos];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let dst_base = ci * geom.h * geom.w + iy as usize * geom.w;
                    let srow = &src[oy * geom.ow..(oy + 1) * geom.ow];
                    for (ox, &sv) in srow.iter().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix >= 0 && ix < geom.w as isize {
                            dx[dst_base + ix as usize] += sv;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn out_extent(
    ext: usize,
    k: usize,
    stride: usize,
    padding: usize,
    op: &'static str,
) -> Result<usize> {
    let padded = ext + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(ClanError::config(
            op,
            format!("extent {ext} with kernel {k}, stride {stride}, padding {padding} has no integral output"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

// Broadcast cases for add/mul: identical shapes, or rhs a per-position
// scalar map [b, 1, h, w] against lhs [b, c, h, w].
enum Broadcast {
    Same,
    Map { batch: usize, c: usize, hw: usize },
}

trait BinaryRule<E: Element> {
    /// (da, db) per element, given the two forward inputs.
    fn grads(a: E, b: E, g: E) -> (E, E);
}

struct AddRule;
struct MulRule;

impl<E: Element> BinaryRule<E> for AddRule {
    fn grads(_a: E, _b: E, g: E) -> (E, E) {
        (g, g)
    }
}

impl<E: Element> BinaryRule<E> for MulRule {
    fn grads(a: E, b: E, g: E) -> (E, E) {
        (g * b, g * a)
    }
}

fn broadcast_binary<E: Element, R: BinaryRule<E> + 'static>(
    lhs: &Tensor<E>,
    rhs: &Tensor<E>,
    op: &'static str,
    fwd: fn(E, E) -> E,
    _rule: R,
) -> Result<Tensor<E>> {
    let sa = lhs.shape();
    let sb = rhs.shape();
    let mode = if sa == sb {
        Broadcast::Same
    } else if sa.len() == 4 && sb.len() == 4 && sb[1] == 1 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3]
    {
        Broadcast::Map {
            batch: sa[0],
            c: sa[1],
            hw: sa[2] * sa[3],
        }
    } else {
        return Err(ClanError::dimension(
            op,
            format!("incompatible shapes {:?} and {:?}", sa, sb),
        ));
    };

    let a = lhs.data();
    let b = rhs.data();
    let out: Vec<E> = match &mode {
        Broadcast::Same => a.iter().zip(b.iter()).map(|(&x, &y)| fwd(x, y)).collect(),
        Broadcast::Map { batch, c, hw } => {
            let mut out = vec![E::zero(); a.len()];
            for bi in 0..*batch {
                let brow = &b[bi * hw..(bi + 1) * hw];
                for ci in 0..*c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..*hw {
                        out[base + p] = fwd(a[base + p], brow[p]);
                    }
                }
            }
            out
        }
    };
    drop(a);
    drop(b);

    Ok(Tensor::from_op(
        sa,
        out,
        vec![lhs.clone(), rhs.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let a = args.inputs[0].data();
            let b = args.inputs[1].data();
            let g = args.out_grad;
            let mut contribs: GradContribs<E> = vec![None, None];
            match &mode {
                Broadcast::Same => {
                    if args.needs[0] {
                        let da: Vec<E> = a
                            .iter()
                            .zip(b.iter())
                            .zip(g)
                            .map(|((&x, &y), &gv)| R::grads(x, y, gv).0)
                            .collect();
                        contribs[0] = Some(da);
                    }
                    if args.needs[1] {
                        let db: Vec<E> = a
                            .iter()
                            .zip(b.iter())
                            .zip(g)
                            .map(|((&x, &y), &gv)| R::grads(x, y, gv).1)
                            .collect();
                        contribs[1] = Some(db);
                    }
                }
                Broadcast::Map { batch, c, hw } => {
                    if args.needs[0] {
                        let mut da = vec![E::zero(); a.len()];
                        for bi in 0..*batch {
                            let brow = &b[bi * hw..(bi + 1) * hw];
                            for ci in 0..*c {
                                let base = (bi * c + ci) * hw;
                                for p in 0..*hw {
                                    da[base + p] = R::grads(a[base + p], brow[p], g[base + p]).0;
                                }
                            }
                        }
                        contribs[0] = Some(da);
                    }
                    if args.needs[1] {
                        // Map gradient sums over the broadcast channel axis.
                        let mut db = vec![E::zero(); batch * hw];
                        for bi in 0..*batch {
                            let brow = &b[bi * hw..(bi + 1) * hw];
                            for ci in 0..*c {
                                let base = (bi * c + ci) * hw;
                                for p in 0..*hw {
                                    db[bi * hw + p] +=
                                        R::grads(a[base + p], brow[p], g[base + p]).1;
                                }
                            }
                        }
                        contribs[1] = Some(db);
                    }
                }
            }
            contribs
        }),
    ))
}
