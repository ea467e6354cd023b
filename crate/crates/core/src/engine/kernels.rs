//! Index tables shared by the convolution and pooling kernels.

use super::Real;

const PAD: u32 = u32::MAX;

/// Geometry of an N-d convolution over the trailing spatial axes of a
/// `[batch, channels, spatial...]` array.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub in_sp: Vec<usize>,
    pub kernel: Vec<usize>,
    pub out_sp: Vec<usize>,
    /// For every (output position, kernel offset) the flat input position,
    /// or `PAD` when the tap falls into zero padding.
    table: Vec<u32>,
    /// Unit-stride geometries only: contiguous runs along the last axis.
    runs: Vec<Run>,
}

/// `len` consecutive outputs from `out` read the same tap from `len`
/// consecutive inputs starting at `inp`.
#[derive(Clone, Copy, Debug)]
struct Run {
    out: u32,
    inp: u32,
    len: u32,
    tap: u32,
}

impl ConvGeom {
    pub fn new(in_sp: &[usize], kernel: &[usize], stride: &[usize], pad: &[usize]) -> Option<Self> {
        let nd = in_sp.len();
        let mut out_sp = Vec::with_capacity(nd);
        for d in 0..nd {
            let span = in_sp[d] + 2 * pad[d];
            if span < kernel[d] || stride[d] == 0 {
                return None;
            }
            out_sp.push((span - kernel[d]) / stride[d] + 1);
        }
        let p: usize = out_sp.iter().product();
        let k: usize = kernel.iter().product();
        let mut table = Vec::with_capacity(p * k);
        let mut out_idx = vec![0usize; nd];
        let mut k_idx = vec![0usize; nd];
        for _ in 0..p {
            k_idx.iter_mut().for_each(|v| *v = 0);
            for _ in 0..k {
                let mut flat = 0usize;
                let mut inside = true;
                for d in 0..nd {
                    let pos = (out_idx[d] * stride[d] + k_idx[d]) as isize - pad[d] as isize;
                    if pos < 0 || pos >= in_sp[d] as isize {
                        inside = false;
                        break;
                    }
                    flat = flat * in_sp[d] + pos as usize;
                }
                table.push(if inside { flat as u32 } else { PAD });
                increment(&mut k_idx, kernel);
            }
            increment(&mut out_idx, &out_sp);
        }
        let runs = if stride.iter().all(|&s| s == 1) {
            unit_stride_runs(in_sp, kernel, pad, &out_sp)
        } else {
            Vec::new()
        };
        Some(Self {
            in_sp: in_sp.to_vec(),
            kernel: kernel.to_vec(),
            out_sp,
            table,
            runs,
        })
    }

    /// Whether the run-based kernels below apply.
    pub fn has_runs(&self) -> bool {
        !self.runs.is_empty()
    }

    /// `out[b, o] += sum_{i, tap} w[o, i, tap] * x[b, i, shifted]`.
    pub fn direct_forward<T: Real>(&self, x: &[T], w: &[T], out: &mut [T], batch: usize, ci: usize, co: usize) {
        let (s, p, k) = (self.in_size(), self.out_size(), self.k_size());
        for b in 0..batch {
            for o in 0..co {
                let dst = &mut out[(b * co + o) * p..(b * co + o + 1) * p];
                for i in 0..ci {
                    let src = &x[(b * ci + i) * s..(b * ci + i + 1) * s];
                    let wk = &w[(o * ci + i) * k..(o * ci + i + 1) * k];
                    for r in &self.runs {
                        let wv = wk[r.tap as usize];
                        let (d, sr) = (r.out as usize, r.inp as usize);
                        let n = r.len as usize;
                        for (dv, &sv) in dst[d..d + n].iter_mut().zip(&src[sr..sr + n]) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }

    /// Gradients of [`direct_forward`](Self::direct_forward) with respect
    /// to the weights (accumulated into `dw`) and, when given, the input.
    #[allow(clippy::too_many_arguments)]
    pub fn direct_backward<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        g: &[T],
        mut dw: Option<&mut [T]>,
        mut dx: Option<&mut [T]>,
        batch: usize,
        ci: usize,
        co: usize,
    ) {
        let (s, p, k) = (self.in_size(), self.out_size(), self.k_size());
        for b in 0..batch {
            for o in 0..co {
                let go = &g[(b * co + o) * p..(b * co + o + 1) * p];
                for i in 0..ci {
                    let xi = &x[(b * ci + i) * s..(b * ci + i + 1) * s];
                    let base = (o * ci + i) * k;
                    for r in &self.runs {
                        let (d, sr, n) = (r.out as usize, r.inp as usize, r.len as usize);
                        let t = base + r.tap as usize;
                        if let Some(dw) = dw.as_deref_mut() {
                            let mut acc = T::zero();
                            for (&gv, &xv) in go[d..d + n].iter().zip(&xi[sr..sr + n]) {
                                acc += gv * xv;
                            }
                            dw[t] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = w[t];
                            let dst = &mut dx[(b * ci + i) * s + sr..(b * ci + i) * s + sr + n];
                            for (dv, &gv) in dst.iter_mut().zip(&go[d..d + n]) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn in_size(&self) -> usize {
        self.in_sp.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.out_sp.iter().product()
    }

    pub fn k_size(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `x: [batch, ch, in]` into `cols: [batch * P, ch * K]`.
    pub fn im2col<T: Real>(&self, x: &[T], batch: usize, ch: usize) -> Vec<T> {
        let (s, p, k) = (self.in_size(), self.out_size(), self.k_size());
        let row = ch * k;
        let mut cols = vec![T::zero(); batch * p * row];
        for b in 0..batch {
            for pi in 0..p {
                let taps = &self.table[pi * k..(pi + 1) * k];
                let dst = &mut cols[(b * p + pi) * row..(b * p + pi + 1) * row];
                for c in 0..ch {
                    let src = &x[(b * ch + c) * s..(b * ch + c + 1) * s];
                    let d = &mut dst[c * k..(c + 1) * k];
                    for (slot, &t) in d.iter_mut().zip(taps) {
                        if t != PAD {
                            *slot = src[t as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col), accumulating into `dx`.
    pub fn col2im<T: Real>(&self, dcols: &[T], dx: &mut [T], batch: usize, ch: usize) {
        let (s, p, k) = (self.in_size(), self.out_size(), self.k_size());
        let row = ch * k;
        for b in 0..batch {
            for pi in 0..p {
                let taps = &self.table[pi * k..(pi + 1) * k];
                let src = &dcols[(b * p + pi) * row..(b * p + pi + 1) * row];
                for c in 0..ch {
                    let dst = &mut dx[(b * ch + c) * s..(b * ch + c + 1) * s];
                    for (&g, &t) in src[c * k..(c + 1) * k].iter().zip(taps) {
                        if t != PAD {
                            dst[t as usize] += g;
                        }
                    }
                }
            }
        }
    }

    /// Input positions covered by output position `pi` (padding skipped).
    pub fn taps(&self, pi: usize) -> impl Iterator<Item = usize> + '_ {
        let k = self.k_size();
        self.table[pi * k..(pi + 1) * k]
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| t as usize)
    }
}

fn unit_stride_runs(in_sp: &[usize], kernel: &[usize], pad: &[usize], out_sp: &[usize]) -> Vec<Run> {
    let nd = in_sp.len();
    let (last_in, last_out, last_k, last_pad) = (in_sp[nd - 1], out_sp[nd - 1], kernel[nd - 1], pad[nd - 1]);
    let rows: usize = out_sp[..nd - 1].iter().product();
    let taps: usize = kernel[..nd - 1].iter().product();
    let mut runs = Vec::new();
    let mut row_idx = vec![0usize; nd - 1];
    for row in 0..rows {
        let mut k_idx = vec![0usize; nd - 1];
        for t in 0..taps {
            let mut in_row = 0usize;
            let mut inside = true;
            for d in 0..nd - 1 {
                let pos = (row_idx[d] + k_idx[d]) as isize - pad[d] as isize;
                if pos < 0 || pos >= in_sp[d] as isize {
                    inside = false;
                    break;
                }
                in_row = in_row * in_sp[d] + pos as usize;
            }
            if inside {
                for kl in 0..last_k {
                    // outputs o with 0 <= o + kl - pad < last_in
                    let lo = last_pad.saturating_sub(kl);
                    let hi = (last_in + last_pad).saturating_sub(kl).min(last_out);
                    if hi > lo {
                        runs.push(Run {
                            out: (row * last_out + lo) as u32,
                            inp: (in_row * last_in + lo + kl - last_pad) as u32,
                            len: (hi - lo) as u32,
                            tap: (t * last_k + kl) as u32,
                        });
                    }
                }
            }
            increment(&mut k_idx, &kernel[..nd - 1]);
        }
        increment(&mut row_idx, &out_sp[..nd - 1]);
    }
    runs
}

fn increment(idx: &mut [usize], dims: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < dims[d] {
            return;
        }
        idx[d] = 0;
    }
}

/// `(outer, dim, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
