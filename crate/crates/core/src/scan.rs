//! Value-priority sequence scanning: stable descending argsort of pixels,
//! gather to a sequence, a causal diagonal state recurrence per channel,
//! and scatter back to the grid.

use crate::error::{Error, Result};
use crate::ops::elementwise::softplus;
use crate::param::Param;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor4;

/// Bijection over flattened pixel indices with cached inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl Permutation {
    pub fn from_forward(forward: Vec<u32>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![u32::MAX; n];
        for (t, &p) in forward.iter().enumerate() {
            if p as usize >= n || inverse[p as usize] != u32::MAX {
                return Err(Error::param(format!(
                    "index array is not a bijection over [0, {n})"
                )));
            }
            inverse[p as usize] = t as u32;
        }
        Ok(Permutation { forward, inverse })
    }

    pub fn identity(n: usize) -> Self {
        let forward: Vec<u32> = (0..n as u32).collect();
        Permutation {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Source pixel visited at sequence position `t`.
    #[inline]
    pub fn source(&self, t: usize) -> usize {
        self.forward[t] as usize
    }

    /// Sequence position at which pixel `p` is visited.
    #[inline]
    pub fn position(&self, p: usize) -> usize {
        self.inverse[p] as usize
    }

    pub fn forward_indices(&self) -> &[u32] {
        &self.forward
    }
}

/// Stable descending argsort: equal scores keep raster (ascending index) order.
pub fn argsort_desc(values: &[f64]) -> Result<Permutation> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("argsort input contains NaN".to_string()));
    }
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        values[b as usize]
            .partial_cmp(&values[a as usize])
            .expect("NaN screened above")
            .then(a.cmp(&b))
    });
    Permutation::from_forward(idx)
}

/// Stable ascending argsort (the reversed-ordering ablation).
pub fn argsort_asc(values: &[f64]) -> Result<Permutation> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("argsort input contains NaN".to_string()));
    }
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        values[a as usize]
            .partial_cmp(&values[b as usize])
            .expect("NaN screened above")
            .then(a.cmp(&b))
    });
    Permutation::from_forward(idx)
}

/// The four fixed raster orders used by the conventional scan baseline.
pub fn raster_orders(h: usize, w: usize) -> [Permutation; 4] {
    let n = h * w;
    let row: Vec<u32> = (0..n as u32).collect();
    let row_rev: Vec<u32> = (0..n as u32).rev().collect();
    let mut col = Vec::with_capacity(n);
    for x in 0..w {
        for y in 0..h {
            col.push((y * w + x) as u32);
        }
    }
    let col_rev: Vec<u32> = col.iter().rev().copied().collect();
    [
        Permutation::from_forward(row).expect("raster order"),
        Permutation::from_forward(row_rev).expect("raster order"),
        Permutation::from_forward(col).expect("raster order"),
        Permutation::from_forward(col_rev).expect("raster order"),
    ]
}

/// Per-channel diagonal recurrence parameters.
///
/// The decay is parameterized as `A = exp(-softplus(a_raw))`, which keeps
/// every mode strictly inside the unit interval regardless of `a_raw`.
pub struct ScanParams {
    pub a_raw: Param,
    pub input_proj: Param,
    pub output_proj: Param,
    pub skip: Param,
    pub d_state: usize,
}

impl ScanParams {
    pub fn channels(&self) -> usize {
        self.a_raw.value.dims()[0]
    }
}

impl crate::param::ParamVisit for ScanParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&crate::param::join(prefix, "a_raw"), &self.a_raw);
        f(&crate::param::join(prefix, "B"), &self.input_proj);
        f(&crate::param::join(prefix, "C"), &self.output_proj);
        f(&crate::param::join(prefix, "D"), &self.skip);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&crate::param::join(prefix, "a_raw"), &mut self.a_raw);
        f(&crate::param::join(prefix, "B"), &mut self.input_proj);
        f(&crate::param::join(prefix, "C"), &mut self.output_proj);
        f(&crate::param::join(prefix, "D"), &mut self.skip);
    }
}

#[inline]
pub fn decay(a_raw: f64) -> f64 {
    (-softplus(a_raw)).exp()
}

/// Sequential reference recurrence. `xseq` is (B, 1, N, C); parameters are
/// (C, D, 1, 1) except the skip gain (C, 1, 1, 1).
pub fn ssm_forward(
    xseq: &Tensor4,
    a_raw: &Tensor4,
    input_proj: &Tensor4,
    output_proj: &Tensor4,
    skip: &Tensor4,
) -> Result<Tensor4> {
    let [batch, one, n, c] = xseq.dims();
    let [ca, d, _, _] = a_raw.dims();
    if one != 1 || ca != c || input_proj.dims() != a_raw.dims() || output_proj.dims() != a_raw.dims()
    {
        return Err(Error::shape(format!(
            "scan parameter extents {:?}/{:?}/{:?} for sequence {:?}",
            a_raw.dims(),
            input_proj.dims(),
            output_proj.dims(),
            xseq.dims()
        )));
    }
    if skip.dims() != [c, 1, 1, 1] {
        return Err(Error::shape(format!(
            "skip gain extents {:?}, expected [{c}, 1, 1, 1]",
            skip.dims()
        )));
    }
    let mut out = Tensor4::zeros(xseq.dims());
    let mut h = vec![0.0f64; d];
    for b in 0..batch {
        for ch in 0..c {
            let a: Vec<f64> = (0..d).map(|j| decay(a_raw.at(ch, j, 0, 0))).collect();
            let bp: Vec<f64> = (0..d).map(|j| input_proj.at(ch, j, 0, 0)).collect();
            let cp: Vec<f64> = (0..d).map(|j| output_proj.at(ch, j, 0, 0)).collect();
            let dk = skip.at(ch, 0, 0, 0);
            h.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..n {
                let x = xseq.at(b, 0, t, ch);
                let mut y = 0.0;
                for j in 0..d {
                    h[j] = a[j] * h[j] + bp[j] * x;
                    y += cp[j] * h[j];
                }
                y += dk * x;
                if !y.is_finite() {
                    return Err(Error::numeric(format!(
                        "state recurrence diverged at step {t} (channel {ch})"
                    )));
                }
                out.set(b, 0, t, ch, y);
            }
        }
    }
    Ok(out)
}

/// Backpropagation through the recurrence. Hidden states are recomputed
/// rather than stored with the node.
pub fn ssm_backward(
    xseq: &Tensor4,
    a_raw: &Tensor4,
    input_proj: &Tensor4,
    output_proj: &Tensor4,
    skip: &Tensor4,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4, Tensor4, Tensor4) {
    let [batch, _, n, c] = xseq.dims();
    let d = a_raw.dims()[1];
    let mut dx = Tensor4::zeros(xseq.dims());
    let mut da_raw = Tensor4::zeros(a_raw.dims());
    let mut dbp = Tensor4::zeros(input_proj.dims());
    let mut dcp = Tensor4::zeros(output_proj.dims());
    let mut dskip = Tensor4::zeros(skip.dims());
    let mut hs = vec![0.0f64; (n + 1) * d];
    for b in 0..batch {
        for ch in 0..c {
            let araw: Vec<f64> = (0..d).map(|j| a_raw.at(ch, j, 0, 0)).collect();
            let a: Vec<f64> = araw.iter().map(|&v| decay(v)).collect();
            let bp: Vec<f64> = (0..d).map(|j| input_proj.at(ch, j, 0, 0)).collect();
            let cp: Vec<f64> = (0..d).map(|j| output_proj.at(ch, j, 0, 0)).collect();
            let dk = skip.at(ch, 0, 0, 0);
            // Recompute hidden trajectory; hs[t] holds h after step t-1.
            hs[..d].iter_mut().for_each(|v| *v = 0.0);
            for t in 0..n {
                let x = xseq.at(b, 0, t, ch);
                for j in 0..d {
                    hs[(t + 1) * d + j] = a[j] * hs[t * d + j] + bp[j] * x;
                }
            }
            let mut dh = vec![0.0f64; d];
            let mut da = vec![0.0f64; d];
            for t in (0..n).rev() {
                let x = xseq.at(b, 0, t, ch);
                let g = grad_out.at(b, 0, t, ch);
                let mut dxv = g * dk;
                dskip.data_mut()[ch] += g * x;
                for j in 0..d {
                    dcp.data_mut()[ch * d + j] += g * hs[(t + 1) * d + j];
                    dh[j] += g * cp[j];
                    da[j] += dh[j] * hs[t * d + j];
                    dbp.data_mut()[ch * d + j] += dh[j] * x;
                    dxv += dh[j] * bp[j];
                    dh[j] *= a[j];
                }
                let i = dx.idx(b, 0, t, ch);
                dx.data_mut()[i] = dxv;
            }
            for j in 0..d {
                // dA/da_raw = -A * sigmoid(a_raw)
                let sig = crate::ops::elementwise::sigmoid(araw[j]);
                da_raw.data_mut()[ch * d + j] += da[j] * (-a[j] * sig);
            }
        }
    }
    (dx, da_raw, dbp, dcp, dskip)
}

/// Chunked evaluation of the same recurrence. Within each chunk the local
/// response is computed from a zero state; chunk carries are then folded in
/// with a prefix of decay powers. Regrouping changes rounding, so outputs
/// agree with [`ssm_forward`] only to ~1e-12 relative, not bitwise.
pub fn ssm_forward_chunked(
    xseq: &Tensor4,
    a_raw: &Tensor4,
    input_proj: &Tensor4,
    output_proj: &Tensor4,
    skip: &Tensor4,
    chunk: usize,
) -> Result<Tensor4> {
    let [batch, _, n, c] = xseq.dims();
    let d = a_raw.dims()[1];
    let chunk = chunk.max(1);
    let mut out = Tensor4::zeros(xseq.dims());
    for b in 0..batch {
        for ch in 0..c {
            let a: Vec<f64> = (0..d).map(|j| decay(a_raw.at(ch, j, 0, 0))).collect();
            let bp: Vec<f64> = (0..d).map(|j| input_proj.at(ch, j, 0, 0)).collect();
            let cp: Vec<f64> = (0..d).map(|j| output_proj.at(ch, j, 0, 0)).collect();
            let dk = skip.at(ch, 0, 0, 0);
            let mut carry = vec![0.0f64; d];
            let mut local = vec![0.0f64; chunk * d];
            for start in (0..n).step_by(chunk) {
                let len = chunk.min(n - start);
                // Local pass from a zero state.
                let mut h = vec![0.0f64; d];
                for t in 0..len {
                    let x = xseq.at(b, 0, start + t, ch);
                    for j in 0..d {
                        h[j] = a[j] * h[j] + bp[j] * x;
                        local[t * d + j] = h[j];
                    }
                }
                // Fold the carry in with running decay powers.
                let mut apow = vec![1.0f64; d];
                for t in 0..len {
                    let x = xseq.at(b, 0, start + t, ch);
                    let mut y = dk * x;
                    for j in 0..d {
                        apow[j] *= a[j];
                        y += cp[j] * (local[t * d + j] + apow[j] * carry[j]);
                    }
                    out.set(b, 0, start + t, ch, y);
                }
                for j in 0..d {
                    carry[j] = local[(len - 1) * d + j] + apow[j] * carry[j];
                }
            }
        }
    }
    Ok(out)
}

pub fn gather_forward(x: &Tensor4, perms: &[Permutation]) -> Result<Tensor4> {
    let [batch, c, h, w] = x.dims();
    let n = h * w;
    if perms.len() != batch || perms.iter().any(|p| p.len() != n) {
        return Err(Error::shape(format!(
            "need {batch} permutations of length {n}"
        )));
    }
    let mut out = Tensor4::zeros([batch, 1, n, c]);
    for b in 0..batch {
        for t in 0..n {
            let p = perms[b].source(t);
            let (py, px) = (p / w, p % w);
            for ch in 0..c {
                out.set(b, 0, t, ch, x.at(b, ch, py, px));
            }
        }
    }
    Ok(out)
}

pub fn gather_backward(x_dims: [usize; 4], perms: &[Permutation], grad_out: &Tensor4) -> Tensor4 {
    let [batch, c, h, w] = x_dims;
    let n = h * w;
    let mut dx = Tensor4::zeros(x_dims);
    for b in 0..batch {
        for t in 0..n {
            let p = perms[b].source(t);
            let (py, px) = (p / w, p % w);
            for ch in 0..c {
                let i = dx.idx(b, ch, py, px);
                dx.data_mut()[i] = grad_out.at(b, 0, t, ch);
            }
        }
    }
    dx
}

/// Sequence element `t` lands on pixel `perm.source(t)`.
pub fn scatter_forward(y: &Tensor4, perms: &[Permutation], h: usize, w: usize) -> Result<Tensor4> {
    let [batch, one, n, c] = y.dims();
    if one != 1 || n != h * w || perms.len() != batch || perms.iter().any(|p| p.len() != n) {
        return Err(Error::shape(format!(
            "scatter of {:?} onto {h}x{w} with {} permutations",
            y.dims(),
            perms.len()
        )));
    }
    let mut out = Tensor4::zeros([batch, c, h, w]);
    for b in 0..batch {
        for t in 0..n {
            let p = perms[b].source(t);
            let (py, px) = (p / w, p % w);
            for ch in 0..c {
                out.set(b, ch, py, px, y.at(b, 0, t, ch));
            }
        }
    }
    Ok(out)
}

pub fn scatter_backward(y_dims: [usize; 4], perms: &[Permutation], grad_out: &Tensor4) -> Tensor4 {
    let [batch, _, n, c] = y_dims;
    let w = grad_out.dims()[3];
    let mut dy = Tensor4::zeros(y_dims);
    for b in 0..batch {
        for t in 0..n {
            let p = perms[b].source(t);
            let (py, px) = (p / w, p % w);
            for ch in 0..c {
                let i = dy.idx(b, 0, t, ch);
                dy.data_mut()[i] = grad_out.at(b, ch, py, px);
            }
        }
    }
    dy
}

/// Scan direction for the reordered recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Highest-value pixels first (the default priority order).
    Forward,
    /// Ascending value order (ablation).
    Reversed,
}

/// Permutations for one batch of value maps.
pub fn value_permutations(values: &Tensor4, direction: Direction) -> Result<Vec<Permutation>> {
    let [batch, one, h, w] = values.dims();
    if one != 1 {
        return Err(Error::shape(format!(
            "value map must be single-channel, found {:?}",
            values.dims()
        )));
    }
    let n = h * w;
    let mut perms = Vec::with_capacity(batch);
    for b in 0..batch {
        let start = b * n;
        let slice = &values.data()[start..start + n];
        perms.push(match direction {
            Direction::Forward => argsort_desc(slice)?,
            Direction::Reversed => argsort_asc(slice)?,
        });
    }
    Ok(perms)
}

/// Reordered scan on the tape: gather by the value permutation, run the
/// recurrence, scatter back. No gradient flows through the ordering itself.
pub fn reordered_scan(
    tape: &mut Tape,
    x: NodeId,
    values: &Tensor4,
    params: &ScanParams,
    direction: Direction,
) -> Result<NodeId> {
    let [_, _, h, w] = tape.value(x).dims();
    if values.dims()[2] != h || values.dims()[3] != w {
        return Err(Error::shape(format!(
            "value map extent {:?} does not match features {h}x{w}",
            values.dims()
        )));
    }
    let perms = value_permutations(values, direction)?;
    scan_with_orders(tape, x, &perms, params)
}

fn scan_with_orders(
    tape: &mut Tape,
    x: NodeId,
    perms: &[Permutation],
    params: &ScanParams,
) -> Result<NodeId> {
    let [_, _, h, w] = tape.value(x).dims();
    let seq = tape.gather_pixels(x, perms.to_vec())?;
    let a = params.a_raw.bind(tape);
    let bp = params.input_proj.bind(tape);
    let cp = params.output_proj.bind(tape);
    let dk = params.skip.bind(tape);
    let y = tape.ssm_scan(seq, a, bp, cp, dk)?;
    tape.scatter_pixels(y, perms.to_vec(), h, w)
}

/// Average of four fixed-direction scans sharing one parameter set.
pub fn four_way_scan(tape: &mut Tape, x: NodeId, params: &ScanParams) -> Result<NodeId> {
    let [batch, _, h, w] = tape.value(x).dims();
    let orders = raster_orders(h, w);
    let mut acc: Option<NodeId> = None;
    for order in orders.iter() {
        let perms = vec![order.clone(); batch];
        let y = scan_with_orders(tape, x, &perms, params)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    tape.affine(acc.expect("four scans"), 0.25, 0.0)
}
