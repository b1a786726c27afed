//! FFTs on dense tensors.
//!
//! Convention: unnormalized forward transform, `1/N`-scaled inverse.
//! Arbitrary extents are supported (mixed-radix/Bluestein kernels under
//! the hood), which the non-dyadic 2-d grids rely on. Transforms along
//! several axes are applied axis by axis; non-transformed axes act as
//! batch axes.
//!
//! Two families are exposed:
//!
//! * [`fft_forward`] / [`fft_inverse`]: full complex spectra, the
//!   reference semantics used by diagnostics and oracles.
//! * [`rfft`] / [`irfft`]: real-input transforms that store only the
//!   nonnegative frequencies of the last transformed axis and restore
//!   conjugate symmetry on inversion. The spectral layers use these.

use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{CoreError, Result};
use crate::tensor::dense::{numel, strides, ComplexTensor, Tensor};

/// Imaginary residue above this (relative to the output magnitude)
/// signals a conjugate-symmetry violation upstream of [`fft_inverse`].
pub const IMAG_RESIDUE_THRESHOLD: f64 = 1e-10;

const PAR_MIN_ELEMS: usize = 1 << 15;

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    let mut p = planner().lock().expect("fft planner poisoned");
    if forward {
        p.plan_fft_forward(len)
    } else {
        p.plan_fft_inverse(len)
    }
}

fn check_axes(rank: usize, axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(CoreError::invalid("no transform axes given"));
    }
    for &a in axes {
        if a >= rank {
            return Err(CoreError::AxisOutOfRange { axis: a, rank });
        }
    }
    let mut seen = axes.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != axes.len() {
        return Err(CoreError::invalid(format!("repeated transform axis in {axes:?}")));
    }
    Ok(())
}

/// One complex transform along `axis`, in place over split planes.
/// `scale` is applied to every output element.
fn transform_axis(re: &mut [f64], im: &mut [f64], dims: &[usize], axis: usize, forward: bool, scale: f64) {
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let block = len * inner;
    let fft = plan(len, forward);

    let run_block = |re_b: &mut [f64], im_b: &mut [f64], fft: &Arc<dyn Fft<f64>>| {
        let mut line = vec![Complex64::default(); len];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for i in 0..inner {
            for j in 0..len {
                let idx = j * inner + i;
                line[j] = Complex64::new(re_b[idx], im_b[idx]);
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for j in 0..len {
                let idx = j * inner + i;
                re_b[idx] = line[j].re * scale;
                im_b[idx] = line[j].im * scale;
            }
        }
    };

    if outer > 1 && outer * block >= PAR_MIN_ELEMS {
        re.par_chunks_mut(block)
            .zip(im.par_chunks_mut(block))
            .for_each(|(re_b, im_b)| run_block(re_b, im_b, &fft));
    } else {
        for (re_b, im_b) in re.chunks_mut(block).zip(im.chunks_mut(block)) {
            run_block(re_b, im_b, &fft);
        }
    }
}

/// Complex-to-complex transform along `axes`. Forward is unnormalized;
/// the inverse divides by the product of the transformed extents.
pub fn fft_c2c(x: &ComplexTensor, axes: &[usize], forward: bool) -> Result<ComplexTensor> {
    check_axes(x.shape().len(), axes)?;
    let mut out = x.clone();
    let dims = out.shape().to_vec();
    for &a in axes {
        let scale = if forward { 1.0 } else { 1.0 / dims[a] as f64 };
        transform_axis(out.re_mut(), out.im_mut(), &dims, a, forward, scale);
    }
    Ok(out)
}

/// Unnormalized conjugate transform (`N`-scaled inverse), the adjoint of
/// the forward transform along the same axis.
pub(crate) fn adjoint_of_forward_axis(x: &mut ComplexTensor, axis: usize) {
    let dims = x.shape().to_vec();
    transform_axis(x.re_mut(), x.im_mut(), &dims, axis, false, 1.0);
}

/// Normalized forward transform, the adjoint of the `1/N` inverse along
/// the same axis.
pub(crate) fn adjoint_of_inverse_axis(x: &mut ComplexTensor, axis: usize) {
    let dims = x.shape().to_vec();
    let n = dims[axis] as f64;
    transform_axis(x.re_mut(), x.im_mut(), &dims, axis, true, 1.0 / n);
}

/// Full complex DFT of a real tensor along `axes`.
pub fn fft_forward(x: &Tensor, axes: &[usize]) -> Result<ComplexTensor> {
    for &a in axes {
        if a < x.rank() && x.shape()[a] < 1 {
            return Err(CoreError::invalid("transformed axis must have extent >= 1"));
        }
    }
    fft_c2c(&x.to_complex(), axes, true)
}

/// Inverse of [`fft_forward`]. The imaginary plane of the result must be
/// residue-level; anything above the threshold is reported as a
/// conjugate-symmetry violation.
pub fn fft_inverse(x: &ComplexTensor, axes: &[usize]) -> Result<Tensor> {
    let out = fft_c2c(x, axes, false)?;
    let scale = out.re().iter().fold(1.0_f64, |m, &v| m.max(v.abs()));
    let residue = out.max_abs_im();
    let threshold = IMAG_RESIDUE_THRESHOLD * scale;
    if residue > threshold {
        return Err(CoreError::ImaginaryResidue { residue, threshold });
    }
    Ok(out.re_tensor())
}

/// Extent of the stored half spectrum for a real transform of length `n`.
pub fn half_extent(n: usize) -> usize {
    n / 2 + 1
}

fn slice_axis_prefix(x: &ComplexTensor, axis: usize, keep: usize) -> ComplexTensor {
    let dims = x.shape();
    let mut out_shape = dims.to_vec();
    out_shape[axis] = keep;
    let mut out = ComplexTensor::zeros(&out_shape);
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    for o in 0..outer {
        for j in 0..keep {
            let src = o * dims[axis] * inner + j * inner;
            let dst = o * keep * inner + j * inner;
            for i in 0..inner {
                out.re_mut()[dst + i] = x.re()[src + i];
                out.im_mut()[dst + i] = x.im()[src + i];
            }
        }
    }
    out
}

/// Real-input FFT along `axes`: full spectra on all but the last listed
/// axis, nonnegative frequencies only on the last one.
pub fn rfft(x: &Tensor, axes: &[usize]) -> Result<ComplexTensor> {
    check_axes(x.rank(), axes)?;
    let last = *axes.last().expect("checked non-empty");
    let mut spec = fft_c2c(&x.to_complex(), &[last], true)?;
    let keep = half_extent(x.shape()[last]);
    spec = slice_axis_prefix(&spec, last, keep);
    for &a in &axes[..axes.len() - 1] {
        spec = fft_c2c(&spec, &[a], true)?;
    }
    Ok(spec)
}

/// Expand a half spectrum along `axis` back to `full` bins using
/// conjugate symmetry. The imaginary parts of the self-conjugate bins
/// (DC and, for even `full`, Nyquist) are dropped.
pub(crate) fn expand_half_axis(x: &ComplexTensor, axis: usize, full: usize) -> ComplexTensor {
    let dims = x.shape();
    let half = dims[axis];
    debug_assert_eq!(half, half_extent(full));
    let mut out_shape = dims.to_vec();
    out_shape[axis] = full;
    let mut out = ComplexTensor::zeros(&out_shape);
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    for o in 0..outer {
        let src_base = o * half * inner;
        let dst_base = o * full * inner;
        for j in 0..half {
            let self_conj = j == 0 || (full % 2 == 0 && j == full / 2);
            for i in 0..inner {
                let s = src_base + j * inner + i;
                let re = x.re()[s];
                let im = if self_conj { 0.0 } else { x.im()[s] };
                let d = dst_base + j * inner + i;
                out.re_mut()[d] = re;
                out.im_mut()[d] = im;
                if !self_conj {
                    let dmirror = dst_base + (full - j) * inner + i;
                    out.re_mut()[dmirror] = re;
                    out.im_mut()[dmirror] = -im;
                }
            }
        }
    }
    out
}

/// Adjoint of [`expand_half_axis`]: fold a full-spectrum cotangent back
/// onto the stored half.
pub(crate) fn collapse_half_axis(g: &ComplexTensor, axis: usize, half: usize) -> ComplexTensor {
    let dims = g.shape();
    let full = dims[axis];
    let mut out_shape = dims.to_vec();
    out_shape[axis] = half;
    let mut out = ComplexTensor::zeros(&out_shape);
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    for o in 0..outer {
        let src_base = o * full * inner;
        let dst_base = o * half * inner;
        for j in 0..half {
            let self_conj = j == 0 || (full % 2 == 0 && j == full / 2);
            for i in 0..inner {
                let d = dst_base + j * inner + i;
                let s = src_base + j * inner + i;
                if self_conj {
                    out.re_mut()[d] = g.re()[s];
                    out.im_mut()[d] = 0.0;
                } else {
                    let smirror = src_base + (full - j) * inner + i;
                    out.re_mut()[d] = g.re()[s] + g.re()[smirror];
                    out.im_mut()[d] = g.im()[s] - g.im()[smirror];
                }
            }
        }
    }
    out
}

/// Inverse of [`rfft`]. `full_extents` lists the original extent of each
/// transformed axis, in the same order as `axes`.
pub fn irfft(x: &ComplexTensor, axes: &[usize], full_extents: &[usize]) -> Result<Tensor> {
    check_axes(x.shape().len(), axes)?;
    if axes.len() != full_extents.len() {
        return Err(CoreError::invalid("axes and full_extents length mismatch"));
    }
    let last = *axes.last().expect("checked non-empty");
    let full_last = *full_extents.last().expect("checked non-empty");
    if x.shape()[last] != half_extent(full_last) {
        return Err(CoreError::shape(format!(
            "half spectrum extent {} does not match full extent {}",
            x.shape()[last],
            full_last
        )));
    }
    let mut spec = x.clone();
    for &a in &axes[..axes.len() - 1] {
        spec = fft_c2c(&spec, &[a], false)?;
    }
    let spec = expand_half_axis(&spec, last, full_last);
    let out = fft_c2c(&spec, &[last], false)?;
    Ok(out.re_tensor())
}

/// Zero every spectral entry outside the retained low-frequency blocks.
///
/// Per listed axis of extent `n` with cutoff `k`, bins `0..k` and their
/// conjugate partners `n-k+1..n` survive. On a 2-d full spectrum the
/// retained set is the four corner blocks. The shape is unchanged and
/// the operation is an orthogonal projection.
pub fn truncate_modes(x: &ComplexTensor, axes: &[usize], k_max: &[usize]) -> Result<ComplexTensor> {
    check_axes(x.shape().len(), axes)?;
    if axes.len() != k_max.len() {
        return Err(CoreError::invalid("axes and k_max length mismatch"));
    }
    for (&a, &k) in axes.iter().zip(k_max) {
        let n = x.shape()[a];
        if k == 0 {
            return Err(CoreError::invalid("k_max of zero rejected"));
        }
        if k > n / 2 + 1 {
            return Err(CoreError::invalid(format!(
                "k_max {} exceeds n/2+1 = {} on axis {}",
                k,
                n / 2 + 1,
                a
            )));
        }
    }
    let dims = x.shape().to_vec();
    let st = strides(&dims);
    let mut keep_per_axis: Vec<Option<Vec<bool>>> = vec![None; dims.len()];
    for (&a, &k) in axes.iter().zip(k_max) {
        let n = dims[a];
        let mut keep = vec![false; n];
        for (j, slot) in keep.iter_mut().enumerate() {
            *slot = j < k || j + k > n;
        }
        keep_per_axis[a] = Some(keep);
    }
    let mut out = x.clone();
    let total = numel(&dims);
    for flat in 0..total {
        let mut rem = flat;
        let mut keep = true;
        for (d, &stride) in st.iter().enumerate() {
            let idx = rem / stride;
            rem %= stride;
            if let Some(mask) = &keep_per_axis[d] {
                if !mask[idx] {
                    keep = false;
                    break;
                }
            }
        }
        if !keep {
            out.re_mut()[flat] = 0.0;
            out.im_mut()[flat] = 0.0;
        }
    }
    Ok(out)
}
