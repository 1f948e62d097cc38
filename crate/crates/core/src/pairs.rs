//! Vectorizable inner loop of the particle-particle kernel-gradient sum.

use std::f64::consts::PI;

const LANES: usize = 8;

/// `exp(x)` for `x <= 0`, accurate to a couple of ulps; written with plain
/// arithmetic and integer bit tricks so that it vectorizes.
#[inline(always)]
pub(crate) fn exp_neg(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-700.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let k = t - SHIFT;
    let f = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor to degree 13 on |f| <= ln2 / 2
    let mut p = 1.0 / 6227020800.0;
    p = p * f + 1.0 / 479001600.0;
    p = p * f + 1.0 / 39916800.0;
    p = p * f + 1.0 / 3628800.0;
    p = p * f + 1.0 / 362880.0;
    p = p * f + 1.0 / 40320.0;
    p = p * f + 1.0 / 5040.0;
    p = p * f + 1.0 / 720.0;
    p = p * f + 1.0 / 120.0;
    p = p * f + 1.0 / 24.0;
    p = p * f + 1.0 / 6.0;
    p = p * f + 0.5;
    p = p * f + 1.0;
    p = p * f + 1.0;
    let ki = t.to_bits().wrapping_sub(SHIFT.to_bits());
    f64::from_bits(p.to_bits().wrapping_add(ki << 52))
}

/// Source coordinates in structure-of-arrays layout.
pub(crate) struct Sources<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub zs: &'a [f64],
}

/// Screened-kernel gradient parameters.
#[derive(Clone, Copy)]
pub(crate) struct PairKernel {
    pub zeta: f64,
    pub r_reg: f64,
    pub cutoff2: f64,
    pub box_len: f64,
}

#[inline(always)]
fn pair(k: &PairKernel, x: [f64; 3], sx: f64, sy: f64, sz: f64) -> [f64; 3] {
    let l = k.box_len;
    let inv = 1.0 / l;
    let dx = x[0] - sx;
    let dy = x[1] - sy;
    let dz = x[2] - sz;
    let dx = dx - l * (dx * inv).round_ties_even();
    let dy = dy - l * (dy * inv).round_ties_even();
    let dz = dz - l * (dz * inv).round_ties_even();
    let r2 = dx * dx + dy * dy + dz * dz;
    let r = r2.sqrt();
    // inside the regularization radius the magnitude is frozen at its value there
    let rs = r.max(k.r_reg);
    let zr = k.zeta * rs;
    let s = exp_neg(-zr) * (1.0 + zr) / (4.0 * PI * rs * rs * r);
    let s = if r2 <= k.cutoff2 && r2 > 0.0 { s } else { 0.0 };
    [s * dx, s * dy, s * dz]
}

#[inline(always)]
fn sum_body(k: &PairKernel, x: [f64; 3], src: &Sources) -> [f64; 3] {
    let mut ax = [0.0; LANES];
    let mut ay = [0.0; LANES];
    let mut az = [0.0; LANES];
    let cx = src.xs.chunks_exact(LANES);
    let cy = src.ys.chunks_exact(LANES);
    let cz = src.zs.chunks_exact(LANES);
    let (rx, ry, rz) = (cx.remainder(), cy.remainder(), cz.remainder());
    for ((bx, by), bz) in cx.zip(cy).zip(cz) {
        let bx: &[f64; LANES] = bx.try_into().unwrap();
        let by: &[f64; LANES] = by.try_into().unwrap();
        let bz: &[f64; LANES] = bz.try_into().unwrap();
        for j in 0..LANES {
            let g = pair(k, x, bx[j], by[j], bz[j]);
            ax[j] += g[0];
            ay[j] += g[1];
            az[j] += g[2];
        }
    }
    for ((&sx, &sy), &sz) in rx.iter().zip(ry).zip(rz) {
        let g = pair(k, x, sx, sy, sz);
        ax[0] += g[0];
        ay[0] += g[1];
        az[0] += g[2];
    }
    [ax.iter().sum(), ay.iter().sum(), az.iter().sum()]
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sum_avx2(k: &PairKernel, x: [f64; 3], src: &Sources) -> [f64; 3] {
    sum_body(k, x, src)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
unsafe fn sum_avx512(k: &PairKernel, x: [f64; 3], src: &Sources) -> [f64; 3] {
    sum_body(k, x, src)
}

fn sum_generic(k: &PairKernel, x: [f64; 3], src: &Sources) -> [f64; 3] {
    sum_body(k, x, src)
}

/// `sum_q grad K_reg(min_image(x - X_q))` over `src`, dropping pairs beyond
/// the cutoff and coincident pairs.
pub(crate) fn kernel_gradient_sum(k: &PairKernel, x: [f64; 3], src: &Sources) -> [f64; 3] {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("avx512dq") {
            // SAFETY: the required CPU features were just detected.
            return unsafe { sum_avx512(k, x, src) };
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            return unsafe { sum_avx2(k, x, src) };
        }
    }
    sum_generic(k, x, src)
}
