//! 2-D fast Fourier transform with fixed conventions: forward is
//! unnormalized, inverse carries the full 1/(H*W) factor, so
//! `ifft2(fft2(x)) = x`.
//!
//! Power-of-two lengths use an iterative radix-2 kernel; every other length
//! goes through Bluestein's chirp-z embedding into a power-of-two circular
//! convolution, so any extent >= 1 is supported. Twiddle/chirp tables are
//! cached per length in a process-wide plan cache.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::{ComplexTensor, Tensor};

/// Forward 2-D transform. Accepts H x W or C x H x W (independent planes).
pub fn fft2(x: &Tensor) -> ComplexTensor {
    let (c, h, w) = plane_dims(x.shape());
    let mut out = ComplexTensor::from_real(x);
    for ch in 0..c {
        let plane = ch * h * w;
        fft2_raw(
            &mut out.re[plane..plane + h * w],
            &mut out.im[plane..plane + h * w],
            h,
            w,
            false,
        );
    }
    out
}

/// Inverse 2-D transform, real part. The imaginary residue of transforms of
/// real data is discarded; use `ifft2_complex` when it matters.
pub fn ifft2(x: &ComplexTensor) -> Tensor {
    let full = ifft2_complex(x);
    Tensor::new(full.shape, full.re).expect("shape preserved by transform")
}

pub fn ifft2_complex(x: &ComplexTensor) -> ComplexTensor {
    let (c, h, w) = plane_dims(&x.shape);
    let mut out = x.clone();
    for ch in 0..c {
        let plane = ch * h * w;
        fft2_raw(
            &mut out.re[plane..plane + h * w],
            &mut out.im[plane..plane + h * w],
            h,
            w,
            true,
        );
    }
    out
}

/// Reorder one H x W plane so the DC bin lands at `(h/2, w/2)`.
pub fn fftshift_plane(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = src[y * w + x];
        }
    }
    out
}

fn plane_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => panic!("fft2 expects rank-2 or rank-3, got {shape:?}"),
    }
}

/// In-place 2-D transform of one H x W plane: rows, then columns.
pub fn fft2_raw(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(re.len(), h * w);
    let row_plan = plan(w);
    for y in 0..h {
        let r = y * w;
        transform(&row_plan, &mut re[r..r + w], &mut im[r..r + w], inverse);
    }
    let col_plan = plan(h);
    let mut cre = vec![0.0; h];
    let mut cim = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            cre[y] = re[y * w + x];
            cim[y] = im[y * w + x];
        }
        transform(&col_plan, &mut cre, &mut cim, inverse);
        for y in 0..h {
            re[y * w + x] = cre[y];
            im[y * w + x] = cim[y];
        }
    }
}

/// In-place 1-D transform of one length-n signal.
pub fn fft_raw(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let p = plan(re.len());
    transform(&p, re, im, inverse);
}

enum PlanKind {
    /// Radix-2: bit-reversal table and half-length twiddles e^{-2pi i j/n}.
    Pow2 { rev: Vec<u32>, tw_re: Vec<f64>, tw_im: Vec<f64> },
    /// Bluestein: chirp c[m] = e^{-i pi m^2 / n} and the FFT of the wrapped
    /// conjugate-chirp kernel at the embedding length m_len (power of two).
    Bluestein {
        m_len: usize,
        chirp_re: Vec<f64>,
        chirp_im: Vec<f64>,
        kern_re: Vec<f64>,
        kern_im: Vec<f64>,
    },
}

struct Plan {
    n: usize,
    kind: PlanKind,
}

fn plan_cache() -> &'static Mutex<HashMap<usize, Arc<Plan>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Plan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn plan(n: usize) -> Arc<Plan> {
    if let Some(p) = plan_cache().lock().unwrap().get(&n) {
        return p.clone();
    }
    let built = Arc::new(build_plan(n));
    plan_cache().lock().unwrap().entry(n).or_insert(built).clone()
}

fn build_plan(n: usize) -> Plan {
    assert!(n >= 1, "transform length must be >= 1");
    if n.is_power_of_two() {
        let bits = n.trailing_zeros();
        let rev = (0..n as u32).map(|i| i.reverse_bits() >> (32 - bits.max(1))).collect::<Vec<_>>();
        let rev = if n == 1 { vec![0] } else { rev };
        let mut tw_re = Vec::with_capacity(n / 2);
        let mut tw_im = Vec::with_capacity(n / 2);
        for j in 0..n / 2 {
            let a = -std::f64::consts::TAU * j as f64 / n as f64;
            tw_re.push(a.cos());
            tw_im.push(a.sin());
        }
        Plan { n, kind: PlanKind::Pow2 { rev, tw_re, tw_im } }
    } else {
        let m_len = (2 * n - 1).next_power_of_two();
        // Chirp argument uses m^2 mod 2n: exact and bounded for any n here.
        let mut chirp_re = Vec::with_capacity(n);
        let mut chirp_im = Vec::with_capacity(n);
        for m in 0..n as u64 {
            let sq = (m * m) % (2 * n as u64);
            let a = -std::f64::consts::PI * sq as f64 / n as f64;
            chirp_re.push(a.cos());
            chirp_im.push(a.sin());
        }
        // Kernel h[m] = conj(chirp[|m|]) wrapped into the circular buffer.
        let mut kern_re = vec![0.0; m_len];
        let mut kern_im = vec![0.0; m_len];
        for m in 0..n {
            kern_re[m] = chirp_re[m];
            kern_im[m] = -chirp_im[m];
            if m > 0 {
                kern_re[m_len - m] = chirp_re[m];
                kern_im[m_len - m] = -chirp_im[m];
            }
        }
        let inner = plan(m_len);
        transform(&inner, &mut kern_re, &mut kern_im, false);
        Plan {
            n,
            kind: PlanKind::Bluestein { m_len, chirp_re, chirp_im, kern_re, kern_im },
        }
    }
}

fn transform(p: &Plan, re: &mut [f64], im: &mut [f64], inverse: bool) {
    debug_assert_eq!(re.len(), p.n);
    if p.n == 1 {
        return;
    }
    if inverse {
        // IFFT(x) = conj(FFT(conj(x))) / n
        for v in im.iter_mut() {
            *v = -*v;
        }
        forward(p, re, im);
        let inv = 1.0 / p.n as f64;
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            *r *= inv;
            *i = -*i * inv;
        }
    } else {
        forward(p, re, im);
    }
}

fn forward(p: &Plan, re: &mut [f64], im: &mut [f64]) {
    match &p.kind {
        PlanKind::Pow2 { rev, tw_re, tw_im } => {
            let n = p.n;
            for i in 0..n {
                let j = rev[i] as usize;
                if i < j {
                    re.swap(i, j);
                    im.swap(i, j);
                }
            }
            let mut len = 2;
            while len <= n {
                let stride = n / len;
                let half = len / 2;
                for base in (0..n).step_by(len) {
                    for k in 0..half {
                        let (wr, wi) = (tw_re[k * stride], tw_im[k * stride]);
                        let (i0, i1) = (base + k, base + k + half);
                        let tr = re[i1] * wr - im[i1] * wi;
                        let ti = re[i1] * wi + im[i1] * wr;
                        re[i1] = re[i0] - tr;
                        im[i1] = im[i0] - ti;
                        re[i0] += tr;
                        im[i0] += ti;
                    }
                }
                len *= 2;
            }
        }
        PlanKind::Bluestein { m_len, chirp_re, chirp_im, kern_re, kern_im } => {
            let n = p.n;
            let mut are = vec![0.0; *m_len];
            let mut aim = vec![0.0; *m_len];
            for j in 0..n {
                // a[j] = x[j] * chirp[j]
                are[j] = re[j] * chirp_re[j] - im[j] * chirp_im[j];
                aim[j] = re[j] * chirp_im[j] + im[j] * chirp_re[j];
            }
            let inner = plan(*m_len);
            forward(&inner, &mut are, &mut aim);
            for i in 0..*m_len {
                let (r, im_) = (are[i], aim[i]);
                are[i] = r * kern_re[i] - im_ * kern_im[i];
                aim[i] = r * kern_im[i] + im_ * kern_re[i];
            }
            // Inverse of the embedding transform via the conjugation identity.
            for v in aim.iter_mut() {
                *v = -*v;
            }
            forward(&inner, &mut are, &mut aim);
            let inv = 1.0 / *m_len as f64;
            for k in 0..n {
                let (r, i) = (are[k] * inv, -aim[k] * inv);
                // X[k] = chirp[k] * conv[k]
                re[k] = r * chirp_re[k] - i * chirp_im[k];
                im[k] = r * chirp_im[k] + i * chirp_re[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn direct_dft_1d(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let mut or = vec![0.0; n];
        let mut oi = vec![0.0; n];
        for k in 0..n {
            for j in 0..n {
                let a = -std::f64::consts::TAU * (k * j) as f64 / n as f64;
                or[k] += re[j] * a.cos() - im[j] * a.sin();
                oi[k] += re[j] * a.sin() + im[j] * a.cos();
            }
        }
        (or, oi)
    }

    #[test]
    fn matches_direct_dft_for_mixed_lengths() {
        let mut rng = Rng::new(11);
        for n in [1usize, 2, 3, 4, 5, 7, 8, 12, 13, 16, 17, 31, 32, 45, 64] {
            let re: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let im: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let (er, ei) = direct_dft_1d(&re, &im);
            let mut ar = re.clone();
            let mut ai = im.clone();
            fft_raw(&mut ar, &mut ai, false);
            for k in 0..n {
                assert!(
                    (ar[k] - er[k]).abs() < 1e-9 && (ai[k] - ei[k]).abs() < 1e-9,
                    "n={n} k={k}: got ({},{}), want ({},{})",
                    ar[k],
                    ai[k],
                    er[k],
                    ei[k]
                );
            }
        }
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let (m, n, c) = (6, 10, 0.37);
        let t = Tensor::full(&[m, n], c);
        let f = fft2(&t);
        assert!((f.re[0] - c * (m * n) as f64).abs() < 1e-9);
        assert!(f.im[0].abs() < 1e-9);
        for i in 1..f.numel() {
            assert!(f.re[i].abs() < 1e-9 && f.im[i].abs() < 1e-9, "bin {i} nonzero");
        }
    }

    #[test]
    fn roundtrip_on_random_7x5() {
        let mut rng = Rng::new(21);
        let t = Tensor::new(vec![7, 5], (0..35).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let back = ifft2(&fft2(&t));
        let max_err = t
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "max err {max_err}");
    }

    #[test]
    fn roundtrip_over_all_sizes_up_to_64() {
        let mut rng = Rng::new(31);
        for h in 1..=64usize {
            for w in 1..=64usize {
                let t = Tensor::new(
                    vec![h, w],
                    (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                )
                .unwrap();
                let back = ifft2(&fft2(&t));
                for (a, b) in t.data().iter().zip(back.data()) {
                    assert!((a - b).abs() < 1e-9, "roundtrip failed at {h}x{w}");
                }
            }
        }
    }

    #[test]
    fn parseval_identity_holds() {
        let mut rng = Rng::new(41);
        let t = Tensor::new(vec![8, 8], (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let f = fft2(&t);
        let spatial: f64 = t.data().iter().map(|v| v * v).sum();
        let spectral: f64 =
            f.re.iter().zip(&f.im).map(|(&a, &b)| a * a + b * b).sum::<f64>() / 64.0;
        assert!(((spatial - spectral) / spatial).abs() < 1e-10);
    }

    #[test]
    fn rank3_transforms_planes_independently() {
        let mut rng = Rng::new(51);
        let a = Tensor::new(vec![4, 6], (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let b = Tensor::new(vec![4, 6], (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let s = Tensor::new(vec![2, 4, 6], stacked).unwrap();
        let fs = fft2(&s);
        let fa = fft2(&a);
        for i in 0..24 {
            assert!((fs.re[i] - fa.re[i]).abs() < 1e-12);
            assert!((fs.im[i] - fa.im[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn linearity_of_forward_transform() {
        let mut rng = Rng::new(61);
        let x = Tensor::new(vec![5, 9], (0..45).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let y = Tensor::new(vec![5, 9], (0..45).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let sum = Tensor::new(
            vec![5, 9],
            x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * a + b).collect(),
        )
        .unwrap();
        let (fx, fy, fs) = (fft2(&x), fft2(&y), fft2(&sum));
        for i in 0..45 {
            assert!((fs.re[i] - (2.0 * fx.re[i] + fy.re[i])).abs() < 1e-9);
            assert!((fs.im[i] - (2.0 * fx.im[i] + fy.im[i])).abs() < 1e-9);
        }
    }
}
