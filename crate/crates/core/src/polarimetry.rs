//! Linear polarimetry on four-angle captures.
//!
//! A [`PolarizedQuad`] holds the images seen through a linear polarizer at
//! 0°, 45°, 90° and 135°. From it we derive the linear Stokes parameters,
//! degree and angle of polarization, and the split into angle-dependent and
//! angle-invariant parts. [`synthesize_quad`] is the forward model (Malus's
//! law) and is used as the ground-truth generator by the synthetic data path.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Polarizer orientations of the four planes, in degrees.
pub const ANGLES_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

/// Guard used in the DoP denominator.
pub const DOP_EPS: f64 = 1e-8;

/// Tolerance of the `i0 + i90 == i45 + i135` consistency check.
pub const CONSISTENCY_TOL: f64 = 1e-6;

/// Four co-registered captures at polarizer angles 0°, 45°, 90° and 135°.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarizedQuad<T> {
    planes: [Image<T>; 4],
}

impl<T: Scalar> PolarizedQuad<T> {
    /// Builds a quad, checking shared dimensions and finite, non-negative
    /// pixels.
    pub fn new(i0: Image<T>, i45: Image<T>, i90: Image<T>, i135: Image<T>) -> Result<Self> {
        Self::from_planes([i0, i45, i90, i135])
    }

    pub fn from_planes(planes: [Image<T>; 4]) -> Result<Self> {
        let dims = planes[0].dims();
        for (k, p) in planes.iter().enumerate() {
            if p.dims() != dims {
                return Err(Error::Validation(format!(
                    "quad plane {}° is {}x{}, expected {}x{}",
                    ANGLES_DEG[k],
                    p.height(),
                    p.width(),
                    dims.0,
                    dims.1
                )));
            }
            if let Some(i) = p.data().iter().position(|v| !v.is_finite() || *v < T::zero()) {
                return Err(Error::Validation(format!(
                    "quad plane {}° has invalid value {} at pixel ({}, {})",
                    ANGLES_DEG[k],
                    p.data()[i],
                    i / dims.1,
                    i % dims.1
                )));
            }
        }
        Ok(Self { planes })
    }

    /// Builds a quad without the non-negativity check. Used for signed
    /// components such as the polarized part of a decomposition.
    pub(crate) fn from_planes_unchecked(planes: [Image<T>; 4]) -> Self {
        Self { planes }
    }

    pub fn filled(height: usize, width: usize, values: [T; 4]) -> Self {
        Self {
            planes: values.map(|v| Image::filled(height, width, v)),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [T::zero(); 4])
    }

    pub fn i0(&self) -> &Image<T> {
        &self.planes[0]
    }

    pub fn i45(&self) -> &Image<T> {
        &self.planes[1]
    }

    pub fn i90(&self) -> &Image<T> {
        &self.planes[2]
    }

    pub fn i135(&self) -> &Image<T> {
        &self.planes[3]
    }

    pub fn planes(&self) -> &[Image<T>; 4] {
        &self.planes
    }

    pub fn into_planes(self) -> [Image<T>; 4] {
        self.planes
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    /// Per-angle sum, the mixing model `I = T + R`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = Vec::with_capacity(4);
        for (a, b) in self.planes.iter().zip(&other.planes) {
            out.push(a.zip_map(b, |x, y| x + y)?);
        }
        Ok(Self {
            planes: vec_to_array(out),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            planes: [
                self.planes[0].map(&f),
                self.planes[1].map(&f),
                self.planes[2].map(&f),
                self.planes[3].map(&f),
            ],
        }
    }

    /// Largest per-pixel `|i0 + i90 - i45 - i135|`.
    pub fn consistency_residual(&self) -> T {
        let [a, b, c, d] = &self.planes;
        let mut worst = T::zero();
        for i in 0..a.len() {
            let r = (a.data()[i] + c.data()[i] - b.data()[i] - d.data()[i]).abs();
            worst = worst.max(r);
        }
        worst
    }

    /// Checks `i0 + i90 == i45 + i135` per pixel, reporting how many pixels
    /// fail and where the worst one is.
    pub fn check_physical(&self, tol: T) -> Result<()> {
        let [a, b, c, d] = &self.planes;
        let w = a.width();
        let mut bad = 0usize;
        let mut worst = (T::zero(), 0usize);
        for i in 0..a.len() {
            let r = (a.data()[i] + c.data()[i] - b.data()[i] - d.data()[i]).abs();
            if r > tol {
                bad += 1;
                if r > worst.0 {
                    worst = (r, i);
                }
            }
        }
        if bad > 0 {
            return Err(Error::Validation(format!(
                "physically inconsistent quad: {bad} of {} pixels have |i0+i90-i45-i135| > {tol}; \
                 worst residual {} at pixel ({}, {})",
                a.len(),
                worst.0,
                worst.1 / w,
                worst.1 % w
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PolarizedQuad<U> {
        PolarizedQuad {
            planes: [
                self.planes[0].cast(),
                self.planes[1].cast(),
                self.planes[2].cast(),
                self.planes[3].cast(),
            ],
        }
    }
}

pub(crate) fn vec_to_array<X>(v: Vec<X>) -> [X; 4] {
    match v.try_into() {
        Ok(a) => a,
        Err(_) => unreachable!("expected exactly four planes"),
    }
}

/// Linear Stokes parameters per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct StokesImage<T> {
    pub s0: Image<T>,
    pub s1: Image<T>,
    pub s2: Image<T>,
}

impl<T: Scalar> StokesImage<T> {
    pub fn new(s0: Image<T>, s1: Image<T>, s2: Image<T>) -> Result<Self> {
        s0.check_same_dims(&s1)?;
        s0.check_same_dims(&s2)?;
        Ok(Self { s0, s1, s2 })
    }

    pub fn dop(&self) -> Image<T> {
        degree_of_polarization(self)
    }

    pub fn aop(&self) -> Image<T> {
        angle_of_polarization(self)
    }
}

/// Angle-dependent and angle-invariant parts of a quad.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarizedDecomposition<T> {
    /// Angle-dependent part per plane; may be negative.
    pub polarized: PolarizedQuad<T>,
    /// Part common to all four planes.
    pub unpolarized: Image<T>,
}

impl<T: Scalar> PolarizedDecomposition<T> {
    pub fn reconstruct(&self) -> [Image<T>; 4] {
        self.polarized.planes().clone().map(|p| {
            p.zip_map(&self.unpolarized, |a, b| a + b)
                .expect("decomposition parts share dimensions")
        })
    }
}

/// `s0 = (i0+i45+i90+i135)/2`, `s1 = i0-i90`, `s2 = i45-i135`.
pub fn compute_stokes<T: Scalar>(q: &PolarizedQuad<T>) -> StokesImage<T> {
    let [a, b, c, d] = q.planes();
    let half = T::of(0.5);
    let n = a.len();
    let (h, w) = a.dims();
    let mut s0 = Vec::with_capacity(n);
    let mut s1 = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    for i in 0..n {
        let (i0, i45, i90, i135) = (a.data()[i], b.data()[i], c.data()[i], d.data()[i]);
        s0.push((i0 + i45 + i90 + i135) * half);
        s1.push(i0 - i90);
        s2.push(i45 - i135);
    }
    StokesImage {
        s0: Image::new(h, w, s0).expect("sizes match"),
        s1: Image::new(h, w, s1).expect("sizes match"),
        s2: Image::new(h, w, s2).expect("sizes match"),
    }
}

#[inline]
pub(crate) fn dop_pixel<T: Scalar>(s0: T, s1: T, s2: T) -> T {
    let d = (s1 * s1 + s2 * s2).sqrt() / s0.max(T::of(DOP_EPS));
    d.max(T::zero()).min(T::one())
}

/// `sqrt(s1² + s2²) / max(s0, 1e-8)`, clamped to `[0, 1]`.
pub fn degree_of_polarization<T: Scalar>(s: &StokesImage<T>) -> Image<T> {
    let (h, w) = s.s0.dims();
    let data = (0..s.s0.len())
        .map(|i| dop_pixel(s.s0.data()[i], s.s1.data()[i], s.s2.data()[i]))
        .collect();
    Image::new(h, w, data).expect("sizes match")
}

#[inline]
pub(crate) fn aop_pixel<T: Scalar>(s1: T, s2: T) -> T {
    if s1 == T::zero() && s2 == T::zero() {
        return T::zero();
    }
    let a = T::of(0.5) * s2.atan2(s1);
    // atan2 returns (-π, π]; -π only arises from a negative-zero s2.
    if a <= T::of(-FRAC_PI_2) {
        a + T::of(PI)
    } else {
        a
    }
}

/// `0.5·atan2(s2, s1)` in `(-π/2, π/2]`, 0 for unpolarized pixels.
pub fn angle_of_polarization<T: Scalar>(s: &StokesImage<T>) -> Image<T> {
    s.s1.zip_map(&s.s2, aop_pixel).expect("sizes match")
}

/// Mean of the four planes, i.e. `s0 / 2`. This is the intensity image used
/// as network input and for evaluation.
pub fn intensity_average<T: Scalar>(q: &PolarizedQuad<T>) -> Image<T> {
    let [a, b, c, d] = q.planes();
    let quarter = T::of(0.25);
    let (h, w) = a.dims();
    let data = (0..a.len())
        .map(|i| (a.data()[i] + b.data()[i] + c.data()[i] + d.data()[i]) * quarter)
        .collect();
    Image::new(h, w, data).expect("sizes match")
}

/// Malus's-law forward model: `i_φ = s0/2 · (1 + dop·cos(2φ − 2·aop))`.
pub fn synthesize_quad<T: Scalar>(
    s0: &Image<T>,
    dop: &Image<T>,
    aop: &Image<T>,
) -> Result<PolarizedQuad<T>> {
    s0.check_same_dims(dop)?;
    s0.check_same_dims(aop)?;
    if let Some(i) = dop
        .data()
        .iter()
        .position(|&p| !(p >= T::zero() && p <= T::one()))
    {
        return Err(Error::Validation(format!(
            "degree of polarization {} outside [0, 1] at pixel {}",
            dop.data()[i],
            i
        )));
    }
    if let Some(i) = s0.data().iter().position(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "s0 must be finite and non-negative, got {} at pixel {i}",
            s0.data()[i]
        )));
    }
    let half = T::of(0.5);
    let two = T::of(2.0);
    let planes = ANGLES_DEG.map(|deg| {
        let phi = T::of(deg.to_radians());
        let data = (0..s0.len())
            .map(|i| {
                let v = half * s0.data()[i] * (T::one() + dop.data()[i] * (two * phi - two * aop.data()[i]).cos());
                // cos rounding can leave -1e-17 at dop = 1.
                v.max(T::zero())
            })
            .collect();
        Image::new(s0.height(), s0.width(), data).expect("sizes match")
    });
    Ok(PolarizedQuad { planes })
}

/// Splits a physically consistent quad into `unpolarized = s0/2·(1 − DoP)`
/// (shared by all angles) and the per-angle remainder.
pub fn decompose_polarized<T: Scalar>(q: &PolarizedQuad<T>) -> Result<PolarizedDecomposition<T>> {
    q.check_physical(T::of(CONSISTENCY_TOL))?;
    let stokes = compute_stokes(q);
    let half = T::of(0.5);
    let (h, w) = q.dims();
    let unpolarized_data = (0..stokes.s0.len())
        .map(|i| {
            // s0/2·(1 - DoP) written without the DoP division.
            let lin = (stokes.s1.data()[i].powi(2) + stokes.s2.data()[i].powi(2)).sqrt();
            half * (stokes.s0.data()[i] - lin).max(T::zero())
        })
        .collect();
    let unpolarized = Image::new(h, w, unpolarized_data)?;
    let polarized = q
        .planes()
        .clone()
        .map(|p| p.zip_map(&unpolarized, |a, u| a - u).expect("sizes match"));
    Ok(PolarizedDecomposition {
        polarized: PolarizedQuad::from_planes_unchecked(polarized),
        unpolarized,
    })
}
