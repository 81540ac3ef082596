//! Path loss, arrival/departure angles, steering vectors and array responses.
//!
//! Angles follow one convention for every link: for the direction `d` from one
//! node to another, `azimuth = atan2(d_y, d_x)` and `elevation = asin(d_z / |d|)`,
//! so `cos(az) cos(el)`, `sin(az) cos(el)` and `sin(el)` are the components of
//! the unit direction vector.

use ndarray::Array1;

use crate::prelude::*;
use crate::scenario::Point3;
use crate::{CVector, Error, Result, C64};

use core::f64::consts::PI;

/// Direct BS-user path loss in dB.
pub fn pathloss_direct_db(d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::domain(format!("distance must be positive, got {d}")));
    }
    Ok(32.6 + 36.7 * d.log10())
}

/// Path loss of the BS-IRS and IRS-user links in dB.
pub fn pathloss_irs_db(d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::domain(format!("distance must be positive, got {d}")));
    }
    Ok(30.0 + 22.0 * d.log10())
}

/// Amplitude factor of a path loss: `|beta|^2` is the linear power gain.
pub fn db_to_amplitude(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 20.0)
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dz = b[2] - a[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// `(azimuth, elevation)` of the direction from `from` to `to`.
pub fn angles_between(from: &Point3, to: &Point3) -> Result<(f64, f64)> {
    let d = distance(from, to);
    if !(d > 0.0) {
        return Err(Error::domain("angles between coincident points"));
    }
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    let dz = to[2] - from[2];
    let elevation = (dz / d).clamp(-1.0, 1.0).asin();
    let azimuth = dy.atan2(dx);
    Ok((azimuth, elevation))
}

/// Unit direction vector for `(azimuth, elevation)`.
pub fn direction_from_angles(azimuth: f64, elevation: f64) -> Point3 {
    [
        azimuth.cos() * elevation.cos(),
        azimuth.sin() * elevation.cos(),
        elevation.sin(),
    ]
}

fn unit_phase(phase: f64) -> C64 {
    C64::new(phase.cos(), phase.sin())
}

/// Steering vector of a half-wavelength `rows x cols` planar IRS in the y-z plane.
///
/// Element `n` sits at horizontal index `n % cols` and vertical index `n / cols`.
pub fn steering_irs(azimuth: f64, elevation: f64, rows: usize, cols: usize) -> CVector {
    let horizontal = azimuth.sin() * elevation.cos();
    let vertical = elevation.sin();
    Array1::from_shape_fn(rows * cols, |n| {
        let i1 = (n % cols) as f64;
        let i2 = (n / cols) as f64;
        unit_phase(PI * (i1 * horizontal + i2 * vertical))
    })
}

/// Steering vector of a half-wavelength uniform linear BS array along the x axis.
pub fn steering_bs(azimuth: f64, elevation: f64, antennas: usize) -> CVector {
    let along = azimuth.cos() * elevation.cos();
    Array1::from_shape_fn(antennas, |m| unit_phase(PI * m as f64 * along))
}

/// Element-wise `a_IRS(phi3, theta3) * conj(a_IRS(phi2, theta2))`.
///
/// For a reflection vector `v`, `sum_n a~_n v_n` is the gain of the IRS from the
/// incident direction `(phi3, theta3)` towards `(phi2, theta2)`.
pub fn irs_pair_steering(az_out: f64, el_out: f64, az_in: f64, el_in: f64, rows: usize, cols: usize) -> CVector {
    let horizontal = az_in.sin() * el_in.cos() - az_out.sin() * el_out.cos();
    let vertical = el_in.sin() - el_out.sin();
    Array1::from_shape_fn(rows * cols, |n| {
        let i1 = (n % cols) as f64;
        let i2 = (n / cols) as f64;
        unit_phase(PI * (i1 * horizontal + i2 * vertical))
    })
}

/// IRS array response `|a_IRS(phi2, theta2)^H diag(v) a_IRS(phi3, theta3)|`.
///
/// `v` must have unit-modulus entries. The maximum value is `N`.
#[allow(clippy::too_many_arguments)]
pub fn array_response_irs(
    v: &CVector,
    az_out: f64,
    el_out: f64,
    az_in: f64,
    el_in: f64,
    rows: usize,
    cols: usize,
) -> Result<f64> {
    if v.len() != rows * cols {
        return Err(Error::shape(format!(
            "reflection vector of length {} for a {rows}x{cols} IRS",
            v.len()
        )));
    }
    if let Some(z) = v.iter().find(|z| (z.norm() - 1.0).abs() > 1e-6) {
        return Err(Error::domain(format!("reflection coefficient {z} is not unit modulus")));
    }
    let pair = irs_pair_steering(az_out, el_out, az_in, el_in, rows, cols);
    Ok(pair.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<C64>().norm())
}

/// Transmit array response `|a_BS(phi1, theta1)^T w|` of a BS beamformer.
pub fn array_response_bs(w: &CVector, azimuth: f64, elevation: f64) -> f64 {
    let a = steering_bs(azimuth, elevation, w.len());
    a.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<C64>().norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{complex_gaussian, random_phase, substream, Purpose};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn direct_pathloss_values() {
        assert!(close(pathloss_direct_db(1.0).unwrap(), 32.6, 1e-12));
        assert!(close(pathloss_direct_db(10.0).unwrap(), 69.3, 1e-12));
        assert!(close(pathloss_direct_db(100.0).unwrap(), 106.0, 1e-12));
        assert!(matches!(pathloss_direct_db(0.0), Err(Error::Domain(_))));
        assert!(pathloss_direct_db(-3.0).is_err());
    }

    #[test]
    fn irs_pathloss_values() {
        assert!(close(pathloss_irs_db(1.0).unwrap(), 30.0, 1e-12));
        assert!(close(pathloss_irs_db(10.0).unwrap(), 52.0, 1e-12));
        // 30 + 22 log10(141.42), the BS-IRS distance of the reference layout
        assert!(close(pathloss_irs_db(141.42).unwrap(), 77.311_238, 1e-5));
        assert!(pathloss_irs_db(f64::NAN).is_err());
    }

    #[test]
    fn amplitude_matches_power_gain() {
        let beta = db_to_amplitude(30.0);
        assert!(close(beta * beta, 1e-3, 1e-15));
    }

    #[test]
    fn reference_angles() {
        let (az, el) = angles_between(&[100.0, -100.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!(close(az, 2.356, 5e-4) && close(el, 0.0, 1e-12));
        let (az, el) = angles_between(&[0.0, 0.0, 0.0], &[100.0, -100.0, 0.0]).unwrap();
        assert!(close(az, -0.785, 5e-4) && close(el, 0.0, 1e-12));
        let (az, el) = angles_between(&[0.0, 0.0, 0.0], &[30.0, 20.0, -20.0]).unwrap();
        assert!(close(az, 0.588, 5e-4) && close(el, -0.506, 5e-4));
        let (az, el) = angles_between(&[0.0, 0.0, 0.0], &[5.0, -12.0, -20.0]).unwrap();
        assert!(close(az, -1.176, 5e-4) && close(el, -0.994, 5e-4));
        // asin(-20 / sqrt(425)); the azimuth is zero on the x axis
        let (az, el) = angles_between(&[0.0, 0.0, 0.0], &[5.0, 0.0, -20.0]).unwrap();
        assert!(close(az, 0.0, 1e-12) && close(el, -1.325_818, 1e-6));
        assert!(matches!(
            angles_between(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn steering_vector_examples() {
        let a = steering_irs(0.0, 0.0, 3, 4);
        assert!(a.iter().all(|z| close(z.re, 1.0, 1e-15) && close(z.im, 0.0, 1e-15)));
        let a = steering_irs(PI / 2.0, 0.0, 1, 2);
        assert!(close(a[0].re, 1.0, 1e-15) && close(a[1].re, -1.0, 1e-12) && close(a[1].im, 0.0, 1e-12));
        let b = steering_bs(PI / 2.0, 0.0, 4);
        assert!(b.iter().all(|z| close(z.re, 1.0, 1e-12) && close(z.im, 0.0, 1e-12)));
        let b = steering_bs(0.0, 0.0, 2);
        assert!(close(b[1].re, -1.0, 1e-12) && close(b[1].im, 0.0, 1e-12));
    }

    #[test]
    fn irs_response_examples() {
        let (rows, cols) = (5, 10);
        let (a2, e2, a3, e3) = (-0.785, 0.0, 0.588, -0.506);
        // configuring the conjugate of the pair steering vector focuses fully
        let v = irs_pair_steering(a2, e2, a3, e3, rows, cols).mapv(|z| z.conj());
        let r = array_response_irs(&v, a2, e2, a3, e3, rows, cols).unwrap();
        assert!(close(r, 50.0, 1e-10));
        let ones = CVector::from_elem(rows * cols, C64::new(1.0, 0.0));
        let r = array_response_irs(&ones, 0.3, -0.2, 0.3, -0.2, rows, cols).unwrap();
        assert!(close(r, 50.0, 1e-10));

        let mut rng = substream(3, Purpose::Test, 0);
        let v = CVector::from_shape_fn(rows * cols, |_| random_phase(&mut rng));
        let mut brute = C64::new(0.0, 0.0);
        for n in 0..rows * cols {
            let i1 = (n % cols) as f64;
            let i2 = (n / cols) as f64;
            let phase = PI * (i1 * (a3.sin() * e3.cos() - a2.sin() * e2.cos()) + i2 * (e3.sin() - e2.sin()));
            brute += C64::from_polar(1.0, phase) * v[n];
        }
        let r = array_response_irs(&v, a2, e2, a3, e3, rows, cols).unwrap();
        assert!(close(r, brute.norm(), 1e-10));

        let bad = CVector::from_elem(rows * cols, C64::new(0.5, 0.0));
        assert!(matches!(
            array_response_irs(&bad, a2, e2, a3, e3, rows, cols),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bs_response_examples() {
        let (az, el) = (2.356, 0.0);
        let a = steering_bs(az, el, 8);
        let matched = a.mapv(|z| z.conj());
        assert!(close(array_response_bs(&matched, az, el), 8.0, 1e-10));
        // w orthogonal to conj(a): the second DFT direction relative to a
        let m = 8;
        let orth = CVector::from_shape_fn(m, |i| matched[i] * C64::from_polar(1.0, 2.0 * PI * i as f64 / m as f64));
        assert!(array_response_bs(&orth, az, el) < 1e-10);
        let mut rng = substream(4, Purpose::Test, 0);
        let w = CVector::from_shape_fn(m, |_| complex_gaussian(&mut rng));
        let brute: C64 = (0..m)
            .map(|i| C64::from_polar(1.0, PI * i as f64 * az.cos() * el.cos()) * w[i])
            .sum();
        assert!(close(array_response_bs(&w, az, el), brute.norm(), 1e-10));
    }

    proptest! {
        #[test]
        fn steering_entries_have_unit_modulus(az in -PI..PI, el in -PI / 2.0..PI / 2.0, m in 1usize..20) {
            for z in steering_irs(az, el, 3, 7).iter().chain(steering_bs(az, el, m).iter()) {
                prop_assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn angles_reconstruct_direction(
            x in -50.0f64..50.0, y in -50.0f64..50.0, z in -50.0f64..50.0,
        ) {
            let to = [x, y, z];
            prop_assume!(distance(&[0.0; 3], &to) > 1e-3);
            let (az, el) = angles_between(&[0.0; 3], &to).unwrap();
            let dir = direction_from_angles(az, el);
            let d = distance(&[0.0; 3], &to);
            for i in 0..3 {
                prop_assert!((dir[i] - to[i] / d).abs() < 1e-10);
            }
        }

        #[test]
        fn irs_response_ignores_global_phase(seed in 0u64..1000, rot in -PI..PI) {
            let mut rng = substream(seed, Purpose::Test, 1);
            let v = CVector::from_shape_fn(20, |_| random_phase(&mut rng));
            let rotated = v.mapv(|z| z * C64::from_polar(1.0, rot));
            let a = array_response_irs(&v, 0.2, 0.1, -0.4, -0.6, 2, 10).unwrap();
            let b = array_response_irs(&rotated, 0.2, 0.1, -0.4, -0.6, 2, 10).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
