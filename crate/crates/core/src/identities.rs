//! Algebraic identity and symmetry checks on random clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::forces::{coords_of, dn_du, dtau_force, force, force_hellmann_feynman, gather, grad_helmholtz};
use crate::hamiltonian::{assemble, Geometry};
use crate::model::{ModelParams, QoIKind};
use crate::observables::{helmholtz_energy, local_qoi_all, System};
use crate::spectral::{eig_sym, local_qoi_contour, trace_qoi_contour, Contour};
use crate::{add, Vec3};

/// Outcome of one check: `value <= tolerance` passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.to_string(), value, tolerance, pass: value <= tolerance }
    }
}

/// Perturbed chain (`dim = 1`) or triangular patch (`dim = 2`) with `n` sites,
/// displacements uniform in `[-0.1, 0.1]` per in-plane component.
pub fn random_cluster(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Vec<Vec3> {
    let width = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|k| {
            let base = if dim == 1 {
                [k as f64, 0.0, 0.0]
            } else {
                let (i, j) = ((k % width) as f64, (k / width) as f64);
                [i + 0.5 * j, j * 3f64.sqrt() / 2.0, 0.0]
            };
            let mut p = base;
            for c in p.iter_mut().take(dim) {
                *c += rng.gen_range(-0.1..0.1);
            }
            p
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Worst-case value of each identity over `samples` random clusters of 10 to
/// 20 sites in one and two dimensions.
pub fn identity_suite(params: &ModelParams, samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 7];
    for k in 0..samples {
        let dim = 1 + k % 2;
        let n = rng.gen_range(10..=20);
        let pos = random_cluster(&mut rng, dim, n);
        let geom = Geometry::open(pos.clone());
        let sys = System::new(geom, *params)?;
        let tau = rng.gen_range(-0.5..0.5) + sys.solve_mu(n as f64)?.mu;
        let lam = &sys.spec.eigenvalues;

        // e = tau n + g per eigenvalue
        for &x in lam {
            let e = params.kernel(QoIKind::Helmholtz, x, tau);
            worst[0] = worst[0].max((e - params.helmholtz_kernel_split(x, tau)).abs() / e.abs().max(1.0));
        }
        // d g / dx = 2 f against central differences
        for &x in lam {
            let h = 1e-5;
            let fd = (params.kernel(QoIKind::Grand, x + h, tau) - params.kernel(QoIKind::Grand, x - h, tau)) / (2.0 * h);
            worst[1] = worst[1].max((fd - params.kernel_dx(QoIKind::Grand, x, tau)).abs() / fd.abs().max(1e-3));
        }
        // contour against eigen-sums, total and one local value
        let h = assemble(&sys.geom, params)?;
        let contour = Contour::enclosing(&h, params.beta);
        for kind in QoIKind::ALL {
            let exact = sys.total_qoi(kind, tau);
            let c = trace_qoi_contour(&h, params, kind, tau, &contour)?;
            worst[2] = worst[2].max((c - exact).abs() / exact.abs().max(1.0));
            let site = rng.gen_range(0..n);
            let exact = sys.local_qoi(site, kind, tau)?;
            let c = local_qoi_contour(&h, site, params, kind, tau, &contour)?;
            worst[2] = worst[2].max((c - exact).abs() / exact.abs().max(1.0));
        }
        // sum of local parts equals the total
        for kind in QoIKind::ALL {
            let total = sys.total_qoi(kind, tau);
            let sum: f64 = local_qoi_all(&sys.spec, params, kind, tau).iter().sum();
            worst[3] = worst[3].max(rel(sum, total).min((sum - total).abs()));
        }
        // Hellmann-Feynman force against differences of G at fixed tau
        let axes: Vec<usize> = (0..dim).collect();
        let coords = coords_of(&(0..n).collect::<Vec<_>>(), &axes);
        let hf = force_hellmann_feynman(&sys, tau, &coords);
        let fd: Vec<f64> = coords
            .iter()
            .map(|&(m, a)| {
                let g = |s: f64| -> Result<f64> {
                    let mut p = pos.clone();
                    p[m][a] += s;
                    Ok(System::new(Geometry::open(p), *params)?.total_qoi(QoIKind::Grand, tau))
                };
                Ok(-(g(1e-5)? - g(-1e-5)?) / 2e-5)
            })
            .collect::<Result<_>>()?;
        worst[4] = worst[4].max(max_rel(&hf, &fd));
        // canonical force against differences of E with mu re-solved
        let ne = n as f64;
        let (gh, _) = grad_helmholtz(&sys, ne)?;
        let gh = gather(&gh, &coords);
        let fd: Vec<f64> = coords
            .iter()
            .map(|&(m, a)| {
                let e = |s: f64| -> Result<f64> {
                    let mut p = pos.clone();
                    p[m][a] += s;
                    let spec = eig_sym(&assemble(&Geometry::open(p), params)?)?;
                    Ok(helmholtz_energy(&spec, params, ne)?.0)
                };
                Ok(-(e(1e-5)? - e(-1e-5)?) / 2e-5)
            })
            .collect::<Result<_>>()?;
        worst[5] = worst[5].max(max_rel(&gh, &fd));
        // d F / d tau = d N / d u
        let a = gather(&dtau_force(&sys, tau), &coords);
        let b = dn_du(&sys, tau, &coords);
        worst[6] = worst[6].max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        debug_assert_eq!(force(&sys, tau).len(), n);
    }
    Ok(vec![
        Check::new("helmholtz_kernel_split", worst[0], 1e-12),
        Check::new("grand_kernel_derivative", worst[1], 1e-6),
        Check::new("contour_vs_eigensum", worst[2], 1e-8),
        Check::new("local_sum_equals_total", worst[3], 1e-11),
        Check::new("hellmann_feynman_vs_fd", worst[4], 1e-6),
        Check::new("grad_helmholtz_vs_fd", worst[5], 1e-5),
        Check::new("dtau_force_equals_du_count", worst[6], 1e-8),
    ])
}

/// Largest change of any local quantity under random isometries and
/// permutations of random clusters, relative to `max(1, |A_l|)`.
pub fn invariance_suite(params: &ModelParams, samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iso = 0.0f64;
    let mut perm = 0.0f64;
    for k in 0..samples {
        let dim = 1 + k % 2;
        let n = rng.gen_range(10..=20);
        let pos = random_cluster(&mut rng, dim, n);
        let sys = System::new(Geometry::open(pos.clone()), *params)?;
        let tau = sys.solve_mu(n as f64)?.mu;
        let base: Vec<Vec<f64>> = QoIKind::ALL.iter().map(|&q| local_qoi_all(&sys.spec, params, q, tau)).collect();

        let rot = random_rotation(&mut rng);
        let shift = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let moved: Vec<Vec3> = pos.iter().map(|p| add(&apply(&rot, p), &shift)).collect();
        let s2 = System::new(Geometry::open(moved), *params)?;
        for (q, b) in QoIKind::ALL.iter().zip(&base) {
            let v = local_qoi_all(&s2.spec, params, *q, tau);
            iso = iso.max(v.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max));
        }

        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<Vec3> = order.iter().map(|&i| pos[i]).collect();
        let s3 = System::new(Geometry::open(permuted), *params)?;
        for (q, b) in QoIKind::ALL.iter().zip(&base) {
            let v = local_qoi_all(&s3.spec, params, *q, tau);
            perm = perm.max(order.iter().enumerate().map(|(k, &i)| (v[k] - b[i]).abs() / b[i].abs().max(1.0)).fold(0.0, f64::max));
        }
    }
    Ok(vec![Check::new("isometry_invariance", iso, 1e-10), Check::new("permutation_invariance", perm, 1e-10)])
}

/// Uniformly random rotation from a normalised random quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for c in q.iter_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }
        let n2: f64 = q.iter().map(|c| c * c).sum();
        if n2 > 1e-3 && n2 <= 1.0 {
            let n = n2.sqrt();
            q.iter_mut().for_each(|c| *c /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn apply(r: &[[f64; 3]; 3], p: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_hold_on_random_clusters() {
        for c in identity_suite(&ModelParams::default(), 4, 7).unwrap() {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn flipped_count_sign_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = random_cluster(&mut rng, 2, 12);
        let sys = System::new(Geometry::open(pos), ModelParams::default()).unwrap();
        let coords = coords_of(&(0..12).collect::<Vec<_>>(), &[0, 1]);
        let a = gather(&dtau_force(&sys, 0.1), &coords);
        let b = dn_du(&sys, 0.1, &coords);
        let flipped = a.iter().zip(&b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
        assert!(flipped > 1e-3);
    }

    #[test]
    fn symmetries_hold() {
        for c in invariance_suite(&ModelParams::default(), 4, 11).unwrap() {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn rotations_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_rotation(&mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }
}
