use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use fpp::affine::{self, AffineSpec, Direction};
use fpp::eve::{self, PNorm};
use fpp::linalg;
use fpp::model::{self, Domain, GeneratorCoefficients};
use fpp::spectral::{self, Atom, SpectralMeasure};
use fpp::verify::{self, Candidate, FdOptions};
use fpp::{ModelSpec, RiskParams};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn gamma() -> impl Strategy<Value = f64> {
    prop_oneof![0.2f64..0.95, 1.05f64..6.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eve_projection_beats_random_eve_candidates(rho in matrix(3, 2), r in 0.0f64..1.0, a in -3.0f64..3.0) {
        let Ok(proj) = eve::project_eve(&rho) else { return Ok(()) };
        prop_assert!((0.0..=1.0).contains(&proj.r_star));
        let qtq = proj.q_star.transpose() * &proj.q_star;
        prop_assert!((qtq - DMatrix::identity(2, 2)).amax() < 1e-9);
        // A rotated orthonormal frame scaled by r is a feasible competitor.
        let rot = DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]);
        let cand = &proj.q_star * rot * r;
        prop_assert!(proj.frobenius_distance <= linalg::frobenius(&(&rho - cand)) + 1e-10);
    }

    #[test]
    fn p_selection_stays_in_unit_interval(mut theta in prop::collection::vec(0.0f64..2.0, 1..5)) {
        theta.sort_by(f64::total_cmp);
        for norm in [PNorm::Operator, PNorm::Frobenius, PNorm::Trace] {
            let p = eve::select_p_from_eigenvalues(&theta, norm);
            prop_assert!((0.0..=1.0).contains(&p));
            let d = norm.distance(&theta, p);
            for probe in [0.0, 0.25, 0.5, 0.75, 1.0] {
                prop_assert!(d <= norm.distance(&theta, probe) + 1e-12);
            }
        }
    }

    #[test]
    fn risk_params_identities(g in gamma(), p in 0.0f64..=1.0) {
        let rp = RiskParams::new(g, p).unwrap();
        prop_assert!((rp.big_gamma() - (1.0 - g) / g).abs() < 1e-12);
        prop_assert!((rp.q() * (1.0 + rp.big_gamma() * p) - 1.0).abs() < 1e-12);
        prop_assert!(rp.q() > 0.0);
        let back: RiskParams = serde_json::from_str(&serde_json::to_string(&rp).unwrap()).unwrap();
        prop_assert_eq!(back, rp);
    }

    #[test]
    fn riccati_closed_form_agrees_with_numeric(
        m in -3.0f64..-0.5, l in 0.05f64..0.5, lam in 0.5f64..4.0, g in gamma(), p in 0.0f64..=1.0,
        h in -0.3f64..0.3, backward in any::<bool>(),
    ) {
        let spec = AffineSpec {
            m: vec![vec![m]], w: vec![0.05], l: vec![l], lambda: vec![lam], lambda0: 0.02,
            n: vec![vec![0.0]], c: vec![0.0], h: vec![h], h0: 0.0,
        };
        let rp = RiskParams::new(g, p).unwrap();
        let dir = if backward { Direction::Backward } else { Direction::Forward };
        let Ok(cf) = affine::solve_riccati_closed_form(&spec, &rp, 1.0, dir) else { return Ok(()) };
        let nu = affine::solve_riccati_numeric(&spec, &rp, 1.0, dir).unwrap();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            prop_assert!((cf.phi(t) - nu.phi(t)).amax() < 1e-7 * (1.0 + cf.phi(t).amax()));
            prop_assert!((cf.theta(t) - nu.theta(t)).abs() < 1e-7 * (1.0 + cf.theta(t).abs()));
        }
    }

    #[test]
    fn zero_p_makes_distortion_trivial(
        a in 0.1f64..1.0, b in -0.5f64..0.5, pot in -0.5f64..0.5, g in gamma(), s in -1.0f64..1.0,
    ) {
        let rp = RiskParams::new(g, 0.0).unwrap();
        prop_assert_eq!(rp.q(), 1.0);
        let gen = GeneratorCoefficients::constant(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), pot);
        // u = exp(s y + c t) solving the linear PDE.
        let c = -(0.5 * a * s * s + b * s + pot);
        let jet = move |t: f64, y: &[f64]| {
            let u = (s * y[0] + c * t).exp();
            (u, c * u, DVector::from_element(1, s * u), DMatrix::from_element(1, 1, s * s * u))
        };
        let grid: Vec<(f64, Vec<f64>)> = (0..5).map(|i| (0.1 * i as f64, vec![-1.0 + 0.5 * i as f64])).collect();
        let rep = verify::distortion_roundtrip(Candidate::Jet(&jet), &rp, &gen, &grid, FdOptions::default()).unwrap();
        prop_assert!(rep.linear.max_abs_residual < 1e-12);
        prop_assert_eq!(rep.linear.max_abs_residual, rep.nonlinear.max_abs_residual);
    }

    #[test]
    fn laplace_roundtrip_small_measures(z1 in 0.0f64..1.5, gap in 0.5f64..2.0, w1 in 0.2f64..2.0, w2 in 0.2f64..2.0, two in any::<bool>()) {
        let mut atoms = vec![Atom { zeta: z1, weight: w1 }];
        if two {
            atoms.push(Atom { zeta: z1 + gap, weight: w2 });
        }
        let nu = SpectralMeasure::new(atoms, vec![0.0]).unwrap();
        let series = spectral::sample_series(&nu, 41, 2.0);
        let fit = spectral::invert_laplace_discrete(&series, nu.atoms().len()).unwrap();
        for (a, b) in fit.atoms.iter().zip(nu.atoms()) {
            prop_assert!((a.zeta - b.zeta).abs() < 1e-6 * (1.0 + b.zeta));
            prop_assert!((a.weight - b.weight).abs() < 1e-6 * b.weight.max(1.0));
        }
    }

    #[test]
    fn measure_scaling_is_linear(z in prop::collection::vec(-1.0f64..3.0, 1..4), c in 0.1f64..10.0, t in 0.0f64..2.0) {
        let atoms: Vec<Atom> = z.iter().enumerate().map(|(i, &zeta)| Atom { zeta: zeta + 4.0 * i as f64, weight: 1.0 + i as f64 }).collect();
        let nu = SpectralMeasure::new(atoms, vec![]).unwrap();
        let scaled = nu.scaled(c).unwrap();
        prop_assert!((scaled.laplace(t) - c * nu.laplace(t)).abs() <= 1e-12 * scaled.laplace(t));
        prop_assert!((scaled.total_mass() - c * nu.total_mass()).abs() < 1e-12 * scaled.total_mass());
        prop_assert!(nu.scaled(-c).is_err());
    }

    #[test]
    fn boundary_projection_lands_in_domain(y in prop::collection::vec(-50.0f64..50.0, 3)) {
        let dom = Domain { lower: vec![Some(0.0), None, Some(-1.0)], upper: vec![None, Some(2.0), Some(1.0)] };
        let mut c = y.clone();
        dom.clamp(&mut c);
        prop_assert!(dom.contains(&c));
        let mut r = y.clone();
        dom.reflect(&mut r);
        prop_assert!(dom.contains(&r));
        if dom.contains(&y) {
            prop_assert_eq!(&c, &y);
            prop_assert_eq!(&r, &y);
        }
    }

    #[test]
    fn pseudoinverse_penrose_identities(a in matrix(3, 2), rank_one in any::<bool>()) {
        let a = if rank_one { a.column(0) * a.column(0).transpose().columns(0, 2).clone_owned() } else { a };
        let (ap, _) = linalg::pinv(&a);
        let tol = 1e-9 * (1.0 + a.amax() * ap.amax()).powi(2);
        prop_assert!((&a * &ap * &a - &a).amax() < tol);
        prop_assert!((&ap * &a * &ap - &ap).amax() < tol);
        prop_assert!(((&a * &ap).transpose() - &a * &ap).amax() < tol);
        prop_assert!(((&ap * &a).transpose() - &ap * &a).amax() < tol);
    }

    #[test]
    fn model_json_roundtrip(mu in prop::collection::vec(-0.2f64..0.2, 2), s in 0.1f64..1.0, k in 0.1f64..1.0, r in -0.9f64..0.9) {
        let spec = model::constant_model(
            mu,
            vec![vec![s, 0.0], vec![0.3 * s, s]],
            vec![0.1],
            vec![vec![k]],
            vec![vec![r], vec![0.0]],
        ).unwrap();
        let back = ModelSpec::from_json(&spec.to_json()).unwrap();
        prop_assert_eq!(back, spec);
    }
}
