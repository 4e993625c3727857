use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dirac1(x: f64) -> DiscreteMeasure {
    DiscreteMeasure::dirac(&[x]).unwrap()
}

/// Independent oracle: minimum over all permutations of the mean p-cost.
fn brute_force_wp(p: f64, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    fn permute(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, f);
            perm.swap(k, i);
        }
    }
    let n = mu.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |pm| {
        let total: f64 = (0..n)
            .map(|i| {
                let d2: f64 = mu
                    .point(i)
                    .iter()
                    .zip(nu.point(pm[i]))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt().powf(p)
            })
            .sum();
        best = best.min(total);
    });
    (best / n as f64).powf(1.0 / p)
}

fn random_uniform_cloud(rng: &mut ChaCha8Rng, dim: usize, atoms: usize) -> DiscreteMeasure {
    let pts: Vec<f64> = (0..dim * atoms).map(|_| rng.gen_range(-3.0..3.0)).collect();
    DiscreteMeasure::uniform(dim, &pts).unwrap()
}

#[test]
fn single_atom_transport_cost() {
    let d = wasserstein(1.0, &dirac1(0.0), &dirac1(1.0), TransportMode::ExactAssignment).unwrap();
    assert!((d - 1.0).abs() < 1e-15);
}

#[test]
fn identical_measures_have_zero_distance() {
    let m = DiscreteMeasure::uniform(1, &[0.0, 1.0]).unwrap();
    let d = wasserstein(2.0, &m, &m, TransportMode::ExactAssignment).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn translation_by_vector_costs_its_norm() {
    let mu = DiscreteMeasure::uniform(2, &[0.0, 0.0, 1.0, 0.0]).unwrap();
    let nu = mu.translate(&[0.0, 1.0]).unwrap();
    let d = wasserstein(2.0, &mu, &nu, TransportMode::ExactAssignment).unwrap();
    assert!((d - 1.0).abs() < 1e-12);
}

#[test]
fn five_point_clouds_match_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mu = random_uniform_cloud(&mut rng, 2, 5);
        let nu = random_uniform_cloud(&mut rng, 2, 5);
        let got = wasserstein(2.0, &mu, &nu, TransportMode::ExactAssignment).unwrap();
        let expect = brute_force_wp(2.0, &mu, &nu);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }
}

#[test]
fn oracle_equivalence_up_to_seven_atoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..60 {
        let atoms = 1 + trial % 7;
        let dim = 1 + trial % 3;
        let p = [1.0, 2.0, 3.0][trial % 3];
        let mu = random_uniform_cloud(&mut rng, dim, atoms);
        let nu = random_uniform_cloud(&mut rng, dim, atoms);
        let got = wasserstein(p, &mu, &nu, TransportMode::ExactAssignment).unwrap();
        let expect = brute_force_wp(p, &mu, &nu);
        assert!(
            (got - expect).abs() < 1e-9,
            "trial {trial}: {got} vs {expect}"
        );
    }
}

#[test]
fn metric_axioms_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..200 {
        let atoms = 1 + trial % 6;
        let dim = 1 + trial % 2;
        let p = [1.0, 2.0][trial % 2];
        let a = random_uniform_cloud(&mut rng, dim, atoms);
        let b = random_uniform_cloud(&mut rng, dim, atoms);
        let c = random_uniform_cloud(&mut rng, dim, atoms);
        let dab = wasserstein(p, &a, &b, TransportMode::ExactAssignment).unwrap();
        let dba = wasserstein(p, &b, &a, TransportMode::ExactAssignment).unwrap();
        let dac = wasserstein(p, &a, &c, TransportMode::ExactAssignment).unwrap();
        let dcb = wasserstein(p, &c, &b, TransportMode::ExactAssignment).unwrap();
        assert_eq!(dab, dba, "symmetry must be exact");
        assert!(dab <= dac + dcb + 1e-9, "triangle violated at trial {trial}");
        let daa = wasserstein(p, &a, &a, TransportMode::ExactAssignment).unwrap();
        assert!(daa <= 1e-12);
    }
}

#[test]
fn quantile_mode_agrees_with_assignment_in_1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..50 {
        let atoms = 1 + rng.gen_range(0..6);
        let mu = random_uniform_cloud(&mut rng, 1, atoms);
        let nu = random_uniform_cloud(&mut rng, 1, atoms);
        for p in [1.0, 2.0, 3.0] {
            let qa = wasserstein(p, &mu, &nu, TransportMode::Sorted1d).unwrap();
            let ea = wasserstein(p, &mu, &nu, TransportMode::ExactAssignment).unwrap();
            assert!((qa - ea).abs() < 1e-12, "p={p}: {qa} vs {ea}");
        }
    }
}

#[test]
fn quantile_mode_handles_unequal_weights() {
    // 3/4 delta_0 + 1/4 delta_1 vs delta_0: only the 1/4 mass at 1 moves.
    let mu = DiscreteMeasure::from_atoms(1, &[(vec![0.0], 0.75), (vec![1.0], 0.25)]).unwrap();
    let nu = dirac1(0.0);
    let d1 = wasserstein(1.0, &mu, &nu, TransportMode::Sorted1d).unwrap();
    assert!((d1 - 0.25).abs() < 1e-12);
    let d2 = wasserstein(2.0, &mu, &nu, TransportMode::Sorted1d).unwrap();
    assert!((d2 - 0.5).abs() < 1e-12);
}

#[test]
fn mode_preconditions_are_rejected() {
    let a = DiscreteMeasure::uniform(2, &[0.0, 0.0]).unwrap();
    let b = DiscreteMeasure::uniform(2, &[0.0, 0.0, 1.0, 1.0]).unwrap();
    assert!(matches!(
        wasserstein(2.0, &a, &b, TransportMode::ExactAssignment),
        Err(MeasureError::AssignmentPrecondition { .. })
    ));
    assert!(matches!(
        wasserstein(2.0, &a, &a, TransportMode::Sorted1d),
        Err(MeasureError::QuantilePrecondition { .. })
    ));
    assert!(matches!(
        wasserstein(0.5, &a, &a, TransportMode::ExactAssignment),
        Err(MeasureError::InvalidOrder { .. })
    ));
    let c = DiscreteMeasure::uniform(1, &[0.0]).unwrap();
    assert!(matches!(
        wasserstein(1.0, &a, &c, TransportMode::ExactAssignment),
        Err(MeasureError::DimensionMismatch { .. })
    ));
}

#[test]
fn path_distance_examples() {
    let grid = vec![0.0, 0.5, 1.0];
    let clouds = |shift: f64| -> Vec<DiscreteMeasure> {
        (0..3)
            .map(|k| {
                DiscreteMeasure::uniform(
                    2,
                    &[
                        k as f64 + shift,
                        0.0,
                        k as f64 + 1.0 + shift,
                        1.0,
                        k as f64 - 1.0 + shift,
                        0.5,
                        k as f64 + shift,
                        2.0,
                    ],
                )
                .unwrap()
            })
            .collect()
    };
    let a = MeasurePath::new(grid.clone(), clouds(0.0)).unwrap();
    assert_eq!(path_distance(2.0, &a, &a).unwrap(), 0.0);

    let b = a
        .translate_by_nodes(|_| vec![3.0, 4.0])
        .unwrap();
    let d = path_distance(2.0, &a, &b).unwrap();
    assert!((d - 5.0).abs() < 1e-12, "translation by (3,4) is 5, got {d}");

    // Node-wise brute force oracle on a shifted path.
    let c = MeasurePath::new(grid, clouds(0.7)).unwrap();
    let got = path_distance(2.0, &a, &c).unwrap();
    let expect = (0..3)
        .map(|k| brute_force_wp(2.0, a.node(k), c.node(k)))
        .fold(0.0f64, f64::max);
    assert!((got - expect).abs() < 1e-9);

    let short = MeasurePath::new(
        vec![0.0, 1.0],
        vec![a.node(0).clone(), a.node(1).clone()],
    )
    .unwrap();
    assert!(matches!(
        path_distance(2.0, &a, &short),
        Err(MeasureError::GridMismatch { .. })
    ));
}

#[test]
fn empirical_construction_examples() {
    let (phi_x, phi) = empirical_from_particles(1, 1, &[0.0], &[1.0]).unwrap();
    assert!(phi.multiset_eq(
        &DiscreteMeasure::dirac(&[0.0, 1.0]).unwrap(),
        1e-15
    ));
    assert!(phi_x.multiset_eq(&dirac1(0.0), 1e-15));

    // Duplicate states stay as two atoms of weight 1/2; the canonical
    // multiset view accumulates them to a single unit atom.
    let (phi_x, phi) = empirical_from_particles(1, 1, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
    assert_eq!(phi_x.len(), 2);
    assert!(phi_x.multiset_eq(&dirac1(0.0), 1e-15));
    assert_eq!(phi.len(), 2);

    let (phi_x, phi) =
        empirical_from_particles(1, 1, &[0.0, 1.0, 2.0], &[5.0, 6.0, 7.0]).unwrap();
    assert_eq!(phi.len(), 3);
    assert!(phi.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(phi.marginal_state(1).unwrap().coords(), phi_x.coords());

    assert!(matches!(
        empirical_from_particles(1, 1, &[0.0, 1.0], &[0.0]),
        Err(MeasureError::CountMismatch { .. })
    ));
    assert!(matches!(
        empirical_from_particles(1, 1, &[], &[]),
        Err(MeasureError::Empty)
    ));
}

#[test]
fn marginal_examples() {
    let m = DiscreteMeasure::from_atoms(
        2,
        &[(vec![0.0, 10.0], 0.5), (vec![0.0, 20.0], 0.5)],
    )
    .unwrap();
    let marg = m.marginal_state(1).unwrap();
    assert!(marg.multiset_eq(&dirac1(0.0), 1e-15));

    let d = DiscreteMeasure::dirac(&[3.0, 9.0]).unwrap();
    assert!(d.marginal_state(1).unwrap().multiset_eq(&dirac1(3.0), 1e-15));

    let u = DiscreteMeasure::uniform(2, &[0.0, 1.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
    let mu = u.marginal_state(1).unwrap();
    let canon = mu.canonical_atoms();
    assert_eq!(canon.len(), 2);
    assert!((canon[0].1 - 1.0 / 3.0).abs() < 1e-15);
    assert!((canon[1].1 - 2.0 / 3.0).abs() < 1e-15);

    assert!(matches!(
        u.marginal_state(3),
        Err(MeasureError::InvalidSplit { .. })
    ));
}

#[test]
fn p_moment_examples() {
    assert_eq!(dirac1(0.0).p_moment(3.0), 0.0);
    let pm = DiscreteMeasure::uniform(1, &[1.0, -1.0]).unwrap().p_moment(2.0);
    assert!((pm - 1.0).abs() < 1e-15);
    // Direct-sum oracle: (1 + 4 + 9) / 3.
    let m = DiscreteMeasure::uniform(1, &[1.0, 2.0, 3.0]).unwrap();
    assert!((m.p_moment(2.0) - 14.0 / 3.0).abs() < 1e-14);
}

#[test]
fn marginal_constraint_examples() {
    // Dirac-at-own-empirical construction has zero defect.
    let states = [0.3, -0.4, 1.2];
    let controls = [0.1, 0.2, 0.3];
    let (phi_x, phi) = empirical_from_particles(1, 1, &states, &controls).unwrap();
    let grid = vec![0.0, 1.0];
    let mu = MeasurePath::new(grid.clone(), vec![phi_x.clone(), phi_x.clone()]).unwrap();
    let lam = RelaxedControlPath::dirac(grid.clone(), vec![phi.clone()]).unwrap();
    let report = check_marginal_constraint(&lam, &mu, 2.0, 1e-9).unwrap();
    assert_eq!(report.max_defect, 0.0);
    assert!(!report.violated);

    // State marginal delta_1 against mu = delta_0: defect 1.
    let bad = DiscreteMeasure::dirac(&[1.0, 0.0]).unwrap();
    let mu0 = MeasurePath::new(grid.clone(), vec![dirac1(0.0), dirac1(0.0)]).unwrap();
    let lam_bad = RelaxedControlPath::dirac(grid.clone(), vec![bad]).unwrap();
    let report = check_marginal_constraint(&lam_bad, &mu0, 2.0, 1e-9).unwrap();
    assert!((report.max_defect - 1.0).abs() < 1e-12);
    assert!(report.violated);

    // Two-component mixture, both with the correct marginal.
    let m1 = DiscreteMeasure::dirac(&[0.0, 5.0]).unwrap();
    let m2 = DiscreteMeasure::dirac(&[0.0, -5.0]).unwrap();
    let lam_mix =
        RelaxedControlPath::new(grid, vec![vec![(0.5, m1), (0.5, m2)]]).unwrap();
    let report = check_marginal_constraint(&lam_mix, &mu0, 2.0, 1e-9).unwrap();
    assert_eq!(report.max_defect, 0.0);
}

#[test]
fn invariants_reject_bad_construction() {
    assert!(matches!(
        DiscreteMeasure::from_flat(1, vec![], vec![]),
        Err(MeasureError::Empty)
    ));
    assert!(matches!(
        DiscreteMeasure::from_flat(1, vec![0.0], vec![0.5]),
        Err(MeasureError::WeightSum { .. })
    ));
    assert!(matches!(
        DiscreteMeasure::from_flat(1, vec![f64::NAN], vec![1.0]),
        Err(MeasureError::NonFinite { .. })
    ));
    assert!(matches!(
        DiscreteMeasure::from_atoms(1, &[(vec![0.0], -0.1), (vec![1.0], 1.1)]),
        Err(MeasureError::NegativeWeight { .. })
    ));
    assert!(MeasurePath::new(vec![0.5, 1.0], vec![dirac1(0.0), dirac1(0.0)]).is_err());
    assert!(CommonNoisePath::new(vec![0.0, 1.0], 2, vec![0.0]).is_err());
}

#[test]
fn flat_record_round_trips() {
    let m = DiscreteMeasure::from_atoms(
        2,
        &[(vec![0.125, -3.5], 0.25), (vec![1.0 / 3.0, 2.0], 0.75)],
    )
    .unwrap();
    let mut s = String::new();
    m.write_flat(&mut s);
    let lines: Vec<&str> = s.lines().collect();
    let (back, used) = DiscreteMeasure::parse_flat(&lines).unwrap();
    assert_eq!(used, 3);
    assert_eq!(back.coords(), m.coords());
    assert_eq!(back.weights(), m.weights());
}

proptest! {
    #[test]
    fn translation_identity_holds(
        pts in proptest::collection::vec(-10.0f64..10.0, 2..12),
        dx in -5.0f64..5.0,
    ) {
        let mu = DiscreteMeasure::uniform(1, &pts).unwrap();
        let nu = mu.translate(&[dx]).unwrap();
        let d = wasserstein(2.0, &mu, &nu, TransportMode::ExactAssignment).unwrap();
        prop_assert!((d - dx.abs()).abs() <= 1e-12);
    }

    #[test]
    fn marginal_preserves_mass(
        rows in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
    ) {
        let n = rows.len() as f64;
        let atoms: Vec<(Vec<f64>, f64)> =
            rows.iter().map(|(x, u)| (vec![*x, *u], 1.0 / n)).collect();
        let m = DiscreteMeasure::from_atoms(2, &atoms).unwrap();
        let marg = m.marginal_state(1).unwrap();
        let mass: f64 = marg.weights().iter().sum();
        prop_assert!((mass - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn quantile_distance_is_symmetric(
        xs in proptest::collection::vec(-5.0f64..5.0, 1..8),
        ys in proptest::collection::vec(-5.0f64..5.0, 1..8),
    ) {
        let mu = DiscreteMeasure::uniform(1, &xs).unwrap();
        let nu = DiscreteMeasure::uniform(1, &ys).unwrap();
        let ab = wasserstein(2.0, &mu, &nu, TransportMode::Sorted1d).unwrap();
        let ba = wasserstein(2.0, &nu, &mu, TransportMode::Sorted1d).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
    }
}
