use lsa_core::flow::*;
use lsa_core::models::*;
use lsa_core::rng::SeedStream;
use lsa_core::task::*;
use lsa_core::theory::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn fig3_stats() -> PopulationStats {
    let cov = build_covariance(&[0.4, 0.3, 0.2, 0.1], EigenBasis::Identity).unwrap();
    population_stats(&cov, &LengthLaw::Fixed { n: 31 }).unwrap()
}

fn random_stats(d: usize, seed: u64) -> PopulationStats {
    let mut s = SeedStream::named("flow-test", seed, "eigs");
    let eigs: Vec<f64> = (0..d).map(|_| 0.2 + s.uniform()).collect();
    let basis = EigenBasis::RandomOrthonormal(SeedStream::named("flow-test", seed, "basis"));
    let cov = build_covariance(&eigs, basis).unwrap();
    population_stats(&cov, &LengthLaw::Fixed { n: 7 }).unwrap()
}

fn cfg(dt: f64, t_end: f64, integrator: Integrator) -> FlowConfig {
    FlowConfig {
        tau: 1.0,
        dt,
        t_end,
        integrator,
        schedule: SnapshotSchedule::default(),
        w_init: 0.0,
        seed: 0,
    }
}

#[test]
fn loss_is_non_increasing_and_laws_hold_on_random_runs() {
    for seed in 0..4 {
        let stats = random_stats(3, seed);
        let mut s = SeedStream::named("flow-test", seed, "init");
        let inits = [
            Params::Merged(init_merged(3, 3, 0.1, &mut s).unwrap()),
            Params::Separate(init_separate(3, 3, 1, 0.1, &mut s).unwrap()),
            Params::Separate(init_separate(3, 2, 2, 0.1, &mut s).unwrap()),
        ];
        for p in &inits {
            let c = cfg(default_dt(&stats, 1.0), 200.0, Integrator::Rk4);
            let tr = integrate(p, &stats, &c).unwrap();
            assert!(tr.max_loss_increase <= 1e-9, "loss rose by {}", tr.max_loss_increase);
            assert!(tr.max_drift.as_ref().unwrap().max() <= 1e-6);
        }
    }
}

#[test]
fn head_norms_stay_balanced_from_small_init() {
    let stats = fig3_stats();
    let w = 1e-2;
    let mut s = SeedStream::named("flow-test", 9, "init");
    let p = Params::Separate(init_separate(4, 4, 1, w, &mut s).unwrap());
    let tr = integrate(&p, &stats, &cfg(0.05, 20_000.0, Integrator::Rk4)).unwrap();
    for norms in &tr.head_norms {
        for n in norms {
            let gap = (n[1] - n[0]).abs().max((n[2] - n[0]).abs());
            assert!(gap <= 5.0 * w, "norm gap {gap}");
        }
    }
}

/// Two-layer linear network on the cubic feature with the exact second
/// moments `E(zzᵀ) = Λ ⊗ E(Λ̂²)` and `E(y z) = vec(Λ²)`.
struct MlpFlow {
    czz: DMatrix<f64>,
    cyz: DVector<f64>,
}

impl MlpFlow {
    fn new(stats: &PopulationStats) -> Self {
        let lam = stats.cov.matrix();
        let czz = lam.kronecker(&stats.exp_sq_cov);
        let l2 = &lam * &lam;
        Self {
            czz,
            cyz: DVector::from_column_slice(l2.as_slice()),
        }
    }

    /// `(τ dw2/dt, τ dW1/dt)`.
    fn field(&self, w2: &DVector<f64>, w1: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        // residual row r = cyzᵀ - w2ᵀ W1 czz
        let r = self.cyz.transpose() - w2.transpose() * w1 * &self.czz;
        let dw1 = w2 * &r;
        let dw2 = w1 * r.transpose();
        (dw2, dw1)
    }

    fn rk4(&self, w2: &mut DVector<f64>, w1: &mut DMatrix<f64>, h: f64) {
        let (a2, a1) = self.field(w2, w1);
        let (b2, b1) = self.field(&(&*w2 + &a2 * (h / 2.0)), &(&*w1 + &a1 * (h / 2.0)));
        let (c2, c1) = self.field(&(&*w2 + &b2 * (h / 2.0)), &(&*w1 + &b1 * (h / 2.0)));
        let (d2, d1) = self.field(&(&*w2 + &c2 * h), &(&*w1 + &c1 * h));
        *w2 += (a2 + b2 * 2.0 + c2 * 2.0 + d2) * (h / 6.0);
        *w1 += (a1 + b1 * 2.0 + c1 * 2.0 + d1) * (h / 6.0);
    }
}

#[test]
fn merged_flow_equals_two_layer_network_flow() {
    let stats = random_stats(3, 5);
    let mut s = SeedStream::named("flow-test", 5, "init");
    let p = init_merged(3, 4, 0.3, &mut s).unwrap();
    let dt = 0.01;
    let t_end = 30.0;
    let mut c = cfg(dt, t_end, Integrator::Rk4);
    c.schedule = SnapshotSchedule {
        log_points: 0,
        linear_points: 30,
    };
    let tr = integrate(&Params::Merged(p.clone()), &stats, &c).unwrap();

    let mlp = MlpFlow::new(&stats);
    let (mut w2, mut w1) = (p.w2(), p.w1());
    let steps_per_record = (1.0 / dt).round() as usize;
    for k in 1..tr.len() {
        for _ in 0..steps_per_record {
            mlp.rk4(&mut w2, &mut w1, dt);
        }
        let ours = match tr.params_at(k).unwrap() {
            Params::Merged(m) => m,
            Params::Separate(_) => unreachable!(),
        };
        assert!((ours.w2() - &w2).amax() < 1e-10, "record {k}");
        assert!((ours.w1() - &w1).amax() < 1e-10, "record {k}");
    }
}

#[test]
fn global_min_is_cubic_feature_regression() {
    for seed in 0..5 {
        let stats = random_stats(3, seed);
        let mlp = MlpFlow::new(&stats);
        let sol = mlp.czz.clone().lu().solve(&mlp.cyz).unwrap();
        let reshaped = DMatrix::from_column_slice(3, 3, sol.as_slice());
        assert!((reshaped - global_min_predictor(&stats)).amax() < 1e-10);
    }
}

#[test]
fn rk4_converges_at_fourth_order_and_euler_at_first() {
    let stats = random_stats(3, 2);
    let mut s = SeedStream::named("flow-test", 2, "init");
    let p = Params::Separate(init_separate(3, 2, 1, 0.5, &mut s).unwrap());
    let final_weights = |dt: f64, integ| {
        let tr = integrate(&p, &stats, &cfg(dt, 4.0, integ)).unwrap();
        DVector::from_vec(tr.weights.last().unwrap().clone())
    };
    let reference = final_weights(1e-3, Integrator::Rk4);
    let err = |dt, integ| (final_weights(dt, integ) - &reference).amax();
    let rk = err(0.2, Integrator::Rk4) / err(0.1, Integrator::Rk4);
    assert!(rk > 12.0 && rk < 20.0, "rk4 ratio {rk}");
    let eu = err(0.02, Integrator::Euler) / err(0.01, Integrator::Euler);
    assert!(eu > 1.8 && eu < 2.2, "euler ratio {eu}");
}

#[test]
fn merged_white_run_converges_to_global_min() {
    let cov = build_covariance(&[1.0; 4], EigenBasis::Identity).unwrap();
    let stats = population_stats(&cov, &LengthLaw::Fixed { n: 31 }).unwrap();
    let mut s = SeedStream::named("flow-test", 0, "init");
    let p = Params::Merged(init_merged(4, 8, 1e-3, &mut s).unwrap());
    let tr = integrate(&p, &stats, &cfg(default_dt(&stats, 1.0), 20.0, Integrator::Rk4)).unwrap();
    let target = fixed_point_loss(&stats, &[1, 2, 3, 4]).unwrap();
    assert!((tr.final_loss().unwrap() - target).abs() < 1e-3 * target);
    let m = tr.effective_matrices.last().unwrap();
    assert!((m - global_min_predictor(&stats)).norm() < 1e-3);
}

#[test]
fn csv_round_trip_preserves_recorded_fields() {
    let stats = fig3_stats();
    let mut s = SeedStream::named("flow-test", 3, "init");
    for p in [
        Params::Separate(init_separate(4, 3, 2, 0.1, &mut s).unwrap()),
        Params::Merged(init_merged(4, 2, 0.1, &mut s).unwrap()),
    ] {
        let tr = integrate(&p, &stats, &cfg(0.1, 50.0, Integrator::Rk4)).unwrap();
        let mut buf = Vec::new();
        write_csv(&tr, &mut buf).unwrap();
        let back = read_csv(tr.layout, buf.as_slice()).unwrap();
        assert_eq!(back.times, tr.times);
        assert_eq!(back.losses, tr.losses);
        assert_eq!(back.values, tr.values);
        assert_eq!(back.conservation_drift, tr.conservation_drift);
        assert_eq!(back.effective_matrices, tr.effective_matrices);
        assert_eq!(back.alignments, tr.alignments);
        for (a, b) in back.head_norms.iter().zip(&tr.head_norms) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn csv_header_mismatch_is_rejected() {
    let tr_layout = Layout::separate(2, 1, 1);
    let mut buf = Vec::new();
    let stats = random_stats(2, 0);
    let mut s = SeedStream::named("flow-test", 0, "init");
    let p = Params::Separate(init_separate(2, 1, 1, 0.1, &mut s).unwrap());
    write_csv(&integrate(&p, &stats, &cfg(0.1, 1.0, Integrator::Rk4)).unwrap(), &mut buf).unwrap();
    assert!(read_csv(tr_layout, buf.as_slice()).is_ok());
    assert!(read_csv(Layout::merged(2, 1), buf.as_slice()).is_err());
}

#[test]
fn csv_column_order_is_pinned() {
    let sep: Vec<String> = csv_header(Layout::separate(2, 1, 1));
    assert_eq!(
        sep,
        ["t", "loss", "v_1", "k_norm_1", "q_norm_1", "conservation_drift", "m_1_1", "m_1_2", "m_2_1", "m_2_2", "align_1_1", "align_1_2"]
    );
    let mer = csv_header(Layout::merged(1, 2));
    assert_eq!(mer, ["t", "loss", "v_1", "u_norm_1", "v_2", "u_norm_2", "conservation_drift", "m_1_1", "align_1_1", "align_2_1"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn short_runs_conserve_and_descend(seed in 0u64..10_000, d in 1usize..4, h in 1usize..4, w in 0.01f64..0.5) {
        let stats = random_stats(d, seed);
        let mut s = SeedStream::named("flow-prop", seed, "init");
        let r = 1 + (seed as usize) % d;
        let p = Params::Separate(init_separate(d, h, r, w, &mut s).unwrap());
        let tr = integrate(&p, &stats, &cfg(default_dt(&stats, 1.0), 20.0, Integrator::Rk4)).unwrap();
        prop_assert!(tr.max_loss_increase <= 1e-9);
        prop_assert!(tr.max_drift.as_ref().unwrap().max() <= 1e-6);
    }

    #[test]
    fn global_min_head_is_stationary(seed in 0u64..10_000) {
        let stats = random_stats(2, seed);
        let gm = global_min_predictor(&stats);
        // one head holding the global min with v = 1 is stationary
        let p = MergedParams { dim: 2, values: vec![1.0], merged_kq: vec![gm] };
        let g = grad_merged(&p, &stats).unwrap();
        prop_assert!(g.values[0].abs() < 1e-12);
        prop_assert!(g.merged_kq[0].amax() < 1e-12);
    }

    #[test]
    fn expected_inverse_length_decreases_with_max(max in 1usize..200) {
        let a = expected_inverse_length(&LengthLaw::Uniform { max });
        let b = expected_inverse_length(&LengthLaw::Uniform { max: max + 1 });
        prop_assert!(b < a);
    }
}
