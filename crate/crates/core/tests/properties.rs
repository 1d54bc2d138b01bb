use proptest::prelude::*;
use rfde_lyap::history::HistorySegment;
use rfde_lyap::integrator::{integrate, IntegratorConfig};
use rfde_lyap::signals::DisturbanceSignal;
use rfde_lyap::system::{example212, linear_delay};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_solutions_scale(c in -3.0f64..3.0, w in 0.5f64..4.0) {
        let cfg = IntegratorConfig::with_grid_step(0.05);
        let x0 = HistorySegment::from_fn(1.0, 0.05, 1, |t| vec![(w * t).sin() + 1.0]).unwrap();
        let none = DisturbanceSignal::none();
        let a = integrate(&linear_delay(), 0.0, &x0, &none, 3.0, &cfg).unwrap();
        let b = integrate(&linear_delay(), 0.0, &x0.scaled(c), &none, 3.0, &cfg).unwrap();
        for m in 0..=a.steps() {
            prop_assert!((b.state(m)[0] - c * a.state(m)[0]).abs() <= 1e-12 * (1.0 + a.state(m)[0].abs()));
        }
    }

    #[test]
    fn refinement_keeps_nodes(factor in 1usize..6, w in 0.1f64..5.0) {
        let x = HistorySegment::from_fn(0.4, 0.04, 1, |t| vec![(w * t).cos()]).unwrap();
        let f = x.refine(factor);
        prop_assert_eq!(f.cells(), x.cells() * factor);
        for k in 0..x.len() {
            prop_assert!((f.node(k * factor)[0] - x.node(k)[0]).abs() <= 1e-15);
        }
    }

    #[test]
    fn disturbed_delay_example_decays(d in 1.0f64..1.1, x in -2.0f64..2.0) {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let sig = DisturbanceSignal::constant(sys.disturbance_box().clone(), vec![d]).unwrap();
        let x0 = HistorySegment::constant(0.4, 0.02, &[x]).unwrap();
        let tr = integrate(&sys, 0.0, &x0, &sig, 20.0, &IntegratorConfig::with_grid_step(0.02)).unwrap();
        let n = tr.window_norms(0.4).unwrap();
        prop_assert!(n.iter().all(|v| *v <= 1.3 * x.abs() + 1e-12));
        prop_assert!(*n.last().unwrap() <= 1e-3 * x.abs() + 1e-15);
    }
}
