//! Pointwise check of `d/dt h_bar >= -gamma h_bar` along the exact vector
//! field, evaluated with the true parameters. No integration is involved, so
//! a failure here is a controller defect rather than step-size error.

use acbf::controller::{parameter_mismatch, AdaptiveState, Branch};
use acbf::model::dot;
use acbf::scenarios::{Scenario, PRESETS};
use acbf::sim::certificate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

#[test]
fn certificate_inequality_holds_pointwise() {
    for id in PRESETS {
        let sc = Scenario::preset(id).unwrap();
        let ctrl = sc.controller().unwrap();
        let k = ctrl.estimate_len();
        let (mu, nu) = parameter_mismatch(
            &sc.truth.theta,
            &sc.truth.lambda,
            &ctrl.nominal.theta0,
            &ctrl.nominal.lambda0,
            ctrl.mode(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 3000 {
            let x: Vec<f64> = sc.params.grid.iter().map(|a| rng.random_range(a.lo..=a.hi)).collect();
            if (ctrl.barrier.h)(&x) < 0.0 {
                continue;
            }
            let st = AdaptiveState {
                mu_hat: (0..k).map(|_| log_uniform(&mut rng, 1e-5, 1e2)).collect(),
                nu_hat: (0..k).map(|_| log_uniform(&mut rng, 1e-5, 1e2)).collect(),
            };
            let t = rng.random_range(0.0..10.0);
            let ud = sc.params.reference.ud(t, &x, &ctrl);
            let out = ctrl.control(&x, &st, &ud);
            if out.diagnostics.iter().any(|d| d.branch == Branch::Infeasible) {
                continue;
            }
            let xdot = sc.system.plant_derivative(&sc.truth, &x, &out.u).unwrap();
            let (md, nd) = ctrl.adapt_rates(&x, &st, &out.u0);
            let (h, hx) = ctrl.barrier.value_and_grad(&x);
            let mut hbar_dot = dot(&hx, &xdot);
            for i in 0..k {
                hbar_dot += (mu[i] - st.mu_hat[i]) * md[i] / ctrl.gains.gamma_theta[i];
                hbar_dot += (nu[i] - st.nu_hat[i]) * nd[i] / ctrl.gains.gamma_lambda[i];
            }
            let hbar = certificate(h, &mu, &nu, &st, &ctrl);
            let lhs = hbar_dot + ctrl.gains.gamma * hbar;
            let scale = 1.0 + hbar_dot.abs() + (ctrl.gains.gamma * hbar).abs();
            assert!(
                lhs >= -1e-9 * scale,
                "{id}: x = {x:?}, state = {st:?}, dhbar + gamma hbar = {lhs}"
            );
            checked += 1;
        }
    }
}
