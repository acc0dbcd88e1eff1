//! Browser bindings for the `hotmle` examples. Every entry point returns a
//! JSON string; errors come back as `{"error": "..."}`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use hotmle::density2::Mode;
use hotmle::numeric;
use hotmle::sim::{self, BiasMode, DensityDgp, DensityEstimator, DensityStudyConfig, TrackConfig, TsmDgp};
use hotmle::tsm::{TsmConfig, TsmData};

#[derive(Serialize)]
struct EstimatorRow {
    name: &'static str,
    estimate: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct DensityDemo {
    supports: Vec<f64>,
    truth: Vec<f64>,
    empirical: Vec<f64>,
    hal: Vec<f64>,
    initial: Vec<f64>,
    psi0: f64,
    estimators: Vec<EstimatorRow>,
}

fn to_json<T: Serialize>(res: Result<T, String>) -> String {
    match res {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn parse_bias_mode(s: &str) -> Result<BiasMode, String> {
    s.parse::<BiasMode>().map_err(|e| e.to_string())
}

/// One density replication: the pmfs involved and every estimator's value.
#[wasm_bindgen]
pub fn density_fit(n: usize, bias_mass: f64, bias_mode: &str, seed: u64) -> String {
    to_json(density_fit_inner(n, bias_mass, bias_mode, seed))
}

fn density_fit_inner(n: usize, bias_mass: f64, bias_mode: &str, seed: u64) -> Result<DensityDemo, String> {
    let cfg = DensityStudyConfig {
        n,
        reps: 1,
        bias_mass,
        bias_mode: parse_bias_mode(bias_mode)?,
        seed,
        parallel: false,
        ..Default::default()
    };
    let dgp = DensityDgp::new(cfg.k, cfg.supports).map_err(|e| e.to_string())?;
    let mut rng = numeric::replication_rng(seed, 0);
    let rep = sim::density_replicate(&dgp, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let (fits, _) = sim::density_replication(&dgp, &cfg, 0, false).map_err(|e| e.to_string())?;
    let psi0 = dgp.psi0();
    let estimators = DensityEstimator::ALL
        .iter()
        .zip(fits)
        .map(|(e, f)| match f {
            Ok(fit) => EstimatorRow {
                name: e.label(),
                estimate: Some(fit.estimate + psi0),
                error: None,
            },
            Err(msg) => EstimatorRow {
                name: e.label(),
                estimate: None,
                error: Some(msg),
            },
        })
        .collect();
    Ok(DensityDemo {
        supports: dgp.p0.supports().to_vec(),
        truth: dgp.p0.probs().to_vec(),
        empirical: rep.empirical.probs().to_vec(),
        hal: rep.hal.probs().to_vec(),
        initial: rep.initial.probs().to_vec(),
        psi0,
        estimators,
    })
}

/// Total remainder along one iterative second-order run.
#[wasm_bindgen]
pub fn remainder_track(n: usize, bias_mass: f64, step: f64, empirical: bool, seed: u64) -> String {
    let cfg = TrackConfig {
        n,
        bias_mass,
        step,
        mode: if empirical { Mode::Empirical } else { Mode::Regularized },
        seed,
        ..Default::default()
    };
    to_json(sim::track_total_remainder(&cfg).map_err(|e| e.to_string()))
}

#[derive(Serialize)]
struct TsmDemo {
    psi0: f64,
    w: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
    estimate: sim::TsmDataEstimate,
}

/// Draws `n` observations from the treatment-specific-mean design and
/// returns both estimates with confidence intervals.
#[wasm_bindgen]
pub fn tsm_estimate(n: usize, offset: usize, seed: u64) -> String {
    let run = || -> Result<TsmDemo, String> {
        let mut rng = numeric::replication_rng(seed, 0);
        let data: TsmData = TsmDgp::draw(n, &mut rng).map_err(|e| e.to_string())?;
        let estimate = sim::estimate_tsm(&data, offset, seed, &TsmConfig::default()).map_err(|e| e.to_string())?;
        Ok(TsmDemo {
            psi0: TsmDgp::psi0(),
            w: data.w().to_vec(),
            a: data.a().to_vec(),
            y: data.y().to_vec(),
            estimate,
        })
    };
    to_json(run())
}
