//! Synthetic data generation and plain-text series exchange.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{ObservationModel, ObservationStep};
use crate::linalg::{gaussian_vector, psd_sqrt, seeded_rng};
use crate::sde::{discretize_transition_capped, process_noise_dense, LtiSdeModel};

/// Noisy measurements `y_l = C_l x_l + R_l^{1/2} ε_l` of a trajectory.
/// `models[l] = None` leaves time `l` unobserved.
pub fn observe(
    times: &[f64],
    truth: &[DVector<f64>],
    models: &[Option<Arc<ObservationModel>>],
    seed: u64,
) -> Result<Vec<ObservationStep>> {
    if times.len() != truth.len() || times.len() != models.len() {
        return Err(Error::Dimension { context: "observation schedule length".into(), expected: times.len(), got: models.len() });
    }
    let fallback = models.iter().flatten().next().cloned();
    let mut out = Vec::with_capacity(times.len());
    for (l, ((&time, x), model)) in times.iter().zip(truth).zip(models).enumerate() {
        let step = match model {
            Some(model) => {
                let mut rng = seeded_rng(seed, 0x0b5 + l as u64);
                let eps = DMatrix::from_column_slice(model.m(), 1, gaussian_vector(&mut rng, model.m()).as_slice());
                let noise = model.unwhiten(&eps);
                let y = model.c().apply(x) + DVector::from_column_slice(noise.as_slice());
                ObservationStep { time, model: model.clone(), y: Some(y) }
            }
            None => {
                let model = match &fallback {
                    Some(m) => m.clone(),
                    None => return Err(Error::InvalidArgument("schedule has no observation model at all".into())),
                };
                ObservationStep { time, model, y: None }
            }
        };
        out.push(step);
    }
    Ok(out)
}

/// Simulate `x_l = Φ(Δt) x_{l−1} + Q(Δt)^{1/2} z_l` from `x0` with dense
/// transition and noise matrices, then observe it.
pub fn generate_on_model_data(
    model: &LtiSdeModel,
    x0: DVector<f64>,
    times: &[f64],
    models: &[Option<Arc<ObservationModel>>],
    cap: usize,
    seed: u64,
) -> Result<(Vec<DVector<f64>>, Vec<ObservationStep>)> {
    if x0.len() != model.n() {
        return Err(Error::Dimension { context: "initial state".into(), expected: model.n(), got: x0.len() });
    }
    let mut rng = seeded_rng(seed, 0x5e);
    let mut truth = vec![x0];
    let mut cache: Option<(f64, DMatrix<f64>, DMatrix<f64>)> = None;
    for l in 1..times.len() {
        let dt = times[l] - times[l - 1];
        if !(dt > 0.0) {
            return Err(Error::NonMonotoneTimes { index: l, time: times[l], previous: times[l - 1] });
        }
        let reuse = matches!(&cache, Some((c, _, _)) if (c - dt).abs() <= 1e-12 * dt);
        if !reuse {
            let phi = discretize_transition_capped(model, dt, cap)?.to_dense();
            let (q_sqrt, _) = psd_sqrt(&process_noise_dense(model, dt, cap)?);
            cache = Some((dt, phi, q_sqrt));
        }
        let (_, phi, q_sqrt) = cache.as_ref().expect("filled above");
        let z = gaussian_vector(&mut rng, model.n());
        let next = phi * &truth[l - 1] + q_sqrt * z;
        truth.push(next);
    }
    let obs = observe(times, &truth, models, seed)?;
    Ok((truth, obs))
}

/// One `(time, component, value)` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub time: f64,
    pub component: usize,
    pub value: f64,
}

pub const SERIES_HEADER: &str = "time,component,value";

/// Write vectors as `time,component,value` rows under a header line.
/// Floats use Rust's shortest round-trip formatting.
pub fn export_series<W: Write>(mut w: W, series: &[(f64, DVector<f64>)]) -> Result<()> {
    writeln!(w, "{SERIES_HEADER}")?;
    for (time, values) in series {
        for (i, v) in values.iter().enumerate() {
            writeln!(w, "{time:?},{i},{v:?}")?;
        }
    }
    Ok(())
}

/// Read a series written by [`export_series`]. Rows of one time must be
/// consecutive with components `0..m` in order.
pub fn import_series<R: BufRead>(r: R) -> Result<Vec<(f64, DVector<f64>)>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != SERIES_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header `{SERIES_HEADER}`") });
    }
    let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: lineno, message: format!("expected 3 fields, found {}", fields.len()) });
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse { line: lineno, message: e.to_string() });
        let time = parse_f(fields[0])?;
        let component: usize = fields[1].parse().map_err(|e: std::num::ParseIntError| Error::Parse { line: lineno, message: e.to_string() })?;
        let value = parse_f(fields[2])?;
        match out.last_mut() {
            Some((t, values)) if *t == time => {
                if component != values.len() {
                    return Err(Error::Parse { line: lineno, message: format!("component {component} out of order") });
                }
                values.push(value);
            }
            _ => {
                if component != 0 {
                    return Err(Error::Parse { line: lineno, message: "a new time must start at component 0".into() });
                }
                out.push((time, vec![value]));
            }
        }
    }
    Ok(out.into_iter().map(|(t, v)| (t, DVector::from_vec(v))).collect())
}

/// The observed vectors of a measurement sequence.
pub fn observed_series(obs: &[ObservationStep]) -> Vec<(f64, DVector<f64>)> {
    obs.iter().filter_map(|o| o.y.as_ref().map(|y| (o.time, y.clone()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{DenseOperator, ScaledIdentity};
    use crate::sde::DEFAULT_DENSE_CAP;

    fn ou(lambda: f64, var: f64) -> LtiSdeModel {
        LtiSdeModel::new(
            DenseOperator::arc(DMatrix::from_element(1, 1, -lambda)),
            DenseOperator::arc(DMatrix::from_element(1, 1, 2.0 * lambda * var)),
            1,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_full_observation_reproduces_truth() {
        let model = ou(1.0, 1.0);
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let obs = Arc::new(ObservationModel::isotropic(Arc::new(ScaledIdentity::identity(1)), 1e-300).unwrap());
        let models = vec![Some(obs); times.len()];
        let (truth, data) = generate_on_model_data(&model, DVector::from_element(1, 0.3), &times, &models, DEFAULT_DENSE_CAP, 3).unwrap();
        for (x, o) in truth.iter().zip(&data) {
            assert_eq!(o.y.as_ref().unwrap(), x);
        }
    }

    #[test]
    fn ou_stationary_variance_matches_closed_form() {
        let (lambda, var) = (2.0, 1.5);
        let model = ou(lambda, var);
        let count = 20_000;
        let dt = 0.5;
        let times: Vec<f64> = (0..count).map(|i| i as f64 * dt).collect();
        let obs = Arc::new(ObservationModel::isotropic(Arc::new(ScaledIdentity::identity(1)), 1.0).unwrap());
        let mut models = vec![None; count];
        models[0] = Some(obs);
        let x0 = DVector::from_element(1, var.sqrt() * 0.7);
        let (truth, _) = generate_on_model_data(&model, x0, &times, &models, DEFAULT_DENSE_CAP, 11).unwrap();
        let xs: Vec<f64> = truth.iter().map(|x| x[0]).collect();
        let mean = xs.iter().sum::<f64>() / count as f64;
        let emp = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
        // Lag-one correlation ρ = e^{-λΔt}; the variance estimate of an AR(1)
        // series has standard error ≈ σ² √(2 (1 + ρ²) / ((1 − ρ²) N)).
        let rho = (-lambda * dt).exp();
        let se = var * (2.0 * (1.0 + rho * rho) / ((1.0 - rho * rho) * count as f64)).sqrt();
        assert!((emp - var).abs() < 3.0 * se, "empirical {emp} vs {var} (se {se})");
    }

    #[test]
    fn series_round_trip() {
        let series = vec![
            (0.0, DVector::from_vec(vec![1.0, -2.5e-7, 3.0])),
            (0.1, DVector::from_vec(vec![f64::MIN_POSITIVE, 1.0 / 3.0, -0.0])),
        ];
        let mut buf = Vec::new();
        export_series(&mut buf, &series).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,component,value\n0.0,0,1.0\n"));
        let back = import_series(buf.as_slice()).unwrap();
        assert_eq!(back, series);
    }

    #[test]
    fn malformed_series_reports_line() {
        let text = "time,component,value\n0.0,0,1.0\n0.0,2,1.0\n";
        match import_series(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(import_series("t,c,v\n".as_bytes()).is_err());
    }
}
