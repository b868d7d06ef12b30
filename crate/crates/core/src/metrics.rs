//! MAE, RMSE, NSE and KGE over paired observed/simulated values, and the
//! per-return-period breakdown.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Equal-length finite series of observed and simulated values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    obs: Vec<f64>,
    sim: Vec<f64>,
}

impl PairedSeries {
    pub fn new(obs: Vec<f64>, sim: Vec<f64>) -> Result<Self> {
        if obs.len() != sim.len() {
            return Err(Error::Dimension(format!(
                "{} observed values against {} simulated",
                obs.len(),
                sim.len()
            )));
        }
        if obs.is_empty() {
            return Err(Error::EmptyDomain("empty series".into()));
        }
        if obs.iter().chain(&sim).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("series contains a non-finite value".into()));
        }
        Ok(PairedSeries { obs, sim })
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }
    pub fn sim(&self) -> &[f64] {
        &self.sim
    }
    pub fn len(&self) -> usize {
        self.obs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.obs.iter().copied().zip(self.sim.iter().copied())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sum of squared deviations from the mean.
fn centred_ss(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

pub fn mae(s: &PairedSeries) -> f64 {
    s.pairs().map(|(o, p)| (o - p).abs()).sum::<f64>() / s.len() as f64
}

pub fn rmse(s: &PairedSeries) -> f64 {
    (s.pairs().map(|(o, p)| (o - p) * (o - p)).sum::<f64>() / s.len() as f64).sqrt()
}

fn require_varying(s: &PairedSeries) -> Result<(f64, f64)> {
    let mo = mean(&s.obs);
    let ss = centred_ss(&s.obs, mo);
    if ss == 0.0 {
        return Err(Error::Degenerate("observed series is constant".into()));
    }
    Ok((mo, ss))
}

pub fn nse(s: &PairedSeries) -> Result<f64> {
    let (_, ss) = require_varying(s)?;
    let sse: f64 = s.pairs().map(|(o, p)| (o - p) * (o - p)).sum();
    Ok(1.0 - sse / ss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kge {
    pub kge: f64,
    /// Pearson correlation; 0 when the simulation is constant.
    pub r: f64,
    /// Ratio of standard deviations, sim over obs.
    pub alpha: f64,
    /// Ratio of means, sim over obs.
    pub beta: f64,
}

impl Kge {
    pub fn from_components(r: f64, alpha: f64, beta: f64) -> f64 {
        1.0 - ((r - 1.0).powi(2) + (alpha - 1.0).powi(2) + (beta - 1.0).powi(2)).sqrt()
    }
}

pub fn kge(s: &PairedSeries) -> Result<Kge> {
    let (mo, sso) = require_varying(s)?;
    if mo == 0.0 {
        return Err(Error::Degenerate("observed mean is zero, so beta is undefined".into()));
    }
    let ms = mean(&s.sim);
    let sss = centred_ss(&s.sim, ms);
    let cov: f64 = s.pairs().map(|(o, p)| (o - mo) * (p - ms)).sum();
    let r = if sss == 0.0 { 0.0 } else { cov / (sso * sss).sqrt() };
    let alpha = (sss / sso).sqrt();
    let beta = ms / mo;
    Ok(Kge {
        kge: Kge::from_components(r, alpha, beta),
        r,
        alpha,
        beta,
    })
}

/// All four indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
    pub nse: f64,
    pub kge: f64,
}

impl Scores {
    pub fn compute(s: &PairedSeries) -> Result<Self> {
        Ok(Scores {
            mae: mae(s),
            rmse: rmse(s),
            nse: nse(s)?,
            kge: kge(s)?.kge,
        })
    }

    /// Like [`Scores::compute`], but a degenerate NSE or KGE becomes NaN
    /// instead of an error (used for single-event rows).
    pub fn compute_lenient(s: &PairedSeries) -> Self {
        Scores {
            mae: mae(s),
            rmse: rmse(s),
            nse: nse(s).unwrap_or(f64::NAN),
            kge: kge(s).map(|k| k.kge).unwrap_or(f64::NAN),
        }
    }
}

/// One test event's pixels, tagged by return period.
#[derive(Debug, Clone)]
pub struct TaggedSeries {
    pub return_period: f64,
    pub series: PairedSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturnPeriodRow {
    pub return_period: f64,
    pub events: usize,
    pub rmse: f64,
    pub nse: f64,
}

/// Groups events by return period (ascending) and scores the pooled pixels
/// of each group. A group whose pooled observations are constant reports
/// NaN for NSE.
pub fn per_return_period(events: &[TaggedSeries]) -> Result<Vec<ReturnPeriodRow>> {
    let mut groups: BTreeMap<u64, (f64, usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for e in events {
        if !e.return_period.is_finite() || e.return_period <= 0.0 {
            return Err(Error::Invalid(format!("return period {}", e.return_period)));
        }
        let g = groups
            .entry(e.return_period.to_bits())
            .or_insert_with(|| (e.return_period, 0, Vec::new(), Vec::new()));
        g.1 += 1;
        g.2.extend_from_slice(e.series.obs());
        g.3.extend_from_slice(e.series.sim());
    }
    // Positive finite f64 bit patterns sort like the values.
    groups
        .into_values()
        .map(|(t, n, obs, sim)| {
            let s = PairedSeries::new(obs, sim)?;
            Ok(ReturnPeriodRow {
                return_period: t,
                events: n,
                rmse: rmse(&s),
                nse: nse(&s).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Writes `label,MAE,RMSE,NSE,KGE` rows.
pub fn write_scores_csv(path: &Path, rows: &[(String, Scores)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "MAE", "RMSE", "NSE", "KGE"])?;
    for (label, s) in rows {
        w.write_record([
            label.clone(),
            fmt_real(s.mae),
            fmt_real(s.rmse),
            fmt_real(s.nse),
            fmt_real(s.kge),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_return_period_csv(path: &Path, rows: &[ReturnPeriodRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["return_period", "events", "RMSE", "NSE"])?;
    for r in rows {
        w.write_record([
            fmt_real(r.return_period),
            r.events.to_string(),
            fmt_real(r.rmse),
            fmt_real(r.nse),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `obs,sim` pairs for external scatter plots.
pub fn write_scatter_csv(path: &Path, s: &PairedSeries) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "obs,sim").map_err(io)?;
    for (o, p) in s.pairs() {
        writeln!(w, "{},{}", fmt_real(o), fmt_real(p)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Shortest round-trip decimal form.
pub fn fmt_real(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ps(o: &[f64], s: &[f64]) -> PairedSeries {
        PairedSeries::new(o.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn hand_values() {
        assert_eq!(mae(&ps(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0])), 2.0 / 3.0);
        assert_eq!(rmse(&ps(&[0.0, 0.0], &[3.0, 4.0])), 12.5f64.sqrt());
        assert_eq!(nse(&ps(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])).unwrap(), -3.0);
    }

    #[test]
    fn perfect_and_mean_benchmarks() {
        let o = [0.3, 1.7, 0.0, 2.2, 0.9];
        let p = ps(&o, &o);
        assert_eq!((mae(&p), rmse(&p), nse(&p).unwrap()), (0.0, 0.0, 1.0));
        let k = kge(&p).unwrap();
        assert_eq!((k.kge, k.r, k.alpha, k.beta), (1.0, 1.0, 1.0, 1.0));

        let m = o.iter().sum::<f64>() / 5.0;
        let b = ps(&o, &[m; 5]);
        assert_eq!(nse(&b).unwrap(), 0.0);
        let k = kge(&b).unwrap();
        assert_eq!((k.r, k.alpha, k.beta), (0.0, 0.0, 1.0));
        assert_eq!(k.kge, 1.0 - 2f64.sqrt());

        let doubled: Vec<f64> = o.iter().map(|v| 2.0 * v).collect();
        let k = kge(&ps(&o, &doubled)).unwrap();
        assert_eq!((k.r, k.alpha, k.beta), (1.0, 2.0, 2.0));
        assert_eq!(k.kge, 1.0 - 2f64.sqrt());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(nse(&ps(&[2.0, 2.0], &[1.0, 3.0])), Err(Error::Degenerate(_))));
        assert!(matches!(kge(&ps(&[-1.0, 1.0], &[1.0, 3.0])), Err(Error::Degenerate(_))));
        assert!(PairedSeries::new(vec![1.0], vec![]).is_err());
        assert!(PairedSeries::new(vec![], vec![]).is_err());
        assert!(PairedSeries::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn return_period_table() {
        let ev = |t: f64, o: &[f64], s: &[f64]| TaggedSeries {
            return_period: t,
            series: ps(o, s),
        };
        let perfect = per_return_period(&[ev(5.0, &[0.0, 1.0, 3.0], &[0.0, 1.0, 3.0])]).unwrap();
        assert_eq!(perfect, vec![ReturnPeriodRow { return_period: 5.0, events: 1, rmse: 0.0, nse: 1.0 }]);
        let events = [
            ev(10.0, &[0.0, 1.0], &[0.5, 1.0]),
            ev(2.0, &[0.0, 2.0], &[0.0, 1.0]),
            ev(10.0, &[3.0, 1.0], &[2.0, 1.5]),
        ];
        let rows = per_return_period(&events).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].return_period, rows[0].events), (2.0, 1));
        assert_eq!((rows[1].return_period, rows[1].events), (10.0, 2));
        let all = ps(&[0.0, 1.0, 0.0, 2.0, 3.0, 1.0], &[0.5, 1.0, 0.0, 1.0, 2.0, 1.5]);
        let pooled = rmse(&all);
        let lo = rows.iter().map(|r| r.rmse).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.rmse).fold(0.0, f64::max);
        assert!(lo <= pooled && pooled <= hi);
    }

    #[test]
    fn csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let s = Scores::compute(&ps(&[1.0, 2.0, 4.0], &[1.0, 2.5, 3.0])).unwrap();
        write_scores_csv(&path, &[("event_1".into(), s), ("pooled".into(), s)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "label,MAE,RMSE,NSE,KGE");
        assert_eq!(text.lines().count(), 3);
    }

    fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.01f64..10.0, n),
                prop::collection::vec(-5.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae((o, s) in series()) {
            let p = ps(&o, &s);
            prop_assert!(rmse(&p) >= mae(&p) * (1.0 - 1e-12));
        }

        #[test]
        fn metrics_ignore_pair_order((o, s) in series(), rot in 0usize..40) {
            let p = ps(&o, &s);
            let k = rot % o.len();
            let mut o2 = o.clone();
            let mut s2 = s.clone();
            o2.rotate_left(k);
            s2.rotate_left(k);
            let q = ps(&o2, &s2);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
            prop_assert!(close(mae(&p), mae(&q)));
            prop_assert!(close(rmse(&p), rmse(&q)));
            if let (Ok(a), Ok(b)) = (nse(&p), nse(&q)) {
                prop_assert!(close(a, b));
            }
            if let (Ok(a), Ok(b)) = (kge(&p), kge(&q)) {
                prop_assert!(close(a.kge, b.kge));
            }
        }

        #[test]
        fn kge_is_consistent_with_its_components((o, s) in series()) {
            if let Ok(k) = kge(&ps(&o, &s)) {
                prop_assert!((Kge::from_components(k.r, k.alpha, k.beta) - k.kge).abs() < 1e-12);
            }
        }

        #[test]
        fn mae_scales_with_abs_factor((o, s) in series(), c in -4.0f64..4.0) {
            let scaled = ps(&o.iter().map(|v| v * c).collect::<Vec<_>>(), &s.iter().map(|v| v * c).collect::<Vec<_>>());
            let want = c.abs() * mae(&ps(&o, &s));
            prop_assert!((mae(&scaled) - want).abs() <= 1e-9 * (1.0 + want));
        }
    }
}
