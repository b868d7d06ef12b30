//! Chicago design storms from a power-law IDF relation.
//!
//! Average intensity over a window of `t` minutes is
//! `i(t, T) = A1 (1 + C log10 T) / (t + b)^n` mm/min, so the depth falling in
//! the most intense `t` minutes is `P(t) = t i(t, T)`. The hyetograph places
//! the peak at step `p = round(r (steps - 1))` and nests every window around
//! it, splitting each window before and after the peak in the ratio
//! `r' : 1 - r'` where `r'` is the peak time as a fraction of the duration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEP_MINUTES: u32 = 10;
pub const DURATIONS: [u32; 3] = [120, 240, 360];
pub const RETURN_PERIODS: usize = 30;
pub const MIN_RETURN_PERIOD: f64 = 2.0;
pub const MAX_RETURN_PERIOD: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StormParams {
    /// mm·min^(n-1)
    pub a1: f64,
    pub c: f64,
    /// minutes
    pub b: f64,
    pub n: f64,
    pub peak_ratio: f64,
    pub step: u32,
}

impl Default for StormParams {
    fn default() -> Self {
        StormParams {
            a1: 10.0,
            c: 0.8,
            b: 10.0,
            n: 0.7,
            peak_ratio: 0.4,
            step: DEFAULT_STEP_MINUTES,
        }
    }
}

impl StormParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a1 > 0.0) || !self.a1.is_finite() {
            return Err(Error::Invalid(format!("A1 must be positive, got {}", self.a1)));
        }
        if !(self.b >= 0.0) || !self.b.is_finite() {
            return Err(Error::Invalid(format!("b must be nonnegative, got {}", self.b)));
        }
        if !(self.n > 0.0 && self.n < 2.0) {
            return Err(Error::Invalid(format!("n must lie in (0, 2), got {}", self.n)));
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(Error::Invalid(format!("C must be nonnegative, got {}", self.c)));
        }
        if !(self.peak_ratio > 0.0 && self.peak_ratio < 1.0) {
            return Err(Error::Invalid(format!(
                "peak ratio must lie in (0, 1), got {}",
                self.peak_ratio
            )));
        }
        if self.step == 0 {
            return Err(Error::Invalid("step must be positive".into()));
        }
        Ok(())
    }

    /// `A1 (1 + C log10 T)`.
    pub fn scale(&self, return_period: f64) -> f64 {
        self.a1 * (1.0 + self.c * return_period.log10())
    }

    /// Average IDF intensity (mm/min) over `minutes`.
    pub fn intensity(&self, minutes: f64, return_period: f64) -> f64 {
        self.scale(return_period) / (minutes + self.b).powf(self.n)
    }

    /// IDF depth (mm) for a window of `minutes`.
    pub fn depth(&self, minutes: f64, return_period: f64) -> f64 {
        minutes * self.intensity(minutes, return_period)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyetograph {
    pub return_period: f64,
    pub duration: u32,
    pub step: u32,
    /// mm per step
    pub intensities: Vec<f64>,
}

impl Hyetograph {
    pub fn new(return_period: f64, duration: u32, step: u32, intensities: Vec<f64>) -> Result<Self> {
        if step == 0 || duration == 0 || duration % step != 0 {
            return Err(Error::Invalid(format!(
                "step {step} must divide duration {duration}"
            )));
        }
        if intensities.len() != (duration / step) as usize {
            return Err(Error::Dimension(format!(
                "{} intensities for {} steps",
                intensities.len(),
                duration / step
            )));
        }
        if let Some(v) = intensities.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!("rain depth {v} is negative or not finite")));
        }
        Ok(Hyetograph {
            return_period,
            duration,
            step,
            intensities,
        })
    }

    pub fn steps(&self) -> usize {
        self.intensities.len()
    }

    pub fn total(&self) -> f64 {
        self.intensities.iter().sum()
    }

    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.intensities.iter().enumerate() {
            if v > self.intensities[best] {
                best = i;
            }
        }
        best
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step_minutes", "mm"])?;
        for (k, v) in self.intensities.iter().enumerate() {
            w.write_record([(k as u32 * self.step).to_string(), format!("{v:?}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads `step_minutes,mm` rows; the step is taken from the first two
    /// rows (or `duration` for a single row).
    pub fn read_csv(path: impl AsRef<std::path::Path>, return_period: f64) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let mut starts = Vec::new();
        let mut mm = Vec::new();
        for rec in r.deserialize::<(u32, f64)>() {
            let (s, v) = rec?;
            starts.push(s);
            mm.push(v);
        }
        let step = match starts.as_slice() {
            [] => return Err(Error::EmptyDomain(format!("{} has no rows", path.display()))),
            [_] => DEFAULT_STEP_MINUTES,
            [a, b, ..] => b.saturating_sub(*a),
        };
        if starts.iter().enumerate().any(|(k, &s)| s != k as u32 * step) {
            return Err(Error::Format(format!("{}: irregular time steps", path.display())));
        }
        Hyetograph::new(return_period, step * mm.len() as u32, step, mm)
    }
}

pub fn design_storm(return_period: f64, duration: u32, p: &StormParams) -> Result<Hyetograph> {
    p.validate()?;
    if !(return_period >= 1.0) || !return_period.is_finite() {
        return Err(Error::Invalid(format!("return period must be >= 1, got {return_period}")));
    }
    if duration == 0 || duration % p.step != 0 {
        return Err(Error::Invalid(format!(
            "duration {duration} is not a positive multiple of step {}",
            p.step
        )));
    }
    let steps = (duration / p.step) as usize;
    let dt = p.step as f64;
    let d = duration as f64;
    let peak = (p.peak_ratio * (steps - 1) as f64).round() as usize;
    let tp = (peak as f64 + 0.5) * dt;
    let rb = tp / d;
    let ra = 1.0 - rb;
    let depth = |w: f64| p.depth(w, return_period);
    // Cumulative depth at time t.
    let mass = |t: f64| {
        if t <= tp {
            rb * (depth(d) - depth((tp - t) / rb))
        } else {
            rb * depth(d) + ra * depth((t - tp) / ra)
        }
    };
    let mut edges: Vec<f64> = (0..=steps).map(|k| mass(k as f64 * dt)).collect();
    edges[0] = 0.0;
    edges[steps] = depth(d);
    let intensities = edges.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    Hyetograph::new(return_period, duration, p.step, intensities)
}

/// `RETURN_PERIODS` log-spaced return periods from 2 to 100 years.
pub fn return_periods() -> Vec<f64> {
    let (lo, hi) = (MIN_RETURN_PERIOD.ln(), MAX_RETURN_PERIOD.ln());
    (0..RETURN_PERIODS)
        .map(|k| match k {
            0 => MIN_RETURN_PERIOD,
            k if k + 1 == RETURN_PERIODS => MAX_RETURN_PERIOD,
            k => (lo + (hi - lo) * k as f64 / (RETURN_PERIODS - 1) as f64).exp(),
        })
        .collect()
}

/// The design event grid, duration-major.
pub fn event_set(p: &StormParams) -> Result<Vec<Hyetograph>> {
    let ts = return_periods();
    let mut out = Vec::with_capacity(ts.len() * DURATIONS.len());
    for &d in &DURATIONS {
        for &t in &ts {
            out.push(design_storm(t, d, p)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Instantaneous Chicago intensity (mm/min) at time `t`, written from the
    /// textbook before/after-peak formulas.
    fn chicago_rate(t: f64, tp: f64, r: f64, a: f64, b: f64, n: f64) -> f64 {
        let f = |tau: f64| a * ((1.0 - n) * tau + b) / (tau + b).powf(n + 1.0);
        if t < tp {
            f((tp - t) / r)
        } else {
            f((t - tp) / (1.0 - r))
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn totals_match_idf_depth() {
        let p = StormParams::default();
        for &d in &DURATIONS {
            for t in [2.0, 10.0, 100.0] {
                let h = design_storm(t, d, &p).unwrap();
                let want = d as f64 * p.scale(t) / (d as f64 + p.b).powf(p.n);
                assert!(((h.total() - want) / want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn steps_match_quadrature_of_the_chicago_curve() {
        let p = StormParams::default();
        let h = design_storm(25.0, 240, &p).unwrap();
        let steps = h.steps();
        let peak = (0.4 * (steps - 1) as f64).round();
        let tp = (peak + 0.5) * 10.0;
        let r = tp / 240.0;
        let a = p.scale(25.0);
        let mut total = 0.0;
        for (k, &v) in h.intensities.iter().enumerate() {
            let (t0, t1) = (k as f64 * 10.0, (k + 1) as f64 * 10.0);
            let q = if t0 < tp && tp < t1 {
                simpson(|t| chicago_rate(t, tp, r, a, p.b, p.n), t0, tp, 2000)
                    + simpson(|t| chicago_rate(t, tp, r, a, p.b, p.n), tp, t1, 2000)
            } else {
                simpson(|t| chicago_rate(t, tp, r, a, p.b, p.n), t0, t1, 2000)
            };
            assert!((v - q).abs() < 1e-8 * q.max(1.0), "step {k}: {v} vs {q}");
            total += q;
        }
        // Duration times the average IDF intensity.
        let avg = p.intensity(240.0, 25.0);
        assert!((total - 240.0 * avg).abs() < 1e-7 * total);
    }

    #[test]
    fn peak_position_and_maximum() {
        let p = StormParams::default();
        for &d in &DURATIONS {
            let h = design_storm(7.0, d, &p).unwrap();
            let want = (0.4 * (h.steps() - 1) as f64).round() as usize;
            assert_eq!(h.peak_index(), want);
            let m = h.intensities[want];
            assert!(h.intensities.iter().enumerate().all(|(k, &v)| k == want || v < m));
        }
    }

    #[test]
    fn depth_increases_with_return_period() {
        let p = StormParams::default();
        for &d in &DURATIONS {
            let tot: Vec<f64> = return_periods()
                .iter()
                .map(|&t| design_storm(t, d, &p).unwrap().total())
                .collect();
            assert!(tot.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn hyetograph_scales_linearly_with_idf_scale() {
        let p = StormParams::default();
        let (a, b) = (design_storm(2.0, 120, &p).unwrap(), design_storm(50.0, 120, &p).unwrap());
        let k = p.scale(50.0) / p.scale(2.0);
        for (x, y) in a.intensities.iter().zip(&b.intensities) {
            assert!((y - k * x).abs() < 1e-12 * y);
        }
    }

    #[test]
    fn event_grid() {
        let ev = event_set(&StormParams::default()).unwrap();
        assert_eq!(ev.len(), 90);
        let ts: Vec<f64> = ev.iter().map(|h| h.return_period).collect();
        assert_eq!(ts.iter().cloned().fold(f64::INFINITY, f64::min), 2.0);
        assert_eq!(ts.iter().cloned().fold(0.0, f64::max), 100.0);
        let mut ds: Vec<u32> = ev.iter().map(|h| h.duration).collect();
        ds.dedup();
        assert_eq!(ds, vec![120, 240, 360]);
        for h in &ev {
            assert_eq!(h.steps(), h.duration as usize / 10);
        }
    }

    #[test]
    fn bad_inputs() {
        let p = StormParams::default();
        assert!(design_storm(0.5, 120, &p).is_err());
        assert!(design_storm(2.0, 125, &p).is_err());
        let q = StormParams { n: 2.0, ..p };
        assert!(design_storm(2.0, 120, &q).is_err());
        assert!(Hyetograph::new(2.0, 30, 10, vec![1.0, -1.0, 0.0]).is_err());
        assert!(Hyetograph::new(2.0, 30, 10, vec![1.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = design_storm(13.0, 120, &StormParams::default()).unwrap();
        h.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step_minutes,mm\n0,"));
        assert_eq!(Hyetograph::read_csv(&path, 13.0).unwrap(), h);
    }
}
