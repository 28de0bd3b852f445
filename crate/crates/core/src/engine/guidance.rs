use crate::config::{kv_get, KvMap};
use crate::error::{Error, Result};
use crate::generator::Branch;
use crate::kernel::RngState;

/// Guidance scales; the unconditional weight `1 - sum()` is always derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceWeights {
    pub w_s: f64,
    pub w_l: f64,
    pub w_r: f64,
    pub w_all: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            w_s: 0.5,
            w_l: 0.5,
            w_r: 0.5,
            w_all: 1.0,
        }
    }
}

impl GuidanceWeights {
    pub fn new(w_s: f64, w_l: f64, w_r: f64, w_all: f64) -> Self {
        Self { w_s, w_l, w_r, w_all }
    }

    pub fn sum(&self) -> f64 {
        self.w_s + self.w_l + self.w_r + self.w_all
    }

    /// Coefficients in combination order: unconditional, speaker, listener,
    /// anchor, all.
    pub fn coefficients(&self) -> [(Branch, f64); 5] {
        [
            (Branch::NONE, 1.0 - self.sum()),
            (Branch::SPEAKER, self.w_s),
            (Branch::LISTENER, self.w_l),
            (Branch::ANCHOR, self.w_r),
            (Branch::ALL, self.w_all),
        ]
    }

    /// Branches with a nonzero coefficient; the others need not be evaluated.
    pub fn active(&self) -> Vec<(Branch, f64)> {
        self.coefficients().into_iter().filter(|&(_, w)| w != 0.0).collect()
    }
}

/// Branch predictions; a branch whose coefficient is zero may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuidedPredictions {
    pub uncond: Option<Vec<f64>>,
    pub speaker: Option<Vec<f64>>,
    pub listener: Option<Vec<f64>>,
    pub anchor: Option<Vec<f64>>,
    pub all: Option<Vec<f64>>,
}

impl GuidedPredictions {
    fn get(&self, b: Branch) -> Option<&Vec<f64>> {
        match b {
            Branch::NONE => self.uncond.as_ref(),
            Branch::SPEAKER => self.speaker.as_ref(),
            Branch::LISTENER => self.listener.as_ref(),
            Branch::ANCHOR => self.anchor.as_ref(),
            _ => self.all.as_ref(),
        }
    }
}

/// Weighted combination of the branch predictions. Zero-weight terms are
/// skipped, so e.g. weights `(0, 0, 0, 1)` return the full-condition
/// prediction exactly.
pub fn cfg_combine(p: &GuidedPredictions, w: &GuidanceWeights) -> Result<Vec<f64>> {
    let terms = w.active();
    let mut rows = Vec::with_capacity(terms.len());
    for &(b, _) in &terms {
        rows.push(
            p.get(b)
                .ok_or_else(|| Error::Input(format!("missing prediction for branch {b:?}")))?
                .as_slice(),
        );
    }
    let dim = [&p.uncond, &p.speaker, &p.listener, &p.anchor, &p.all]
        .iter()
        .find_map(|x| x.as_ref().map(Vec::len))
        .ok_or_else(|| Error::Input("no branch predictions".into()))?;
    if [&p.uncond, &p.speaker, &p.listener, &p.anchor, &p.all]
        .iter()
        .any(|x| x.as_ref().is_some_and(|v| v.len() != dim))
    {
        return Err(Error::Shape("branch predictions differ in length".into()));
    }
    Ok(combine(&terms, &rows, dim))
}

pub(crate) fn combine(terms: &[(Branch, f64)], rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (k, (&(_, w), row)) in terms.iter().zip(rows).enumerate() {
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            if k == 0 {
                *o = w * v;
            } else {
                *o += w * v;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: GuidanceWeights,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            guidance: GuidanceWeights::default(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let g = &self.guidance;
        if [g.w_s, g.w_l, g.w_r, g.w_all].iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("guidance weights must be finite".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str, kv: &mut KvMap) {
        let mut put = |k: &str, v: String| {
            kv.insert(format!("{prefix}{k}"), v);
        };
        put("steps", self.steps.to_string());
        put("w_s", format!("{:?}", self.guidance.w_s));
        put("w_l", format!("{:?}", self.guidance.w_l));
        put("w_r", format!("{:?}", self.guidance.w_r));
        put("w_all", format!("{:?}", self.guidance.w_all));
        put("seed", self.seed.to_string());
    }

    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}{k}");
        kv_get(kv, &p("steps"), &mut self.steps)?;
        kv_get(kv, &p("w_s"), &mut self.guidance.w_s)?;
        kv_get(kv, &p("w_l"), &mut self.guidance.w_l)?;
        kv_get(kv, &p("w_r"), &mut self.guidance.w_r)?;
        kv_get(kv, &p("w_all"), &mut self.guidance.w_all)?;
        kv_get(kv, &p("seed"), &mut self.seed)?;
        Ok(())
    }

    /// Evaluation times `1, (s-1)/s, ..., 1/s`.
    pub fn times(&self) -> Vec<f64> {
        (0..self.steps)
            .map(|k| (self.steps - k) as f64 / self.steps as f64)
            .collect()
    }
}

/// Integrates from noise at `t = 1` to `t = 0`. `guided(m_t, t)` returns
/// the guided clean-frame prediction; with `v = (m_t - m0) / t` an Euler
/// step to `t'` is `m0 + (t'/t) (m_t - m0)`, so the final step lands on the
/// prediction exactly.
pub fn euler_sample(
    cfg: &SamplerConfig,
    dim: usize,
    rng: &mut RngState,
    mut guided: impl FnMut(&[f64], f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut m = rng.normals(dim);
    let times = cfg.times();
    for (k, &t) in times.iter().enumerate() {
        let m0 = guided(&m, t)?;
        if m0.len() != dim {
            return Err(Error::Shape(format!("prediction of dim {} for {dim}", m0.len())));
        }
        let next = times.get(k + 1).copied().unwrap_or(0.0);
        m = if next == 0.0 {
            m0
        } else {
            let ratio = next / t;
            m0.iter().zip(&m).map(|(&p, &x)| p + ratio * (x - p)).collect()
        };
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(u: f64, s: f64, l: f64, r: f64, a: f64) -> GuidedPredictions {
        GuidedPredictions {
            uncond: Some(vec![u]),
            speaker: Some(vec![s]),
            listener: Some(vec![l]),
            anchor: Some(vec![r]),
            all: Some(vec![a]),
        }
    }

    #[test]
    fn collapse_cases() {
        let p = preds(0.3, 1.7, -2.1, 0.9, 4.4);
        assert_eq!(
            cfg_combine(&p, &GuidanceWeights::new(0.0, 0.0, 0.0, 1.0)).unwrap(),
            vec![4.4]
        );
        assert_eq!(
            cfg_combine(&p, &GuidanceWeights::new(0.0, 0.0, 0.0, 0.0)).unwrap(),
            vec![0.3]
        );
    }

    #[test]
    fn hand_example() {
        let p = preds(0.0, 2.0, 0.0, 0.0, 0.0);
        let w = GuidanceWeights::default();
        assert_eq!(w.sum(), 2.5);
        assert_eq!(cfg_combine(&p, &w).unwrap(), vec![1.0]);
    }

    #[test]
    fn skipped_branches_may_be_absent() {
        let p = GuidedPredictions {
            all: Some(vec![1.0, 2.0]),
            ..Default::default()
        };
        assert_eq!(
            cfg_combine(&p, &GuidanceWeights::new(0.0, 0.0, 0.0, 1.0)).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(cfg_combine(&p, &GuidanceWeights::default()).is_err());
        let bad = GuidedPredictions {
            all: Some(vec![1.0]),
            uncond: Some(vec![1.0, 2.0]),
            ..Default::default()
        };
        assert!(matches!(
            cfg_combine(&bad, &GuidanceWeights::new(0.0, 0.0, 0.0, 0.5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn one_step_returns_prediction_at_t1() {
        let cfg = SamplerConfig {
            steps: 1,
            ..SamplerConfig::default()
        };
        let mut seen = Vec::new();
        let out = euler_sample(&cfg, 2, &mut RngState::new(1), |m, t| {
            seen.push(t);
            Ok(vec![m[0] * 0.5 + 1.0, -m[1]])
        })
        .unwrap();
        let noise = RngState::new(1).normals(2);
        assert_eq!(seen, vec![1.0]);
        assert_eq!(out, vec![noise[0] * 0.5 + 1.0, -noise[1]]);
    }

    #[test]
    fn constant_model_is_a_fixed_point() {
        for steps in [1, 5, 10] {
            let cfg = SamplerConfig {
                steps,
                ..SamplerConfig::default()
            };
            let out = euler_sample(&cfg, 3, &mut RngState::new(steps as u64), |_, _| {
                Ok(vec![0.25, -1.0, 3.0])
            })
            .unwrap();
            assert_eq!(out, vec![0.25, -1.0, 3.0]);
        }
    }

    #[test]
    fn schedule_avoids_zero() {
        let cfg = SamplerConfig::default();
        assert_eq!(cfg.times(), vec![1.0, 0.8, 0.6, 0.4, 0.2]);
        assert!(SamplerConfig { steps: 0, ..cfg }.validate().is_err());
    }
}
