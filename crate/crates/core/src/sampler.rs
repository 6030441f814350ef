//! Inference: backward displacement with an average field, forward Euler with an
//! instantaneous field, and end-to-end timing.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{AverageField, FieldError, FieldQuery, InstantaneousField, TimeReversed};
use crate::frontend::{Frontend, FrontendError, Waveform};
use crate::path::{reverse_init, PathConfig, PathError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Backward displacement `x ← x − Δ·u(x, r, t)`.
    Displacement,
    /// Forward Euler on the instantaneous field.
    Euler,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Displacement => "displacement",
            SamplerMode::Euler => "euler",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub nfe: usize,
    pub t_rev: f64,
    pub t_eps: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Displacement,
            nfe: 1,
            t_rev: 1.0,
            t_eps: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<SamplerSchedule> {
        match self.mode {
            SamplerMode::Displacement => {
                SamplerSchedule::displacement(self.t_rev, self.t_eps, self.nfe)
            }
            SamplerMode::Euler => SamplerSchedule::euler(self.nfe),
        }
    }
}

/// Time grid plus its mode. Displacement grids decrease from `T_rev` to `t_ε`;
/// Euler grids increase from 0 to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    mode: SamplerMode,
    grid: Vec<f64>,
}

impl SamplerSchedule {
    /// Uniform decreasing grid with `n` intervals.
    pub fn displacement(t_rev: f64, t_eps: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SamplerError::Schedule("need at least one step".into()));
        }
        let grid = (0..=n)
            .map(|k| {
                if k == n {
                    t_eps
                } else {
                    t_rev + (t_eps - t_rev) * k as f64 / n as f64
                }
            })
            .collect();
        Self::from_grid(SamplerMode::Displacement, grid)
    }

    /// Uniform ascending grid on `[0, 1]` with `n` intervals.
    pub fn euler(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SamplerError::Schedule("need at least one step".into()));
        }
        let grid = (0..=n)
            .map(|k| if k == n { 1.0 } else { k as f64 / n as f64 })
            .collect();
        Self::from_grid(SamplerMode::Euler, grid)
    }

    pub fn from_grid(mode: SamplerMode, grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(SamplerError::Schedule(
                "grid needs at least two points".into(),
            ));
        }
        if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(SamplerError::Schedule(format!(
                "grid leaves [0, 1]: {grid:?}"
            )));
        }
        let ok = match mode {
            SamplerMode::Displacement => grid.windows(2).all(|w| w[0] > w[1]),
            SamplerMode::Euler => {
                grid.windows(2).all(|w| w[0] < w[1])
                    && grid[0] == 0.0
                    && *grid.last().expect("len ≥ 2") == 1.0
            }
        };
        if !ok {
            return Err(SamplerError::Schedule(match mode {
                SamplerMode::Displacement => {
                    format!("displacement grid must strictly decrease: {grid:?}")
                }
                SamplerMode::Euler => {
                    format!("euler grid must increase strictly from 0 to 1: {grid:?}")
                }
            }));
        }
        Ok(Self { mode, grid })
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn nfe(&self) -> usize {
        self.grid.len() - 1
    }
}

/// One displacement `x − (t_k − t_{k+1})·u(x, r = t_{k+1}, t = t_k | y)`.
pub fn displace_step<F: AverageField + ?Sized>(
    field: &F,
    x: &Tensor,
    y: &Tensor,
    t_k: f64,
    t_k1: f64,
) -> Result<Tensor> {
    if !(t_k > t_k1) {
        return Err(SamplerError::Schedule(format!(
            "displacement needs t_k > t_k1, got {t_k} <= {t_k1}"
        )));
    }
    let u = field.forward(&FieldQuery::uniform(x.clone(), y.clone(), t_k1, t_k)?)?;
    let mut out = x.clone();
    out.axpy(-(t_k - t_k1), &u)?;
    Ok(out)
}

/// Output state and the number of field evaluations spent.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub state: Tensor,
    pub nfe: usize,
}

/// Iterated displacement over a decreasing grid.
pub fn enhance_multi_step<F: AverageField + ?Sized>(
    field: &F,
    init: &Tensor,
    y: &Tensor,
    schedule: &SamplerSchedule,
) -> Result<Sampled> {
    if schedule.mode() != SamplerMode::Displacement {
        return Err(SamplerError::Schedule(
            "displacement sampling needs a decreasing grid".into(),
        ));
    }
    let mut x = init.clone();
    let mut nfe = 0;
    for w in schedule.grid().windows(2) {
        x = displace_step(field, &x, y, w[0], w[1])?;
        nfe += 1;
    }
    Ok(Sampled { state: x, nfe })
}

/// One displacement across the whole interval `[t_eps, t_rev]`.
pub fn enhance_single_step<F: AverageField + ?Sized>(
    field: &F,
    init: &Tensor,
    y: &Tensor,
    t_rev: f64,
    t_eps: f64,
) -> Result<Sampled> {
    Ok(Sampled {
        state: displace_step(field, init, y, t_rev, t_eps)?,
        nfe: 1,
    })
}

/// Forward Euler `x ← x + (t_i − t_{i−1})·v(x, t_{i−1})` on an ascending grid.
pub fn euler_fm<F: InstantaneousField + ?Sized>(
    field: &F,
    init: &Tensor,
    y: &Tensor,
    schedule: &SamplerSchedule,
) -> Result<Sampled> {
    if schedule.mode() != SamplerMode::Euler {
        return Err(SamplerError::Schedule(
            "euler sampling needs an ascending grid".into(),
        ));
    }
    let mut x = init.clone();
    let mut nfe = 0;
    for w in schedule.grid().windows(2) {
        let v = field.velocity(&x, y, w[0])?;
        x.axpy(w[1] - w[0], &v)?;
        nfe += 1;
    }
    Ok(Sampled { state: x, nfe })
}

/// Samples the clean estimate for conditioning `y` (rows are frames).
pub fn sample<F: AverageField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    y: &Tensor,
    path: &PathConfig,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Sampled> {
    let schedule = cfg.schedule()?;
    match cfg.mode {
        SamplerMode::Displacement => {
            let init = reverse_init(path, y, cfg.t_rev, rng)?;
            if cfg.nfe == 1 {
                enhance_single_step(field, &init, y, cfg.t_rev, cfg.t_eps)
            } else {
                enhance_multi_step(field, &init, y, &schedule)
            }
        }
        SamplerMode::Euler => {
            let init = reverse_init(path, y, 1.0, rng)?;
            euler_fm(&TimeReversed(field), &init, y, &schedule)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceResult {
    pub enhanced: Waveform,
    pub nfe: usize,
    pub wall_seconds: f64,
    /// `wall_seconds / audio_seconds`.
    pub rtf: f64,
}

/// Waveform in, waveform out: analysis, sampling, synthesis.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub frontend: Frontend,
    pub path: PathConfig,
    pub sampler: SamplerConfig,
}

impl Pipeline {
    pub fn run<F: AverageField + ?Sized, R: Rng + ?Sized>(
        &self,
        field: &F,
        noisy: &Waveform,
        rng: &mut R,
    ) -> Result<(Waveform, usize)> {
        let spec = self.frontend.analyze(noisy)?;
        let y = spec.to_tensor();
        let out = sample(field, &y, &self.path, &self.sampler, rng)?;
        let enhanced = self.frontend.synthesize(&spec.with_tensor(&out.state)?)?;
        Ok((enhanced, out.nfe))
    }

    /// One timed run.
    pub fn enhance<F: AverageField + ?Sized, R: Rng + ?Sized>(
        &self,
        field: &F,
        noisy: &Waveform,
        rng: &mut R,
    ) -> Result<EnhanceResult> {
        let start = Instant::now();
        let (enhanced, nfe) = self.run(field, noisy, rng)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        Ok(EnhanceResult {
            enhanced,
            nfe,
            wall_seconds,
            rtf: rtf(wall_seconds, noisy.duration_secs()),
        })
    }
}

pub fn rtf(wall_seconds: f64, audio_seconds: f64) -> f64 {
    wall_seconds / audio_seconds
}

pub const RTF_WARMUP_RUNS: usize = 3;
pub const RTF_MIN_RUNS: usize = 10;

/// Median end-to-end wall time over `runs` (at least 10) after 3 discarded warm-ups.
/// Every run reseeds `rng_for_run(i)` so the output is the same each time.
pub fn measure_rtf<F, R>(
    pipeline: &Pipeline,
    field: &F,
    noisy: &Waveform,
    runs: usize,
    mut rng_for_run: impl FnMut(usize) -> R,
) -> Result<EnhanceResult>
where
    F: AverageField + ?Sized,
    R: Rng,
{
    let runs = runs.max(RTF_MIN_RUNS);
    for i in 0..RTF_WARMUP_RUNS {
        pipeline.run(field, noisy, &mut rng_for_run(i))?;
    }
    let mut times = Vec::with_capacity(runs);
    let mut last = None;
    for i in 0..runs {
        let mut rng = rng_for_run(i);
        let res = pipeline.enhance(field, noisy, &mut rng)?;
        times.push(res.wall_seconds);
        last = Some(res);
    }
    let mut res = last.expect("runs >= 1");
    res.wall_seconds = median(&mut times);
    res.rtf = rtf(res.wall_seconds, noisy.duration_secs());
    Ok(res)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One JSON-lines record per enhanced utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub utterance_id: String,
    pub mode: SamplerMode,
    pub nfe: usize,
    pub rtf: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub si_sdr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noisy_si_sdr_db: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, CountingField, FieldNetwork, NetworkConfig};
    use crate::frontend::{FrontendConfig, SAMPLE_RATE};
    use crate::rng::{normal_tensor, stream, Domain};

    fn affine() -> AnalyticField {
        AnalyticField::new(
            vec![0.6, -1.1, 1.4],
            vec![0.2, -0.4, 0.0],
            vec![-0.8, 0.5, 1.2],
            vec![0.3, -0.6, 0.9],
        )
        .unwrap()
    }

    fn state() -> Tensor {
        Tensor::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]]).unwrap()
    }

    struct Constant(f64);

    impl AverageField for Constant {
        fn dim(&self) -> usize {
            3
        }
        fn forward(&self, q: &FieldQuery) -> crate::field::Result<Tensor> {
            Ok(Tensor::full(q.x.shape(), self.0))
        }
        fn forward_with_jvp(
            &self,
            q: &FieldQuery,
            _dx: &Tensor,
            _dt: f64,
        ) -> crate::field::Result<(Tensor, Tensor)> {
            Ok((
                Tensor::full(q.x.shape(), self.0),
                Tensor::zeros(q.x.shape()),
            ))
        }
    }

    impl InstantaneousField for Constant {
        fn dim(&self) -> usize {
            3
        }
        fn velocity(&self, x: &Tensor, _y: &Tensor, _t: f64) -> crate::field::Result<Tensor> {
            Ok(Tensor::full(x.shape(), self.0))
        }
    }

    #[test]
    fn schedules() {
        let s = SamplerSchedule::displacement(1.0, 0.0, 4).unwrap();
        assert_eq!(s.grid(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(s.nfe(), 4);
        let e = SamplerSchedule::euler(2).unwrap();
        assert_eq!(e.grid(), &[0.0, 0.5, 1.0]);
        assert!(SamplerSchedule::displacement(1.0, 0.0, 0).is_err());
        assert!(
            SamplerSchedule::from_grid(SamplerMode::Displacement, vec![0.5, 0.5, 0.0]).is_err()
        );
        assert!(SamplerSchedule::from_grid(SamplerMode::Euler, vec![0.0, 0.6, 0.9]).is_err());
        assert!(SamplerSchedule::from_grid(SamplerMode::Displacement, vec![1.2, 0.0]).is_err());
    }

    #[test]
    fn displace_step_basics() {
        let x = state();
        let y = Tensor::zeros(x.shape());
        assert_eq!(displace_step(&Constant(0.0), &x, &y, 0.8, 0.3).unwrap(), x);
        let moved = displace_step(&Constant(2.0), &x, &y, 0.8, 0.3).unwrap();
        for (a, b) in moved.data().iter().zip(x.data()) {
            assert_eq!(*a, b - (0.8 - 0.3) * 2.0);
        }
        assert!(displace_step(&Constant(1.0), &x, &y, 0.3, 0.3).is_err());
        assert!(displace_step(&Constant(1.0), &x, &y, 0.2, 0.3).is_err());
    }

    #[test]
    fn one_call_per_step() {
        let f = CountingField::new(affine());
        let x = state();
        let y = Tensor::zeros(x.shape());
        displace_step(&f, &x, &y, 1.0, 0.5).unwrap();
        assert_eq!(f.calls(), 1);
        for n in [1, 3, 7] {
            f.reset();
            let out = enhance_multi_step(
                &f,
                &x,
                &y,
                &SamplerSchedule::displacement(1.0, 0.0, n).unwrap(),
            )
            .unwrap();
            assert_eq!(out.nfe, n);
            assert_eq!(f.calls(), n);
            f.reset();
            let out = euler_fm(&f, &x, &y, &SamplerSchedule::euler(n).unwrap()).unwrap();
            assert_eq!((out.nfe, f.calls()), (n, n));
        }
    }

    #[test]
    fn exact_step_lands_on_trajectory() {
        // Oracle: 10⁴ RK4 steps of the instantaneous field from t to r.
        let f = affine();
        let x = state();
        let y = Tensor::zeros(x.shape());
        let (t, r) = (0.9, 0.15);
        let got = displace_step(&f, &x, &y, t, r).unwrap();
        let n = 10_000;
        let h = (r - t) / n as f64;
        let mut z = x.clone();
        let mut tau = t;
        let v = |z: &Tensor, tau: f64| f.velocity_rows(z, &vec![tau; z.rows()]).unwrap();
        for _ in 0..n {
            let k1 = v(&z, tau);
            let mut a = z.clone();
            a.axpy(0.5 * h, &k1).unwrap();
            let k2 = v(&a, tau + 0.5 * h);
            let mut b = z.clone();
            b.axpy(0.5 * h, &k2).unwrap();
            let k3 = v(&b, tau + 0.5 * h);
            let mut c = z.clone();
            c.axpy(h, &k3).unwrap();
            let k4 = v(&c, tau + h);
            for i in 0..z.numel() {
                z.data_mut()[i] += h / 6.0
                    * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
            }
            tau += h;
        }
        for (a, b) in got.data().iter().zip(z.data()) {
            assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn exact_field_is_grid_independent() {
        let f = affine();
        let x = state();
        let y = Tensor::zeros(x.shape());
        let truth = f.flow(&x, 1.0, 0.0).unwrap();
        let single = enhance_single_step(&f, &x, &y, 1.0, 0.0).unwrap();
        for n in [1, 2, 4, 5, 8] {
            let out = enhance_multi_step(
                &f,
                &x,
                &y,
                &SamplerSchedule::displacement(1.0, 0.0, n).unwrap(),
            )
            .unwrap();
            if n == 1 {
                assert_eq!(out.state, single.state);
            }
            for (a, b) in out.state.data().iter().zip(truth.data()) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn euler_converges_at_first_order() {
        let f = AnalyticField::new(
            vec![0.5, -0.5, 0.3],
            vec![0.2, -0.4, 0.0],
            vec![-0.8, 0.5, 1.2],
            vec![0.3, -0.6, 0.9],
        )
        .unwrap();
        let x = state();
        let y = Tensor::zeros(x.shape());
        let truth = f.flow(&x, 0.0, 1.0).unwrap();
        let err = |n: usize| {
            let out = euler_fm(&f, &x, &y, &SamplerSchedule::euler(n).unwrap()).unwrap();
            out.state.sub(&truth).unwrap().norm_l2() / truth.norm_l2()
        };
        assert!(err(1024) < 1e-3, "{}", err(1024));
        let ratio = err(256) / err(512);
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
        assert_eq!(
            euler_fm(&Constant(0.0), &x, &y, &SamplerSchedule::euler(5).unwrap())
                .unwrap()
                .state,
            x
        );
    }

    #[test]
    fn small_step_displacement_approaches_euler() {
        // Displacement with the diagonal value replaced by v (a first-order field)
        // is Euler on the reversed time axis.
        struct Diagonal(AnalyticField);
        impl AverageField for Diagonal {
            fn dim(&self) -> usize {
                3
            }
            fn forward(&self, q: &FieldQuery) -> crate::field::Result<Tensor> {
                self.0.velocity_rows(&q.x, &q.t)
            }
            fn forward_with_jvp(
                &self,
                _q: &FieldQuery,
                _dx: &Tensor,
                _dt: f64,
            ) -> crate::field::Result<(Tensor, Tensor)> {
                unreachable!()
            }
        }
        let f = affine();
        let x = state();
        let y = Tensor::zeros(x.shape());
        let truth = f.flow(&x, 1.0, 0.0).unwrap();
        let d = Diagonal(f.clone());
        let err = |n| {
            let out = enhance_multi_step(
                &d,
                &x,
                &y,
                &SamplerSchedule::displacement(1.0, 0.0, n).unwrap(),
            )
            .unwrap();
            out.state.sub(&truth).unwrap().norm_l2()
        };
        assert!(err(2000) < err(200) / 5.0);
        assert!(err(2000) < 1e-2);
    }

    #[test]
    fn pipeline_identity_fall_through() {
        let path = PathConfig {
            sigma_min: 0.0,
            sigma_max: 0.0,
            ..PathConfig::default()
        };
        let fe = Frontend::new(&FrontendConfig::default()).unwrap();
        let net = FieldNetwork::new(&NetworkConfig::default(), 2 * 257, 0).unwrap();
        let pipe = Pipeline {
            frontend: fe.clone(),
            path,
            sampler: SamplerConfig::default(),
        };
        let mut rng = stream(0, Domain::Enhance, 0);
        let noisy = Waveform::new(
            normal_tensor(&[4000], &mut rng).scale(0.1).into_data(),
            SAMPLE_RATE,
        )
        .unwrap();
        let spec = fe.analyze(&noisy).unwrap();
        let y = spec.to_tensor();
        let out = sample(&net, &y, &pipe.path, &pipe.sampler, &mut rng).unwrap();
        assert_eq!(out.state, y);
        assert_eq!(out.nfe, 1);

        let res = pipe.enhance(&net, &noisy, &mut rng).unwrap();
        assert_eq!(res.enhanced.len(), noisy.len());
        assert!(res.rtf > 0.0);
        let err: f64 = res
            .enhanced
            .samples()
            .iter()
            .zip(noisy.samples())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9 * noisy.peak() * (noisy.len() as f64).sqrt());
    }

    #[test]
    fn median_and_rtf() {
        assert_eq!(rtf(0.1, 1.0), 0.1);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn run_record_json() {
        let rec = RunRecord {
            utterance_id: "u1".into(),
            mode: SamplerMode::Displacement,
            nfe: 1,
            rtf: 0.05,
            si_sdr_db: Some(12.0),
            noisy_si_sdr_db: None,
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert!(s.contains("\"mode\":\"displacement\""));
        assert!(!s.contains("noisy_si_sdr_db"));
        assert_eq!(serde_json::from_str::<RunRecord>(&s).unwrap(), rec);
    }
}
