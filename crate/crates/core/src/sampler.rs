//! Reverse-chain sampling and ensemble inference.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BitemporalPair, Mask, TensorBatch};
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionCounts};
use crate::predictor::NoisePredictor;
use crate::rng::{normals, stream};
use crate::schedule::{p_sample, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Reverse steps; fewer than the model schedule respaces the chain.
    pub steps: usize,
    pub ensemble_size: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Pairs pushed through the network together.
    pub pair_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            ensemble_size: 5,
            threshold: 0.5,
            seed: 0,
            pair_batch: 4,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.ensemble_size == 0 || self.pair_batch == 0 {
            return Err(Error::InvalidArgument(
                "steps, ensemble_size and pair_batch must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// The chain actually walked: possibly respaced, with the model timestep
/// used at each of its steps.
#[derive(Debug, Clone)]
pub struct ReverseChain {
    pub schedule: NoiseSchedule,
    pub model_ts: Vec<usize>,
}

impl ReverseChain {
    pub fn new(model_schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        let (schedule, model_ts) = model_schedule.respaced(steps)?;
        Ok(Self { schedule, model_ts })
    }

    pub fn len(&self) -> usize {
        self.model_ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ts.is_empty()
    }
}

pub(crate) fn draw(rngs: &mut [ChaCha8Rng], shape: (usize, usize), dtype: DType) -> Result<Tensor> {
    let (h, w) = shape;
    let mut v = Vec::with_capacity(rngs.len() * h * w);
    for r in rngs.iter_mut() {
        v.extend(normals(r, h * w));
    }
    Ok(Tensor::from_vec(v, (rngs.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs the reverse chain from `x_T ~ N(0, I)` down to `x_0`.
///
/// Batch element `i` draws all its noise from `rngs[i]`, so a sample does not
/// depend on what else shares its batch.
pub fn sample_chain<P: NoisePredictor>(
    model: &P,
    cond: &P::Cond,
    chain: &ReverseChain,
    rngs: &mut [ChaCha8Rng],
    shape: (usize, usize),
    dtype: DType,
) -> Result<Tensor> {
    sample_chain_until(model, cond, chain, rngs, shape, dtype, 0)
}

/// Like [`sample_chain`] but stops once `x_stop` is reached.
pub fn sample_chain_until<P: NoisePredictor>(
    model: &P,
    cond: &P::Cond,
    chain: &ReverseChain,
    rngs: &mut [ChaCha8Rng],
    shape: (usize, usize),
    dtype: DType,
    stop: usize,
) -> Result<Tensor> {
    let b = rngs.len();
    let mut x = draw(rngs, shape, dtype)?;
    for i in ((stop + 1)..=chain.len()).rev() {
        let ts = vec![chain.model_ts[i - 1]; b];
        // Detached so the chain does not retain every step's autograd graph.
        let eps = model.predict(&x, cond, &ts)?.detach();
        let z = if i > 1 { Some(draw(rngs, shape, dtype)?) } else { None };
        x = p_sample(&x, i, &eps, &chain.schedule, z.as_ref())?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Ensemble mean mapped to `[0, 1]`.
    pub soft: Vec<f32>,
    pub binary: Mask,
}

/// Member outputs for a batch of pairs, `members[pair][member]` holding the
/// flattened `x_0` of that draw.
pub fn sample_members<P: NoisePredictor>(
    model: &P,
    image_a: &Tensor,
    image_b: &Tensor,
    keys: &[u64],
    chain: &ReverseChain,
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let (b, _, h, w) = image_a.dims4()?;
    if keys.len() != b {
        return Err(Error::Shape(format!("{} keys for {b} pairs", keys.len())));
    }
    let m = cfg.ensemble_size;
    let cond = model.condition(image_a, image_b)?;
    let cond = model.repeat(&cond, m)?;
    let mut rngs: Vec<ChaCha8Rng> = keys
        .iter()
        .flat_map(|&k| (0..m as u64).map(move |j| (k, j)))
        .map(|(k, j)| stream(cfg.seed, &[k, j]))
        .collect();
    let x0 = sample_chain(model, &cond, chain, &mut rngs, (h, w), image_a.dtype())?;
    let flat: Vec<f64> = x0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let per = h * w;
    Ok((0..b)
        .map(|p| {
            (0..m)
                .map(|j| flat[(p * m + j) * per..(p * m + j + 1) * per].to_vec())
                .collect()
        })
        .collect())
}

/// Arithmetic mean of the member maps, then thresholding.
pub fn aggregate(name: &str, members: &[Vec<f64>], h: usize, w: usize, threshold: f64) -> Result<ChangeMap> {
    if members.is_empty() || members.iter().any(|m| m.len() != h * w) {
        return Err(Error::Shape("ensemble members must be non-empty and sized h*w".into()));
    }
    let n = members.len() as f64;
    let soft: Vec<f32> = (0..h * w)
        .map(|i| {
            let mean = members.iter().map(|m| m[i]).sum::<f64>() / n;
            ((mean + 1.0) / 2.0).clamp(0.0, 1.0) as f32
        })
        .collect();
    let bin = soft.iter().map(|&s| u8::from(f64::from(s) >= threshold)).collect();
    Ok(ChangeMap {
        name: name.to_string(),
        height: h,
        width: w,
        soft,
        binary: Mask::from_vec(1, h, w, bin)?,
    })
}

/// Ensemble change maps for a list of pairs, processed `pair_batch` at a time.
pub fn predict_pairs<P: NoisePredictor>(
    model: &P,
    model_schedule: &NoiseSchedule,
    pairs: &[&BitemporalPair],
    cfg: &SamplerConfig,
    dtype: DType,
) -> Result<Vec<ChangeMap>> {
    cfg.validate()?;
    let chain = ReverseChain::new(model_schedule, cfg.steps)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(cfg.pair_batch) {
        let batch = TensorBatch::from_pairs(chunk, dtype)?;
        let keys: Vec<u64> = chunk.iter().map(|p| p.key()).collect();
        let members = sample_members(model, &batch.image_a, &batch.image_b, &keys, &chain, cfg)?;
        for (p, mem) in chunk.iter().zip(&members) {
            let (h, w) = (p.label.height, p.label.width);
            out.push(aggregate(&p.name, mem, h, w, cfg.threshold)?);
        }
    }
    Ok(out)
}

/// Per-pair confusion counts of predicted maps against labels.
pub fn score_maps(maps: &[ChangeMap], pairs: &[&BitemporalPair]) -> Result<Vec<ConfusionCounts>> {
    maps.iter()
        .zip(pairs)
        .map(|(m, p)| confusion(&m.binary, &p.label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    /// Predicts noise as a fixed multiple of `x_t`.
    struct Linear(f64);

    impl NoisePredictor for Linear {
        type Cond = ();
        fn condition(&self, _: &Tensor, _: &Tensor) -> Result<()> {
            Ok(())
        }
        fn predict(&self, x: &Tensor, _: &(), _: &[usize]) -> Result<Tensor> {
            Ok(x.affine(self.0, 0.0)?)
        }
        fn repeat(&self, _: &(), _: usize) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn chain_matches_hand_rolled_recursion() {
        let sched = make_linear_schedule(5, 0.05, 0.3).unwrap();
        let chain = ReverseChain::new(&sched, 5).unwrap();
        let model = Linear(0.3);
        let mut rngs = vec![stream(9, &[1])];
        let got: Vec<f64> = sample_chain(&model, &(), &chain, &mut rngs, (2, 3), DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();

        let mut r = stream(9, &[1]);
        let mut x = normals(&mut r, 6);
        for t in (1..=5).rev() {
            let (beta, ab) = (sched.beta(t), sched.alpha_bar(t));
            let z = if t > 1 { normals(&mut r, 6) } else { vec![0.0; 6] };
            let sigma = sched.posterior_var(t).sqrt();
            for i in 0..6 {
                let eps = 0.3 * x[i];
                x[i] = (x[i] - beta / (1.0 - ab).sqrt() * eps) / (1.0 - beta).sqrt() + sigma * z[i];
            }
        }
        for (a, b) in got.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_soft_map_is_member_mean() {
        let members = vec![vec![1.0, -1.0, 0.2, 3.0], vec![-1.0, -1.0, 0.4, 3.0], vec![1.0, -1.0, 0.0, -5.0]];
        let m = aggregate("p", &members, 2, 2, 0.5).unwrap();
        let want = [(1.0 / 3.0 + 1.0) / 2.0, 0.0, 0.6, ((1.0 / 3.0) + 1.0) / 2.0];
        for (s, w) in m.soft.iter().zip(want) {
            assert!((f64::from(*s) - w).abs() < 1e-6);
        }
        assert_eq!(m.binary.data, vec![1, 0, 1, 1]);
    }

    #[test]
    fn samples_do_not_depend_on_batch_neighbours() {
        let sched = make_linear_schedule(4, 0.1, 0.2).unwrap();
        let cfg = SamplerConfig {
            steps: 4,
            ensemble_size: 2,
            ..Default::default()
        };
        let chain = ReverseChain::new(&sched, 4).unwrap();
        let imgs = |b| Tensor::zeros((b, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let both = sample_members(&Linear(0.1), &imgs(2), &imgs(2), &[11, 22], &chain, &cfg).unwrap();
        let solo = sample_members(&Linear(0.1), &imgs(1), &imgs(1), &[22], &chain, &cfg).unwrap();
        assert_eq!(both[1], solo[0]);
        assert_ne!(both[0][0], both[0][1]);
    }

    #[test]
    fn bad_config_rejected() {
        for cfg in [
            SamplerConfig { steps: 0, ..Default::default() },
            SamplerConfig { ensemble_size: 0, ..Default::default() },
            SamplerConfig { threshold: 1.5, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
