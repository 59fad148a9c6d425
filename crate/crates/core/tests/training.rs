mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use cadm::cli::{cmd_train, new_model};
use cadm::data::{generate_synthetic, TensorBatch};
use cadm::predictor::{CadmModel, NoisePredictor, PredictorConfig};
use cadm::rng::stream;
use cadm::schedule::{make_linear_schedule, q_sample};
use cadm::training::{
    checkpoint_path, diffusion_loss, draw_noise, grad_check, grad_check_model, loss_from_draws, Checkpoint, Trainer,
};
use cadm::Result;

/// Returns the true noise recovered from `x_t` and the clean labels it was
/// built from, plus a constant offset.
struct Oracle {
    x0: Tensor,
    abar: Vec<f64>,
    offset: f64,
}

impl NoisePredictor for Oracle {
    type Cond = ();

    fn condition(&self, _: &Tensor, _: &Tensor) -> Result<()> {
        Ok(())
    }

    fn predict(&self, x_t: &Tensor, _: &(), ts: &[usize]) -> Result<Tensor> {
        let mut out = Vec::new();
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.abar[t - 1];
            let e = ((x_t.get(i)? - (self.x0.get(i)? * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
            out.push((e + self.offset)?);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    fn repeat(&self, _: &(), _: usize) -> Result<()> {
        Ok(())
    }
}

fn batch(n: usize, size: usize, dtype: DType) -> TensorBatch {
    let cfg = cadm::data::SyntheticConfig {
        size,
        n_train: n,
        n_val: 1,
        n_test: 1,
        ..Default::default()
    };
    let s = generate_synthetic(&cfg).unwrap();
    let refs: Vec<_> = s.train.iter().collect();
    TensorBatch::from_pairs(&refs, dtype).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

#[test]
fn exact_noise_predictor_has_zero_loss_and_offset_costs_its_square() {
    let sched = make_linear_schedule(50, 1e-3, 0.05).unwrap();
    let b = batch(4, 16, DType::F64);
    for (offset, want) in [(0.0, 0.0), (0.3, 0.09), (-1.5, 2.25)] {
        let oracle = Oracle {
            x0: b.x0.clone(),
            abar: sched.alpha_bars().to_vec(),
            offset,
        };
        let loss = scalar(&diffusion_loss(&oracle, &b, &sched, &mut stream(5, &[])).unwrap());
        assert!((loss - want).abs() < 1e-9, "offset {offset}: {loss}");
    }
}

#[test]
fn loss_matches_independent_pipeline() {
    let cfg = PredictorConfig {
        base_channels: 8,
        image_size: 16,
        time_embed_dim: 16,
        ..Default::default()
    };
    let model = CadmModel::new(&cfg, 20, DType::F64, 1).unwrap();
    model.randomize_output_head(2).unwrap();
    let sched = make_linear_schedule(20, 1e-3, 0.1).unwrap();
    let b = batch(3, 16, DType::F64);
    let draw = draw_noise(&mut stream(9, &[]), 3, (16, 16), 20, DType::F64).unwrap();
    let got = scalar(&loss_from_draws(&model, &b, &draw, &sched).unwrap());

    let mut total = 0.0;
    for i in 0..3 {
        let x0 = b.x0.get(i).unwrap().unsqueeze(0).unwrap();
        let eps = draw.eps.get(i).unwrap().unsqueeze(0).unwrap();
        let x_t = q_sample(&x0, draw.ts[i], &eps, &sched).unwrap();
        let a = b.image_a.get(i).unwrap().unsqueeze(0).unwrap();
        let bb = b.image_b.get(i).unwrap().unsqueeze(0).unwrap();
        let pred = model.predict_noise(&x_t, &a, &bb, &[draw.ts[i]]).unwrap();
        let d: Vec<f64> = (pred - eps).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        total += d.iter().map(|v| v * v).sum::<f64>();
    }
    let want = total / (3 * 16 * 16) as f64;
    assert!((got - want).abs() <= 1e-6 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn grad_check_on_linear_objective_is_tight() {
    let w = Var::from_vec(vec![0.5f64, -1.0, 2.0, 0.25], 4, &Device::Cpu).unwrap();
    let c = Tensor::new(&[3.0f64, -2.0, 0.5, 7.0], &Device::Cpu).unwrap();
    let vars = BTreeMap::from([("w".to_string(), w.clone())]);
    let report = grad_check(&vars, || Ok((w.as_tensor() * &c)?.sum_all()?), 20, 1e-4, 0).unwrap();
    assert!(report.max_rel_err <= 1e-6, "{}", report.max_rel_err);
}

#[test]
fn coarse_difference_step_is_less_accurate() {
    let cfg = PredictorConfig {
        base_channels: 8,
        image_size: 16,
        time_embed_dim: 16,
        ..Default::default()
    };
    let model = CadmModel::new(&cfg, 10, DType::F64, 3).unwrap();
    model.randomize_output_head(4).unwrap();
    let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
    let b = batch(2, 16, DType::F64);
    let draw = draw_noise(&mut stream(1, &[]), 2, (16, 16), 10, DType::F64).unwrap();
    let fine = grad_check_model(&model, &b, &draw, &sched, 30, 1e-4, 7).unwrap();
    let coarse = grad_check_model(&model, &b, &draw, &sched, 30, 1e-2, 7).unwrap();
    assert!(fine.max_rel_err <= 1e-3, "{}", fine.max_rel_err);
    assert!(coarse.max_rel_err > fine.max_rel_err);
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.train.epochs = 0;
    let before = new_model(&cfg).unwrap().params().snapshot();
    let (trainer, logs) = cmd_train(&cfg, None).unwrap();
    assert!(logs.is_empty());
    let after = trainer.model().params().snapshot();
    for (name, t) in &before {
        let a: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = after[name].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(straight.path());
    let (full, logs) = cmd_train(&cfg, None).unwrap();
    assert_eq!(logs.len(), 2);

    let first = tempfile::tempdir().unwrap();
    let mut one = common::tiny_config(first.path());
    one.train.epochs = 1;
    cmd_train(&one, None).unwrap();
    let mut ckpt = Checkpoint::load(&checkpoint_path(&first.path().join("checkpoints"), 1)).unwrap();
    assert_eq!(ckpt.epochs_done, 1);
    ckpt.train.epochs = 2;
    let second = tempfile::tempdir().unwrap();
    let saved = second.path().join("epoch_001.safetensors");
    ckpt.save(&saved).unwrap();
    let mut cont = common::tiny_config(second.path());
    cont.train.epochs = 2;
    let (resumed, rlogs) = cmd_train(&cont, Some(&saved)).unwrap();
    assert_eq!(rlogs.len(), 1);
    assert_eq!(rlogs[0].train_loss.to_bits(), logs[1].train_loss.to_bits());
    let (a, b) = (full.model().params().snapshot(), resumed.model().params().snapshot());
    for (name, t) in &a {
        let x: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let y: Vec<f32> = b[name].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let trainer = Trainer::new(new_model(&cfg).unwrap(), cfg.schedule, cfg.train.clone()).unwrap();
    let path = dir.path().join("c.safetensors");
    trainer.checkpoint().save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.predictor, cfg.model);
    assert_eq!(back.train, cfg.train);
    let m = back.model().unwrap();
    assert_eq!(m.params().num_parameters(), trainer.model().params().num_parameters());
    assert!(Checkpoint::load(&dir.path().join("missing.safetensors")).is_err());
}
