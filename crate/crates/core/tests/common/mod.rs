#![allow(dead_code)]

use std::path::Path;

use cadm::config::RunConfig;

/// A configuration small enough to train in a second or two.
pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule.steps = 10;
    cfg.schedule.reference_steps = 100;
    cfg.model.base_channels = 8;
    cfg.model.time_embed_dim = 16;
    cfg.model.image_size = 16;
    cfg.data.synthetic.size = 16;
    cfg.data.synthetic.n_train = 6;
    cfg.data.synthetic.n_val = 2;
    cfg.data.synthetic.n_test = 3;
    cfg.data.synthetic.min_shapes = 1;
    cfg.data.synthetic.max_shapes = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 3;
    cfg.train.val_steps = 2;
    cfg.train.learning_rate = 1e-3;
    cfg.sampler.steps = 4;
    cfg.sampler.ensemble_size = 2;
    cfg.output.dir = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}
