use std::path::{Path, PathBuf};

use a3net::config::Config;
use a3net::corpus::{generate_synthetic, Corpus, SyntheticConfig};
use a3net::training::{resolve_dictionary, Trainer};

pub fn small_config() -> Config {
    let mut c = Config::desk();
    c.model.d_model = 16;
    c.model.heads = 2;
    c.model.align_heads = 2;
    c.model.layers = 1;
    c.model.d_vis = 16;
    c.model.conv_channels = vec![4, 8];
    c.train.batch_size = 4;
    c.train.epochs = 1;
    c.train.min_freq = 1;
    c.train.val_metrics = false;
    c.decode.max_len = 12;
    c
}

/// Trains one epoch into `dir` and returns the checkpoint path and corpus.
pub fn trained_checkpoint(dir: &Path) -> (PathBuf, Corpus) {
    let corpus = generate_synthetic(5, 16, &SyntheticConfig::default()).unwrap();
    let cfg = small_config();
    let dict = resolve_dictionary(&cfg, None).unwrap();
    let mut trainer = Trainer::new(cfg, dict, &corpus).unwrap();
    trainer.fit(&corpus, Some(dir), |_| {}).unwrap();
    (dir.join("last.ckpt"), corpus)
}
