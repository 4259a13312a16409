#![allow(dead_code)]

use std::path::Path;

use genctx::harness::config::{config_from_str, ExperimentConfig};

/// A corpus and model small enough to train in a few seconds.
pub const SMALL: &str = r#"
[corpus]
topics = 4
train_streams = 4
eval_streams = 2
segments_per_stream = 4
tokens_per_segment = 6
homophone_pairs = 4
topical_words = 3

[model]
d_model = 16
d_text = 8
acoustic_layers = 1
text_layers = 1
acoustic_heads = 2
text_heads = 2
ffn_mult = 2
fusion_head_dim = 8

[train]
steps = 20
batch_size = 4
seeds = [1]
checkpoints = 4
"#;

pub fn small_config(dir: &Path, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut pairs: Vec<(String, String)> = vec![
        ("paths.data_dir".into(), dir.join("data").display().to_string()),
        ("paths.out_dir".into(), dir.join("runs").display().to_string()),
    ];
    pairs.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    config_from_str(SMALL, &pairs).unwrap()
}
