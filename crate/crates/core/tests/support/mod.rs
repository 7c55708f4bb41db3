#![allow(dead_code)]

use std::path::{Path, PathBuf};

use protoglyph::config::RunConfig;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn defaults_dir() -> PathBuf {
    workspace_root().join("defaults")
}

/// Column header → shipped config file.
pub const COLUMNS: [(&str, &str); 6] = [
    ("ENZYMES", "enzymes.json"),
    ("Letter-High", "letter-high.json"),
    ("Reddit", "reddit.json"),
    ("TRIANGLES", "triangles.json"),
    ("COIL-DEL", "coil-del.json"),
    ("Graph-R52", "graph-r52.json"),
];

fn field(cfg: &RunConfig, name: &str) -> Option<String> {
    Some(match name {
        "lr" => cfg.lr.to_string(),
        "scaling_factor" => cfg.alpha_init.to_string(),
        "gamma0_init" => cfg.gamma0_init.to_string(),
        "beta0_init" => cfg.beta0_init.to_string(),
        "lambda_mixup" => cfg.lambda_mixup.to_string(),
        "lambda_reg" => cfg.lambda_reg.to_string(),
        "pooling" => cfg.pooling.to_string(),
        "embedding_dim" => cfg.hidden_dim.to_string(),
        "convs" => cfg.n_layers.to_string(),
        "dropout" => cfg.dropout.to_string(),
        "gin_mlp_layers" => cfg.mlp_layers.to_string(),
        _ => return None,
    })
}

fn same(expected: &str, actual: &str) -> bool {
    match (expected.parse::<f64>(), actual.parse::<f64>()) {
        (Ok(a), Ok(b)) => a == b,
        _ => expected == actual,
    }
}

/// Cells of the transcribed table that the shipped configs disagree with,
/// plus the number of cells compared.
pub fn hparams_mismatches() -> (Vec<String>, usize) {
    let table = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hparams_table.csv"))
        .expect("fixture");
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let mut problems = Vec::new();
    let mut compared = 0;
    let configs: Vec<(usize, RunConfig)> = header
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, col)| {
            let file = COLUMNS.iter().find(|(c, _)| c == col).expect("known column").1;
            (i, RunConfig::load(&defaults_dir().join(file), &[]).expect("shipped config parses"))
        })
        .collect();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        for (i, cfg) in &configs {
            let actual = field(cfg, cells[0]).unwrap_or_else(|| panic!("unknown row {}", cells[0]));
            compared += 1;
            if !same(cells[*i], &actual) {
                problems.push(format!("{} / {}: table {} vs config {}", header[*i], cells[0], cells[*i], actual));
            }
        }
    }
    (problems, compared)
}

pub mod checks;
