mod support;

use protoglyph::config::RunConfig;
use protoglyph::embedder::Pooling;

#[test]
fn shipped_defaults_match_the_hyperparameter_table() {
    let (problems, compared) = support::hparams_mismatches();
    assert_eq!(compared, 66);
    assert!(problems.is_empty(), "{problems:#?}");
}

#[test]
fn coil_del_defaults_resolve() {
    let c = RunConfig::load(&support::defaults_dir().join("coil-del.json"), &[]).unwrap();
    assert_eq!(c.lr, 1e-4);
    assert_eq!(c.alpha_init, 7.5);
    assert_eq!((c.lambda_mixup, c.lambda_reg), (0.1, 0.1));
    assert_eq!((c.n_layers, c.hidden_dim), (2, 64));
    assert_eq!(c.dropout, 0.0);
    assert_eq!(c.pooling, Pooling::Mean);
    assert_eq!(c.n_way, 5);
}

#[test]
fn reddit_uses_smaller_batches() {
    let c = RunConfig::load(&support::defaults_dir().join("reddit.json"), &[]).unwrap();
    assert_eq!(c.batch_episodes, 8);
}

#[test]
fn every_shipped_config_validates() {
    for entry in std::fs::read_dir(support::defaults_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.train_config().unwrap();
    }
}

#[test]
fn split_tables_are_disjoint_in_every_config() {
    for (_, file) in support::COLUMNS {
        let c = RunConfig::load(&support::defaults_dir().join(file), &[]).unwrap();
        let mut all: Vec<i64> = c.split_base.iter().chain(&c.split_val).chain(&c.split_novel).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "{file}");
    }
}
