//! Novel-class evaluation, class-similarity shift analysis and embedding
//! export.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape};
use crate::embedder::{embed_graphs, GraphBatch};
use crate::episodes::{ClassSplit, Episode, EpisodeSpec, Phase};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset};
use crate::model::{forward_episode, ForwardOptions, ModelConfig};
use crate::rng::{purpose, stream};
use crate::trainer::episode_accuracies;

pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation across episodes.
    pub std: f64,
    pub ci95_halfwidth: f64,
    pub per_episode_accuracies: Vec<f64>,
    pub wall_seconds: f64,
}

/// Sample mean, sample standard deviation (`n − 1`) and the normal 95%
/// half-width `1.96·std/√n`.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    // Shifted by the first value so constant inputs give exactly zero spread.
    let x0 = values[0];
    let shift = values.iter().map(|v| v - x0).sum::<f64>() / n;
    let mean = x0 + shift;
    let var = values.iter().map(|v| (v - x0 - shift) * (v - x0 - shift)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    Ok((mean, std, Z95 * std / n.sqrt()))
}

/// Accuracy over `n_episodes` novel-class episodes drawn from `spec.seed`.
pub fn evaluate(
    params: &ParameterStore,
    model: &ModelConfig,
    dataset: &GraphDataset,
    split: &ClassSplit,
    spec: &EpisodeSpec,
    n_episodes: usize,
    workers: usize,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    split.check_phase(dataset, spec, Phase::Test)?;
    let accs = episode_accuracies(params, model, dataset, split, Phase::Test, spec, 0, n_episodes, workers)?;
    let (mean, std, ci) = confidence_interval(&accs)?;
    Ok(EvalReport {
        n_episodes,
        mean_accuracy: mean,
        std,
        ci95_halfwidth: ci,
        per_episode_accuracies: accs,
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Unconditioned graph embeddings, one row per graph.
pub fn embed_plain(params: &ParameterStore, model: &ModelConfig, graphs: &[&Graph]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(256) {
        let batch = GraphBatch::new(chunk)?;
        let mut tape = Tape::new();
        let emb = embed_graphs(&mut tape, params, &model.embedder, &batch, None, None)?;
        let t = tape.value(emb);
        out.extend((0..t.rows()).map(|r| t.row_slice(r).to_vec()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRepresentatives {
    /// Original class labels.
    pub classes: Vec<i64>,
    pub vectors: Vec<Vec<f64>>,
    /// Classes with fewer graphs than requested, sampled with replacement.
    pub resampled: Vec<i64>,
}

/// Mean embedding of `samples_per_class` randomly drawn graphs per class.
pub fn class_representatives(
    params: &ParameterStore,
    model: &ModelConfig,
    dataset: &GraphDataset,
    classes: &[i64],
    samples_per_class: usize,
    seed: u64,
) -> Result<ClassRepresentatives> {
    if samples_per_class == 0 {
        return Err(Error::Contract("samples_per_class must be positive".into()));
    }
    let by_class = dataset.indices_by_class();
    let mut reps = ClassRepresentatives {
        classes: classes.to_vec(),
        vectors: Vec::with_capacity(classes.len()),
        resampled: Vec::new(),
    };
    for &orig in classes {
        let c = dataset
            .class_of_original(orig)
            .ok_or_else(|| Error::Split(format!("class {orig} is not in dataset {}", dataset.name)))?;
        let pool = &by_class[&c];
        let mut rng = stream(seed, &[purpose::ANALYSIS, c as u64]);
        let picks: Vec<usize> = if pool.len() >= samples_per_class {
            rand::seq::index::sample(&mut rng, pool.len(), samples_per_class)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            reps.resampled.push(orig);
            (0..samples_per_class).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        let graphs: Vec<&Graph> = picks.iter().map(|&i| &dataset.graphs[i]).collect();
        let emb = embed_plain(params, model, &graphs)?;
        let d = emb[0].len();
        let mut mean = vec![0.0; d];
        for row in &emb {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= emb.len() as f64);
        reps.vectors.push(mean);
    }
    Ok(reps)
}

/// For each class, the mean of `−‖r_i − r_j‖²` over the other classes.
pub fn mean_similarities(reps: &[Vec<f64>]) -> Result<Vec<f64>> {
    if reps.len() < 2 {
        return Err(Error::Contract("similarity analysis needs at least 2 classes".into()));
    }
    let k = reps.len();
    Ok((0..k)
        .map(|j| {
            let s: f64 = (0..k)
                .filter(|&i| i != j)
                .map(|i| -reps[i].iter().zip(&reps[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum();
            s / (k - 1) as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityShift {
    pub classes: Vec<i64>,
    pub mean_similarity_a: Vec<f64>,
    pub mean_similarity_b: Vec<f64>,
    /// `a − b` per class.
    pub diff: Vec<f64>,
    pub resampled: Vec<i64>,
}

impl SimilarityShift {
    pub fn from_similarities(classes: Vec<i64>, a: Vec<f64>, b: Vec<f64>, resampled: Vec<i64>) -> Self {
        let diff = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        SimilarityShift {
            classes,
            mean_similarity_a: a,
            mean_similarity_b: b,
            diff,
            resampled,
        }
    }

    pub fn all_positive(&self) -> bool {
        self.diff.iter().all(|&d| d > 0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,mean_similarity_a,mean_similarity_b,diff\n");
        for i in 0..self.classes.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.classes[i], self.mean_similarity_a[i], self.mean_similarity_b[i], self.diff[i]
            );
        }
        s
    }
}

/// Compares two models' per-class mean similarities on the same classes
/// and the same sampled graphs.
#[allow(clippy::too_many_arguments)]
pub fn class_similarity_shift(
    params_a: &ParameterStore,
    model_a: &ModelConfig,
    params_b: &ParameterStore,
    model_b: &ModelConfig,
    dataset: &GraphDataset,
    classes: &[i64],
    samples_per_class: usize,
    seed: u64,
) -> Result<SimilarityShift> {
    if model_a.embedder != model_b.embedder || model_a.d_in != model_b.d_in {
        return Err(Error::Contract("models must share the embedder architecture".into()));
    }
    let ra = class_representatives(params_a, model_a, dataset, classes, samples_per_class, seed)?;
    let rb = class_representatives(params_b, model_b, dataset, classes, samples_per_class, seed)?;
    Ok(SimilarityShift::from_similarities(
        classes.to_vec(),
        mean_similarities(&ra.vectors)?,
        mean_similarities(&rb.vectors)?,
        ra.resampled,
    ))
}

/// Writes `episode_id,role,class,dim0..` rows for supports, queries and
/// prototypes of each episode, using eval-mode (conditioned when the model
/// has TAE) embeddings.
pub fn export_embeddings(
    params: &ParameterStore,
    model: &ModelConfig,
    dataset: &GraphDataset,
    episodes: &[(u64, Episode)],
    out_path: &Path,
) -> Result<()> {
    let mut text = String::new();
    let d = model.embedder.output_dim();
    text.push_str("episode_id,role,class");
    for i in 0..d {
        let _ = write!(text, ",dim{i}");
    }
    text.push('\n');
    for (id, ep) in episodes {
        let mut tape = Tape::new();
        let out = forward_episode(&mut tape, params, model, dataset, ep, ForwardOptions::default())?;
        let k = ep.k_shot();
        let q = ep.queries.first().map_or(0, Vec::len);
        let blocks = [
            ("support", out.support_emb, k),
            ("query", out.query_emb, q),
            ("prototype", out.prototypes, 1),
        ];
        for (role, var, per_class) in blocks {
            let t = tape.value(var);
            for r in 0..t.rows() {
                let class = dataset.original_of(ep.classes[r / per_class]);
                let _ = write!(text, "{id},{role},{class}");
                for v in t.row_slice(r) {
                    let _ = write!(text, ",{v}");
                }
                text.push('\n');
            }
        }
    }
    std::fs::write(out_path, text).map_err(|e| Error::io(out_path, e))
}
