//! Episodic N-way K-shot evaluation. Embeddings come from the frozen
//! backbone, get L2-normalized, and feed a small multinomial logistic
//! regression fit per episode on the support set; accuracy is measured on
//! the query set and aggregated with a 95% confidence interval.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::ci95;
use crate::model::{stack_images, Model};
use crate::rng::{self, domain};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

pub const DEFAULT_NUM_TASKS: usize = 600;
pub const DEFAULT_QUERY_PER_CLASS: usize = 15;

#[derive(Debug, Clone)]
pub struct Episode {
    pub support_indices: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// Episode label -> original class label.
    pub class_map: Vec<usize>,
}

/// N_f classes uniform without replacement, then K+Q images per class
/// without replacement; the first K go to support.
pub fn sample_episode<R: Rng>(
    dataset: &LabeledDataset,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way < 2 || k_shot < 1 {
        return Err(Error::argument("episodes need n_way >= 2 and k_shot >= 1"));
    }
    let by_class = dataset.indices_by_class();
    let need = k_shot + q_query;
    let eligible: Vec<usize> = (0..by_class.len()).filter(|&c| by_class[c].len() >= need).collect();
    if eligible.len() < n_way {
        return Err(Error::argument(format!(
            "need {n_way} classes with at least {need} images, found {}",
            eligible.len()
        )));
    }
    let class_picks = rand::seq::index::sample(rng, eligible.len(), n_way);

    let mut episode = Episode {
        support_indices: Vec::with_capacity(n_way * k_shot),
        support_labels: Vec::with_capacity(n_way * k_shot),
        query_indices: Vec::with_capacity(n_way * q_query),
        query_labels: Vec::with_capacity(n_way * q_query),
        class_map: Vec::with_capacity(n_way),
    };
    for (episode_label, pick) in class_picks.into_iter().enumerate() {
        let class = eligible[pick];
        episode.class_map.push(class);
        let pool = &by_class[class];
        let draws = rand::seq::index::sample(rng, pool.len(), need);
        for (j, d) in draws.into_iter().enumerate() {
            if j < k_shot {
                episode.support_indices.push(pool[d]);
                episode.support_labels.push(episode_label);
            } else {
                episode.query_indices.push(pool[d]);
                episode.query_labels.push(episode_label);
            }
        }
    }
    Ok(episode)
}

#[derive(Debug, Clone)]
pub struct LinearClassifier {
    /// Class weights, one row per class.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// All support embeddings were identical; predictions are uniform.
    pub degenerate: bool,
}

impl LinearClassifier {
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }
}

/// L2-regularized multinomial logistic regression on the mean log-likelihood
/// with inverse regularization strength 1.0 (bias unregularized), minimized
/// by gradient descent with backtracking line search to gradient-norm 1e-6
/// or 1000 iterations.
pub fn fit_linear_classifier(
    embeddings: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<LinearClassifier> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    if n == 0 || labels.len() != n {
        return Err(Error::argument("one label per embedding row required"));
    }
    if n < n_classes || n_classes < 2 {
        return Err(Error::argument("need at least one support point per class"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::argument(format!("label {bad} out of range")));
    }

    let first = embeddings.row(0);
    let degenerate = embeddings
        .rows()
        .into_iter()
        .all(|r| r.iter().zip(first.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

    let inv_strength = 1.0;
    let lambda = 1.0 / (inv_strength * n as f64);

    let objective_grad = |w: &Array2<f64>, b: &Array1<f64>| -> (f64, Array2<f64>, Array1<f64>) {
        let mut logits = embeddings.dot(&w.t()) + b;
        let mut nll = 0.0;
        for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[labels[i]];
            row.mapv_inplace(|v| (v - lse).exp());
            row[labels[i]] -= 1.0;
        }
        let mut gw = logits.t().dot(embeddings);
        gw.mapv_inplace(|v| v / n as f64);
        gw.scaled_add(lambda, w);
        let gb = logits.sum_axis(Axis(0)) / n as f64;
        let value = nll / n as f64 + 0.5 * lambda * w.iter().map(|&v| v * v).sum::<f64>();
        (value, gw, gb)
    };

    let mut w = Array2::zeros((n_classes, d));
    let mut b = Array1::zeros(n_classes);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for iter in 0..1000 {
        let (value, gw, gb) = objective_grad(&w, &b);
        grad_norm = (gw.iter().map(|&v| v * v).sum::<f64>()
            + gb.iter().map(|&v| v * v).sum::<f64>())
        .sqrt();
        iterations = iter;
        if grad_norm < 1e-6 {
            break;
        }
        // Armijo backtracking from a step safely above 1/L for unit inputs
        let mut step = 4.0;
        loop {
            let wt = &w - &(step * &gw);
            let bt = &b - &(step * &gb);
            let (vt, _, _) = objective_grad(&wt, &bt);
            if vt <= value - 0.5 * step * grad_norm * grad_norm || step < 1e-12 {
                w = wt;
                b = bt;
                break;
            }
            step *= 0.5;
        }
    }
    Ok(LinearClassifier { w, b, iterations, grad_norm, degenerate })
}

/// Rows scaled to unit L2 norm; zero rows stay zero.
pub fn normalize_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    x
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutcome {
    pub accuracy: f64,
    pub degenerate: bool,
}

/// Embed support and query with the frozen backbone, L2-normalize, fit the
/// per-episode classifier on support, and score the query fraction correct.
pub fn evaluate_episode(
    model: &Model<f32>,
    dataset: &LabeledDataset,
    episode: &Episode,
) -> Result<EpisodeOutcome> {
    if episode.query_indices.is_empty() {
        return Err(Error::argument("episode has no query items"));
    }
    if episode.support_indices.is_empty() {
        return Err(Error::argument("episode has no support items"));
    }
    let n_classes = episode.class_map.len();

    let embed = |indices: &[usize]| -> Result<Array2<f64>> {
        let images: Vec<_> = indices.iter().map(|&i| dataset.image_f32(i)).collect();
        let z = model.embed(&stack_images::<f32>(&images))?;
        Ok(normalize_rows(z.mapv(f64::from)))
    };
    let support = embed(&episode.support_indices)?;
    let query = embed(&episode.query_indices)?;

    let clf = fit_linear_classifier(&support, &episode.support_labels, n_classes)?;
    let predictions = clf.predict(&query);
    let correct = predictions
        .iter()
        .zip(&episode.query_labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(EpisodeOutcome {
        accuracy: correct as f64 / episode.query_labels.len() as f64,
        degenerate: clf.degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub num_tasks: usize,
    pub seed: u64,
    pub degenerate_episodes: usize,
}

impl EvalReport {
    pub fn from_accuracies(
        accuracies: Vec<f64>,
        n_way: usize,
        k_shot: usize,
        q_query: usize,
        seed: u64,
        degenerate_episodes: usize,
    ) -> Self {
        let num_tasks = accuracies.len();
        let mean = accuracies.iter().sum::<f64>() / num_tasks.max(1) as f64;
        let ci = ci95(&accuracies);
        EvalReport {
            accuracies,
            mean,
            ci95: ci,
            n_way,
            k_shot,
            q_query,
            num_tasks,
            seed,
            degenerate_episodes,
        }
    }

    /// "NN.NN ± C.CC" in percent.
    pub fn summary_line(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean * 100.0, self.ci95 * 100.0)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "n_way={} k_shot={} q_query={} num_tasks={} seed={}\n",
            self.n_way, self.k_shot, self.q_query, self.num_tasks, self.seed
        ));
        out.push_str(&format!(
            "mean={:.6} ci95={:.6} degenerate_episodes={}\n",
            self.mean, self.ci95, self.degenerate_episodes
        ));
        out.push_str("episode,accuracy\n");
        for (i, acc) in self.accuracies.iter().enumerate() {
            out.push_str(&format!("{i},{acc:.6}\n"));
        }
        out.push_str(&format!("summary: {}\n", self.summary_line()));
        out
    }
}

/// num_tasks independent episodes, each on its own derived stream so episode
/// i is identical no matter how many tasks run around it.
pub fn evaluate(
    model: &Model<f32>,
    test_set: &LabeledDataset,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    num_tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::argument("num_tasks must be at least 1"));
    }
    let mut accuracies = Vec::with_capacity(num_tasks);
    let mut degenerate_episodes = 0;
    for i in 0..num_tasks {
        let mut rng = rng::derive_rng(seed, &[domain::EPISODE, i as u64]);
        let episode = sample_episode(test_set, n_way, k_shot, q_query, &mut rng)?;
        let outcome = evaluate_episode(model, test_set, &episode)?;
        accuracies.push(outcome.accuracy);
        degenerate_episodes += usize::from(outcome.degenerate);
    }
    Ok(EvalReport::from_accuracies(
        accuracies,
        n_way,
        k_shot,
        q_query,
        seed,
        degenerate_episodes,
    ))
}
