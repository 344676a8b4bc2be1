use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

use super::mlp::{Layer, Mlp};
use super::net::{InputNormalization, SurrogateNet, LAYER_SIZES};

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-2,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            cosine_decay: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Mean squared point distance (m²) on the training split, before training.
    pub initial_loss: f64,
    /// Per-epoch training loss (m² per point).
    pub epoch_losses: Vec<f64>,
    pub train_loss: f64,
    pub test_loss: f64,
    /// Mean Euclidean distance per point on the held-out split (m).
    pub test_mean_point_error: f64,
    pub split: (f64, f64),
    pub train_records: usize,
    pub test_records: usize,
    pub seed: u64,
}

struct Split {
    x: DMatrix<f32>,
    y: DMatrix<f32>,
}

impl Split {
    fn gather(x: &DMatrix<f32>, y: &DMatrix<f32>, idx: &[usize]) -> Self {
        Self {
            x: DMatrix::from_fn(x.nrows(), idx.len(), |r, c| x[(r, idx[c])]),
            y: DMatrix::from_fn(y.nrows(), idx.len(), |r, c| y[(r, idx[c])]),
        }
    }
}

/// Mean squared point distance and mean point distance of `net` on a split.
fn evaluate(mlp: &Mlp<f32>, split: &Split) -> (f64, f64) {
    if split.x.ncols() == 0 {
        return (f64::NAN, f64::NAN);
    }
    let pred = mlp.forward(&split.x);
    let mut sq = 0.0f64;
    let mut dist = 0.0f64;
    let mut points = 0usize;
    for (p, t) in pred.as_slice().chunks_exact(3).zip(split.y.as_slice().chunks_exact(3)) {
        let d2: f64 = (0..3).map(|i| ((p[i] - t[i]) as f64).powi(2)).sum();
        sq += d2;
        dist += d2.sqrt();
        points += 1;
    }
    (sq / points as f64, dist / points as f64)
}

enum State {
    Sgd { velocity: Vec<Layer<f32>> },
    Adam { m: Vec<Layer<f32>>, v: Vec<Layer<f32>>, t: i32 },
}

fn zeros_like(mlp: &Mlp<f32>) -> Vec<Layer<f32>> {
    mlp.layers.iter().map(|l| Layer::zeros(l.inputs(), l.outputs())).collect()
}

fn step(mlp: &mut Mlp<f32>, grads: &[Layer<f32>], state: &mut State, optimizer: Optimizer, lr: f64) {
    let lr = lr as f32;
    match (state, optimizer) {
        (State::Sgd { velocity }, Optimizer::Sgd { momentum }) => {
            let mu = momentum as f32;
            for ((layer, g), v) in mlp.layers.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                v.weight.zip_apply(&g.weight, |v, g| *v = mu * *v - lr * g);
                v.bias.zip_apply(&g.bias, |v, g| *v = mu * *v - lr * g);
                layer.weight += &v.weight;
                layer.bias += &v.bias;
            }
        }
        (State::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, eps }) => {
            *t += 1;
            let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
            let c1 = 1.0 - b1.powi(*t);
            let c2 = 1.0 - b2.powi(*t);
            for (((layer, g), m), v) in mlp.layers.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                };
                update(
                    layer.weight.as_mut_slice(),
                    g.weight.as_slice(),
                    m.weight.as_mut_slice(),
                    v.weight.as_mut_slice(),
                );
                update(
                    layer.bias.as_mut_slice(),
                    g.bias.as_slice(),
                    m.bias.as_mut_slice(),
                    v.bias.as_mut_slice(),
                );
            }
        }
        _ => unreachable!("optimizer state matches the configured optimizer"),
    }
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(SurrogateNet, TrainReport)> {
    train_with_progress(dataset, config, |_, _| {})
}

/// Fits the surrogate on a seeded 0.8/0.2 split; `progress` sees each epoch's
/// training loss.
pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(SurrogateNet, TrainReport)> {
    if dataset.len() < 2 {
        return Err(Error::InsufficientData(format!("{} training records", dataset.len())));
    }
    if 3 * dataset.points_per_traj != LAYER_SIZES[3] {
        return Err(Error::Parameter(format!(
            "dataset has {} points per trajectory, the network emits {}",
            dataset.points_per_traj,
            LAYER_SIZES[3] / 3
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Parameter("batch size and learning rate must be positive".into()));
    }
    let normalization = InputNormalization::default();
    let targets: Vec<_> = (0..dataset.len()).map(|i| dataset.target(i)).collect();
    let x = normalization.matrix(&targets);
    let y = DMatrix::from_column_slice(dataset.record_len(), dataset.len(), &dataset.points);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((dataset.len() as f64) * TRAIN_FRACTION).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train);
    let train_set = Split::gather(&x, &y, train_idx);
    let test_set = Split::gather(&x, &y, test_idx);

    let mut mlp = Mlp::<f32>::init(&LAYER_SIZES, &mut rng);
    // Start from the mean trajectory so the network only learns deviations.
    let mean: DVector<f32> = train_set.y.column_mean();
    mlp.layers.last_mut().expect("layers").bias = mean;

    let initial_loss = evaluate(&mlp, &train_set).0;
    let mut state = match config.optimizer {
        Optimizer::Sgd { .. } => State::Sgd {
            velocity: zeros_like(&mlp),
        },
        Optimizer::Adam { .. } => State::Adam {
            m: zeros_like(&mlp),
            v: zeros_like(&mlp),
            t: 0,
        },
    };

    let mut epoch_order: Vec<usize> = (0..n_train).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = if config.cosine_decay {
            config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos())
        } else {
            config.learning_rate
        };
        epoch_order.shuffle(&mut rng);
        for batch in epoch_order.chunks(config.batch_size) {
            let b = Split::gather(&train_set.x, &train_set.y, batch);
            let (_, grads) = mlp.loss_and_gradients(&b.x, &b.y);
            step(&mut mlp, &grads, &mut state, config.optimizer, lr);
        }
        let loss = evaluate(&mlp, &train_set).0;
        if !loss.is_finite() || !mlp.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        epoch_losses.push(loss);
        progress(epoch, loss);
    }

    let train_loss = epoch_losses.last().copied().unwrap_or(initial_loss);
    let (test_loss, test_mean_point_error) = evaluate(&mlp, &test_set);
    let net = SurrogateNet::new(mlp, normalization, dataset.dt as f64, config.seed)?;
    let report = TrainReport {
        epochs: config.epochs,
        initial_loss,
        epoch_losses,
        train_loss,
        test_loss,
        test_mean_point_error,
        split: (TRAIN_FRACTION, 1.0 - TRAIN_FRACTION),
        train_records: n_train,
        test_records: dataset.len() - n_train,
        seed: config.seed,
    };
    Ok((net, report))
}
