//! Fully connected network with rectifier hidden layers and a linear output.
//! Samples are matrix columns.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, RealField};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: RealField + Copy> {
    /// `outputs x inputs`.
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

impl<T: RealField + Copy> Layer<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// `W x + b` for every column of `x`.
    fn affine(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut z = DMatrix::zeros(self.outputs(), x.ncols());
        fill_bias(z.as_mut_slice(), self.bias.as_slice());
        z.gemm(T::one(), &self.weight, x, T::one());
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: RealField + Copy> {
    pub layers: Vec<Layer<T>>,
}

/// Pre-activations and activations of one forward pass, kept for backprop.
pub struct Trace<T: RealField + Copy> {
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<DMatrix<T>>,
}

impl<T: RealField + Copy> Trace<T> {
    pub fn output(&self) -> &DMatrix<T> {
        self.activations.last().expect("non-empty trace")
    }
}

/// Sets every column of the column-major `m` to `bias`.
fn fill_bias<T: Copy>(m: &mut [T], bias: &[T]) {
    for column in m.chunks_exact_mut(bias.len()) {
        column.copy_from_slice(bias);
    }
}

fn relu<T: RealField + Copy>(m: &mut DMatrix<T>) {
    m.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

impl<T: RealField + Copy> Mlp<T> {
    /// He-initialized hidden layers, zero biases. The output layer starts at a
    /// tenth of the Glorot scale so an untrained net stays close to its bias.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, s)| {
                let (n_in, n_out) = (s[0], s[1]);
                let std = if l == last {
                    0.1 * (2.0 / (n_in + n_out) as f64).sqrt()
                } else {
                    (2.0 / n_in as f64).sqrt()
                };
                let weight = DMatrix::from_fn(n_out, n_in, |_, _| {
                    let g: f64 = rng.sample(StandardNormal);
                    T::from_f64(g * std).expect("representable")
                });
                Layer {
                    weight,
                    bias: DVector::zeros(n_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("layers").outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.affine(&a);
            if l < last {
                relu(&mut a);
            }
        }
        a
    }

    /// Same as [`Mlp::forward`], but writes the column-major output into the
    /// allocation of `out`. Columns are processed in tiles so that the hidden
    /// activations stay in cache.
    pub fn forward_into(&self, x: &DMatrix<T>, mut out: Vec<T>) -> Vec<T> {
        const TILE: usize = 256;
        let n = x.ncols();
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let rows = last.outputs();
        // Biases are written before every product, so stale contents are harmless.
        out.resize(rows * n, T::zero());
        let mut buffers: Vec<Vec<T>> = hidden.iter().map(|l| vec![T::zero(); l.outputs() * TILE]).collect();
        for start in (0..n).step_by(TILE) {
            let cols = TILE.min(n - start);
            for l in 0..hidden.len() {
                let layer = &hidden[l];
                let (done, rest) = buffers.split_at_mut(l);
                let h = &mut rest[0][..layer.outputs() * cols];
                fill_bias(h, layer.bias.as_slice());
                let mut hm = DMatrixViewMut::from_slice(h, layer.outputs(), cols);
                match done.last() {
                    None => hm.gemm(T::one(), &layer.weight, &x.columns(start, cols), T::one()),
                    Some(prev) => {
                        let input = DMatrixView::from_slice(&prev[..layer.inputs() * cols], layer.inputs(), cols);
                        hm.gemm(T::one(), &layer.weight, &input, T::one())
                    }
                }
                for v in h.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
            let y = &mut out[start * rows..(start + cols) * rows];
            fill_bias(y, last.bias.as_slice());
            let mut ym = DMatrixViewMut::from_slice(y, rows, cols);
            match buffers.last() {
                None => ym.gemm(T::one(), &last.weight, &x.columns(start, cols), T::one()),
                Some(prev) => {
                    let input = DMatrixView::from_slice(&prev[..last.inputs() * cols], last.inputs(), cols);
                    ym.gemm(T::one(), &last.weight, &input, T::one())
                }
            }
        }
        out
    }

    pub fn forward_trace(&self, x: &DMatrix<T>) -> Trace<T> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = layer.affine(activations.last().expect("input"));
            if l < last {
                relu(&mut a);
            }
            activations.push(a);
        }
        Trace { activations }
    }

    /// Mean squared error over all output entries and its parameter gradients.
    pub fn loss_and_gradients(&self, x: &DMatrix<T>, y: &DMatrix<T>) -> (T, Vec<Layer<T>>) {
        let trace = self.forward_trace(x);
        let diff = trace.output() - y;
        let n = T::from_usize(diff.len()).expect("count");
        let loss = diff.norm_squared() / n;
        let mut delta = diff * (T::from_f64(2.0).expect("two") / n);
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = &trace.activations[l];
            let weight = &delta * input.transpose();
            let bias = delta.column_sum();
            if l > 0 {
                let mut back = self.layers[l].weight.transpose() * &delta;
                // ReLU derivative: the activation is positive exactly where the
                // pre-activation was.
                back.zip_apply(input, |b, a| {
                    if a <= T::zero() {
                        *b = T::zero()
                    }
                });
                delta = back;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Mlp<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = Mlp::<f64>::init(&[3, 4, 4, 6], &mut rng);
        for layer in &mut net.layers {
            layer.bias = DVector::from_fn(layer.outputs(), |_, _| rng.random_range(-0.3..0.3));
        }
        let x = DMatrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(6, 7, |_, _| rng.random_range(-1.0..1.0));
        (net, x, y)
    }

    #[test]
    fn gradients_match_central_differences() {
        let (net, x, y) = tiny();
        let (_, grads) = net.loss_and_gradients(&x, &y);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for l in 0..net.layers.len() {
            let params = net.layers[l].weight.len() + net.layers[l].bias.len();
            for p in 0..params {
                let bump = |delta: f64| {
                    let mut n = net.clone();
                    let layer = &mut n.layers[l];
                    if p < layer.weight.len() {
                        layer.weight[p] += delta;
                    } else {
                        layer.bias[p - layer.weight.len()] += delta;
                    }
                    n.loss_and_gradients(&x, &y).0
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let g = &grads[l];
                let analytic = if p < g.weight.len() { g.weight[p] } else { g.bias[p - g.weight.len()] };
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                // Parameters whose unit is dead on every sample have zero gradient both ways.
                if numeric.abs() > 1e-10 || analytic.abs() > 1e-10 {
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_weights_output_the_bias() {
        let mut net = Mlp::<f32> {
            layers: vec![Layer::zeros(3, 32), Layer::zeros(32, 64), Layer::zeros(64, 270)],
        };
        net.layers[2].bias = DVector::from_fn(270, |i, _| i as f32 * 0.01);
        let x = DMatrix::from_fn(3, 4, |i, j| (i * 10 + j) as f32 - 5.0);
        let y = net.forward(&x);
        for j in 0..4 {
            assert_eq!(y.column(j), net.layers[2].bias.column(0));
        }
        assert_eq!(net.parameter_count(), 3 * 32 + 32 + 32 * 64 + 64 + 64 * 270 + 270);
    }

    #[test]
    fn trace_matches_forward() {
        let (net, x, _) = tiny();
        assert_eq!(net.forward_trace(&x).output(), &net.forward(&x));
        assert!(net.is_finite());
    }
}
