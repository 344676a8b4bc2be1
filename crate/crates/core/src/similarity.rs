//! Trajectory similarity: windowed mean squared error plus the Hausdorff and
//! discrete Fréchet distances used as reference metrics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Number of most recent observation points compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window(usize);

impl Window {
    pub fn new(w: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::Parameter("window must hold at least one point".into()));
        }
        Ok(Self(w))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for Window {
    fn default() -> Self {
        Self(10)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowedMse {
    pub value: f64,
    /// Fewer than `w` points were available and all of them were used.
    pub partial: bool,
}

/// Mean squared point distance over the last `w` observed samples ending at
/// `t_index`. Both trajectories are indexed from motion onset.
pub fn windowed_mse(
    observed: &Trajectory,
    generated: &Trajectory,
    t_index: usize,
    window: Window,
) -> Result<WindowedMse> {
    if (observed.dt - generated.dt).abs() > crate::config::DT_RELATIVE_TOLERANCE * observed.dt.abs() {
        return Err(Error::Alignment(format!(
            "sample periods differ: {} vs {}",
            observed.dt, generated.dt
        )));
    }
    if t_index >= observed.len() {
        return Err(Error::Alignment(format!(
            "t_index {t_index} beyond {} observed points",
            observed.len()
        )));
    }
    if t_index >= generated.len() {
        return Err(Error::Alignment(format!(
            "t_index {t_index} beyond {} generated points",
            generated.len()
        )));
    }
    let partial = t_index + 1 < window.get();
    Ok(WindowedMse {
        value: windowed_mse_points(&observed.points, &generated.points, t_index, window.get()),
        partial,
    })
}

/// Unchecked kernel of [`windowed_mse`] used in the grid inner loop.
#[inline]
pub fn windowed_mse_points(observed: &[Vector3<f64>], generated: &[Vector3<f64>], t_index: usize, w: usize) -> f64 {
    let start = (t_index + 1).saturating_sub(w);
    let count = t_index + 1 - start;
    let sum: f64 = observed[start..=t_index]
        .iter()
        .zip(&generated[start..=t_index])
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    sum / count as f64
}

fn directed_hausdorff(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

pub fn hausdorff(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("hausdorff distance needs non-empty point sets".into()));
    }
    Ok(directed_hausdorff(a, b).max(directed_hausdorff(b, a)))
}

/// Discrete Fréchet distance by dynamic programming over the coupling table.
pub fn discrete_frechet(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("fréchet distance needs non-empty curves".into()));
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut row = vec![0.0f64; m];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let d = (p - q).norm();
            row[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => row[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(row[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    Ok(prev[m - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn traj(points: &[[f64; 3]]) -> Trajectory {
        Trajectory::new(points.iter().map(|p| Vector3::from(*p)).collect(), 1.0 / 30.0)
    }

    /// Enumerates every monotone coupling of two short curves.
    fn frechet_brute(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        fn walk(a: &[Vector3<f64>], b: &[Vector3<f64>], i: usize, j: usize, worst: f64, best: &mut f64) {
            let worst = worst.max((a[i] - b[j]).norm());
            if worst >= *best {
                return;
            }
            if i + 1 == a.len() && j + 1 == b.len() {
                *best = worst;
                return;
            }
            if i + 1 < a.len() {
                walk(a, b, i + 1, j, worst, best);
            }
            if j + 1 < b.len() {
                walk(a, b, i, j + 1, worst, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, i + 1, j + 1, worst, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(a, b, 0, 0, 0.0, &mut best);
        best
    }

    #[test]
    fn mse_examples() {
        let a = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = traj(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let w2 = Window::new(2).unwrap();
        assert_eq!(windowed_mse(&a, &a, 1, w2).unwrap().value, 0.0);
        let r = windowed_mse(&a, &b, 1, w2).unwrap();
        assert_relative_eq!(r.value, 0.5);
        assert!(!r.partial);

        let d = 0.3;
        let shifted = Trajectory::new(a.points.iter().map(|p| p + Vector3::repeat(d)).collect(), a.dt);
        assert_relative_eq!(windowed_mse(&a, &shifted, 1, w2).unwrap().value, 3.0 * d * d, epsilon = 1e-15);
    }

    #[test]
    fn short_observation_is_partial() {
        let a = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let b = traj(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let r = windowed_mse(&a, &b, 1, Window::default()).unwrap();
        assert!(r.partial);
        assert_relative_eq!(r.value, 0.5);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let a = traj(&[[0.0, 0.0, 0.0]]);
        let mut b = a.clone();
        b.dt = 0.01;
        assert!(matches!(windowed_mse(&a, &b, 0, Window::default()), Err(Error::Alignment(_))));
        assert!(matches!(windowed_mse(&a, &a, 3, Window::default()), Err(Error::Alignment(_))));
        assert!(Window::new(0).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = [Vector3::zeros()];
        let b = [Vector3::new(1.0, 0.0, 0.0)];
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(discrete_frechet(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), 1.0);
        assert_eq!(discrete_frechet(&a, &b).unwrap(), 1.0);
        assert!(hausdorff(&[], &b).is_err());
        assert!(discrete_frechet(&a, &[]).is_err());
    }

    fn curve(max_len: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..=max_len)
            .prop_map(|v| v.into_iter().map(Vector3::from).collect())
    }

    proptest! {
        #[test]
        fn frechet_dominates_hausdorff(a in curve(20), b in curve(20)) {
            let f = discrete_frechet(&a, &b).unwrap();
            let h = hausdorff(&a, &b).unwrap();
            prop_assert!(f >= h - 1e-12);
            prop_assert!((hausdorff(&b, &a).unwrap() - h).abs() < 1e-15);
        }

        #[test]
        fn frechet_matches_brute_force(a in curve(6), b in curve(6)) {
            let dp = discrete_frechet(&a, &b).unwrap();
            prop_assert!((dp - frechet_brute(&a, &b)).abs() < 1e-12);
            let ra: Vec<_> = a.iter().rev().copied().collect();
            let rb: Vec<_> = b.iter().rev().copied().collect();
            prop_assert!((discrete_frechet(&ra, &rb).unwrap() - dp).abs() < 1e-12);
        }

        #[test]
        fn frechet_extension_never_below_prefix_coupling(a in curve(5), b in curve(5), p in prop::array::uniform3(-1.0f64..1.0), q in prop::array::uniform3(-1.0f64..1.0)) {
            let before = discrete_frechet(&a, &b).unwrap();
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            a2.push(Vector3::from(p));
            b2.push(Vector3::from(q));
            let after = discrete_frechet(&a2, &b2).unwrap();
            prop_assert!(after >= (Vector3::from(p) - Vector3::from(q)).norm() - 1e-12);
            prop_assert!((after - frechet_brute(&a2, &b2)).abs() < 1e-12);
            // Extending the old optimal coupling by the diagonal step is admissible.
            prop_assert!(after <= before.max((Vector3::from(p) - Vector3::from(q)).norm()) + 1e-12);
        }

        #[test]
        fn mse_is_translation_invariant(a in curve(12), b_seed in curve(12), shift in prop::array::uniform3(-5.0f64..5.0)) {
            let n = a.len().min(b_seed.len());
            let ta = Trajectory::new(a[..n].to_vec(), 0.1);
            let tb = Trajectory::new(b_seed[..n].to_vec(), 0.1);
            let s = Vector3::from(shift);
            let sa = Trajectory::new(ta.points.iter().map(|p| p + s).collect(), 0.1);
            let sb = Trajectory::new(tb.points.iter().map(|p| p + s).collect(), 0.1);
            let w = Window::new(4).unwrap();
            let base = windowed_mse(&ta, &tb, n - 1, w).unwrap().value;
            let moved = windowed_mse(&sa, &sb, n - 1, w).unwrap().value;
            prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn positive_scaling_keeps_the_argmin(values in prop::collection::vec(0.0f64..10.0, 1..50), c in 0.001f64..1000.0) {
            let argmin = |v: &[f64]| v.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            prop_assert_eq!(argmin(&values), argmin(&scaled));
        }
    }
}
