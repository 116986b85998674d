//! Monotonic alignment search over a text-by-frame log-likelihood matrix.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Hard monotonic alignment stored as per-position durations. Position `l`
/// owns frames `sum(durations[..l]) .. sum(durations[..=l])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMatrix {
    pub durations: Vec<usize>,
}

impl AlignmentMatrix {
    pub fn new(durations: Vec<usize>) -> Result<Self> {
        if durations.is_empty() || durations.contains(&0) {
            return Err(Error::Input(
                "every text position needs at least one frame".into(),
            ));
        }
        Ok(Self { durations })
    }

    pub fn n_text(&self) -> usize {
        self.durations.len()
    }

    pub fn n_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Text position of every frame.
    pub fn path(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .flat_map(|(l, &d)| std::iter::repeat_n(l, d))
            .collect()
    }

    /// `L x T` 0/1 matrix.
    pub fn to_dense(&self) -> Array2<f32> {
        let mut a = Array2::zeros((self.n_text(), self.n_frames()));
        for (t, l) in self.path().into_iter().enumerate() {
            a[[l, t]] = 1.0;
        }
        a
    }

    pub fn score(&self, loglik: &Array2<f64>) -> f64 {
        self.path()
            .into_iter()
            .enumerate()
            .map(|(t, l)| loglik[[l, t]])
            .sum()
    }
}

/// Highest-scoring monotonic alignment in which every frame maps to one
/// text position, positions advance by at most one per frame and every
/// position receives at least one frame. On equal scores the path stays on
/// the current text position.
pub fn monotonic_alignment_search(loglik: &Array2<f64>) -> Result<AlignmentMatrix> {
    let (l_n, t_n) = loglik.dim();
    if l_n == 0 {
        return Err(Error::Input("empty text".into()));
    }
    if t_n < l_n {
        return Err(Error::Infeasible(format!(
            "{t_n} frames cannot cover {l_n} text positions"
        )));
    }
    if loglik.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite log-likelihood".into()));
    }
    let neg = f64::NEG_INFINITY;
    let mut q = Array2::from_elem((l_n, t_n), neg);
    q[[0, 0]] = loglik[[0, 0]];
    for t in 1..t_n {
        let lo = (l_n + t).saturating_sub(t_n);
        let hi = (l_n - 1).min(t);
        for l in lo..=hi {
            let stay = q[[l, t - 1]];
            let advance = if l > 0 { q[[l - 1, t - 1]] } else { neg };
            q[[l, t]] = loglik[[l, t]] + stay.max(advance);
        }
    }
    let mut durations = vec![0usize; l_n];
    let mut l = l_n - 1;
    for t in (0..t_n).rev() {
        durations[l] += 1;
        if t == 0 {
            break;
        }
        if l > 0 && (l == t || q[[l - 1, t - 1]] > q[[l, t - 1]]) {
            l -= 1;
        }
    }
    AlignmentMatrix::new(durations)
}
