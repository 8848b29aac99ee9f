//! Isotropic Gaussian-mixture datasets with per-component class labels, and
//! the two-sample metrics used to score generated batches.
//!
//! Every preset has a closed-form marginal velocity (see [`crate::sample`]),
//! which is what makes these distributions useful as ground truth: sampling,
//! training and verification can all be checked against exact quantities.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::arr::{dist, Arr};

// ─── Mixture specification ───────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Shared isotropic standard deviation.
    pub sigma: f64,
    /// Component weights, summing to 1.
    pub weights: Vec<f64>,
    /// Class label of each component.
    pub labels: Vec<usize>,
}

impl GmmSpec {
    /// Single standard Gaussian at the origin.
    pub fn gauss1() -> Self {
        GmmSpec {
            dim: 2,
            means: vec![vec![0.0, 0.0]],
            sigma: 1.0,
            weights: vec![1.0],
            labels: vec![0],
        }
    }

    /// Eight modes on a circle of radius 4, one class each.
    pub fn ring8() -> Self {
        let means = (0..8)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                vec![4.0 * angle.cos(), 4.0 * angle.sin()]
            })
            .collect();
        GmmSpec {
            dim: 2,
            means,
            sigma: 0.3,
            weights: vec![0.125; 8],
            labels: (0..8).collect(),
        }
    }

    /// 5x5 grid with spacing 2 centered at the origin, one class per cell.
    pub fn grid25() -> Self {
        let mut means = Vec::with_capacity(25);
        for i in 0..5 {
            for j in 0..5 {
                means.push(vec![2.0 * i as f64 - 4.0, 2.0 * j as f64 - 4.0]);
            }
        }
        GmmSpec {
            dim: 2,
            means,
            sigma: 0.3,
            weights: vec![1.0 / 25.0; 25],
            labels: (0..25).collect(),
        }
    }

    pub fn preset(name: &str) -> Option<GmmSpec> {
        match name {
            "gauss1" => Some(GmmSpec::gauss1()),
            "ring8" => Some(GmmSpec::ring8()),
            "grid25" => Some(GmmSpec::grid25()),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["gauss1", "ring8", "grid25"]
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) + 1
    }

    /// The mixture restricted to one class, weights renormalized. This is
    /// the distribution a conditional sampler targets.
    pub fn restrict_to_class(&self, class: usize) -> GmmSpec {
        let keep: Vec<usize> =
            (0..self.num_components()).filter(|&i| self.labels[i] == class).collect();
        assert!(!keep.is_empty(), "no components with class {class}");
        let total: f64 = keep.iter().map(|&i| self.weights[i]).sum();
        GmmSpec {
            dim: self.dim,
            means: keep.iter().map(|&i| self.means[i].clone()).collect(),
            sigma: self.sigma,
            weights: keep.iter().map(|&i| self.weights[i] / total).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Draw `n` labeled points. Per sample: one uniform for the component,
    /// then `dim` normals.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> (Arr, Vec<usize>) {
        let mut labels = Vec::with_capacity(n);
        let x = Arr::from_rows(n, self.dim, |_, row| {
            let (point, label) = self.sample_one(rng);
            labels.push(label);
            row.copy_from_slice(&point);
        });
        (x, labels)
    }

    /// Draw one labeled point; consumes one uniform and `dim` normals.
    pub fn sample_one<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.gen();
        let comp = self.pick_component(u);
        let point = self.means[comp]
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + self.sigma * z
            })
            .collect();
        (point, self.labels[comp])
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Index of the component mean nearest to `x`.
    pub fn nearest_mean(&self, x: &[f64]) -> usize {
        (0..self.num_components())
            .min_by(|&a, &b| {
                dist(x, &self.means[a]).partial_cmp(&dist(x, &self.means[b])).unwrap()
            })
            .unwrap()
    }
}

// ─── Two-sample metrics ──────────────────────────────────────────────────

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` with every expectation an
/// exact double sum over all index pairs (self-pairs included). Identical
/// multisets give exactly zero.
pub fn energy_distance(a: &Arr, b: &Arr) -> f64 {
    let (n, da) = a.dims();
    let (m, db) = b.dims();
    assert_eq!(da, db, "dimension mismatch");
    assert!(n > 0 && m > 0, "empty sample");
    let ab = pair_sum(a, b) / (n as f64 * m as f64);
    let aa = pair_sum(a, a) / (n as f64 * n as f64);
    let bb = pair_sum(b, b) / (m as f64 * m as f64);
    2.0 * ab - aa - bb
}

fn pair_sum(a: &Arr, b: &Arr) -> f64 {
    let (n, _) = a.dims();
    let (m, _) = b.dims();
    let mut total = 0.0;
    for i in 0..n {
        let ra = a.row(i);
        for j in 0..m {
            total += dist(ra, b.row(j));
        }
    }
    total
}

/// Sliced 1-Wasserstein distance: project both samples onto `n_proj`
/// random unit directions, take the exact sorted-coupling W1 on each line,
/// and average. Unequal sizes are reduced to the smaller count by a seeded
/// subsample of the larger.
pub fn sliced_wasserstein(a: &Arr, b: &Arr, n_proj: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let (n, da) = a.dims();
    let (m, db) = b.dims();
    assert_eq!(da, db, "dimension mismatch");
    assert!(n > 0 && m > 0 && n_proj > 0, "empty input");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let k = n.min(m);
    let ia = subsample_indices(n, k, &mut rng);
    let ib = subsample_indices(m, k, &mut rng);

    let mut total = 0.0;
    let mut pa = vec![0.0; k];
    let mut pb = vec![0.0; k];
    for _ in 0..n_proj {
        let dir = unit_direction(da, &mut rng);
        for (o, &i) in pa.iter_mut().zip(&ia) {
            *o = a.row(i).iter().zip(&dir).map(|(x, d)| x * d).sum();
        }
        for (o, &i) in pb.iter_mut().zip(&ib) {
            *o = b.row(i).iter().zip(&dir).map(|(x, d)| x * d).sum();
        }
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let w1: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / k as f64;
        total += w1;
    }
    total / n_proj as f64
}

/// First `k` of a seeded partial Fisher-Yates shuffle of `0..n`; the
/// identity when `k == n` so equal-size inputs are used as given.
fn subsample_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        for i in 0..k {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
    }
    idx.truncate(k);
    idx
}

fn unit_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
