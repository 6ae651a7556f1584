use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::training::adam::{Adam, AdamParams};

/// Classifier trained by [`kfold_probe`].
///
/// The recurrent probes see each fixed-length feature as a one-step sequence
/// from a zero state, so the reset gate and recurrent weights drop out and
/// the step reduces to `h = (1 - z) * n` with `z = sigmoid(W_z x + b_z)` and
/// `n = tanh(W_n x + b_n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Softmax regression.
    Linear,
    /// One GRU step with one unit per class; the state is the logit vector.
    Gru,
    /// One GRU step with `hidden` units followed by a fully connected layer.
    GruFc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// GRU width for `gru-fc`.
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping; defaults per kind.
    pub patience: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { kind: ProbeKind::Gru, hidden: 512, learning_rate: 1e-2, batch_size: 64, max_epochs: 200, patience: None }
    }
}

impl ProbeConfig {
    pub fn with_kind(kind: ProbeKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn patience(&self) -> usize {
        self.patience.unwrap_or(match self.kind {
            ProbeKind::GruFc => 5,
            ProbeKind::Linear | ProbeKind::Gru => 15,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden >= 1, "probe hidden must be >= 1");
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "probe learning_rate must be positive");
        ensure!(self.batch_size >= 1 && self.max_epochs >= 1, "probe batch_size and max_epochs must be >= 1");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    /// Fold of every item; in round `f` fold `f` is test and `(f + 1) % k` is dev.
    pub folds: Vec<usize>,
    pub epochs: Vec<usize>,
}

/// Per-class round-robin over a seeded shuffle, so every fold holds at least
/// one item of every class.
pub fn assign_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(k >= 3, "k-fold probe needs k >= 3 (test, dev and train folds), got {k}");
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    ensure!(by_class.len() >= 2, "probe needs at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    for (class, mut items) in by_class {
        if items.len() < k {
            return Err(Error::Protocol(format!("class {class} has {} items, {k}-fold protocol needs at least {k}", items.len())));
        }
        items.shuffle(&mut rng);
        for (p, i) in items.into_iter().enumerate() {
            folds[i] = p % k;
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone)]
struct Net {
    kind: ProbeKind,
    wz: Array2<f64>,
    bz: Array1<f64>,
    wn: Array2<f64>,
    bn: Array1<f64>,
    v: Array2<f64>,
    c: Array1<f64>,
}

struct Cache {
    z: Array2<f64>,
    n: Array2<f64>,
    h: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Net {
    fn new(kind: ProbeKind, input: usize, classes: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let width = match kind {
            ProbeKind::GruFc => hidden,
            _ => classes,
        };
        let b = 1.0 / (width as f64).sqrt().max((input as f64).sqrt());
        let (wz, wn) = match kind {
            ProbeKind::Linear => (Array2::zeros((0, input)), uniform(rng, width, input, b)),
            _ => (uniform(rng, width, input, b), uniform(rng, width, input, b)),
        };
        let (v, c) = match kind {
            ProbeKind::GruFc => (uniform(rng, classes, hidden, 1.0 / (hidden as f64).sqrt()), Array1::zeros(classes)),
            _ => (Array2::zeros((0, 0)), Array1::zeros(0)),
        };
        Self { kind, bz: Array1::zeros(wz.nrows()), bn: Array1::zeros(width), wz, wn, v, c }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let an = x.dot(&self.wn.t()) + &self.bn;
        if self.kind == ProbeKind::Linear {
            let empty = Array2::zeros((0, 0));
            return (an, Cache { z: empty.clone(), n: empty.clone(), h: empty });
        }
        let z = (x.dot(&self.wz.t()) + &self.bz).mapv(sigmoid);
        let n = an.mapv(f64::tanh);
        let h = (1.0 - &z) * &n;
        let logits = match self.kind {
            ProbeKind::GruFc => h.dot(&self.v.t()) + &self.c,
            _ => h.clone(),
        };
        (logits, Cache { z, n, h })
    }

    /// Gradient of the mean cross-entropy given `dlogits = (p - onehot) / B`.
    fn backward(&self, x: &Array2<f64>, cache: &Cache, dlogits: &Array2<f64>) -> Net {
        let mut g = self.zeros_like();
        if self.kind == ProbeKind::Linear {
            g.wn = dlogits.t().dot(x);
            g.bn = dlogits.sum_axis(Axis(0));
            return g;
        }
        let dh = match self.kind {
            ProbeKind::GruFc => {
                g.v = dlogits.t().dot(&cache.h);
                g.c = dlogits.sum_axis(Axis(0));
                dlogits.dot(&self.v)
            }
            _ => dlogits.clone(),
        };
        let dan = &dh * &(1.0 - &cache.z) * &cache.n.mapv(|n| 1.0 - n * n);
        let daz = -&dh * &cache.n * &cache.z.mapv(|z| z * (1.0 - z));
        g.wn = dan.t().dot(x);
        g.bn = dan.sum_axis(Axis(0));
        g.wz = daz.t().dot(x);
        g.bz = daz.sum_axis(Axis(0));
        g
    }

    fn zeros_like(&self) -> Net {
        Net {
            kind: self.kind,
            wz: Array2::zeros(self.wz.dim()),
            bz: Array1::zeros(self.bz.len()),
            wn: Array2::zeros(self.wn.dim()),
            bn: Array1::zeros(self.bn.len()),
            v: Array2::zeros(self.v.dim()),
            c: Array1::zeros(self.c.len()),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.wz.as_slice_mut().unwrap(),
            self.bz.as_slice_mut().unwrap(),
            self.wn.as_slice_mut().unwrap(),
            self.bn.as_slice_mut().unwrap(),
            self.v.as_slice_mut().unwrap(),
            self.c.as_slice_mut().unwrap(),
        ]
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.wz.as_slice().unwrap(),
            self.bz.as_slice().unwrap(),
            self.wn.as_slice().unwrap(),
            self.bn.as_slice().unwrap(),
            self.v.as_slice().unwrap(),
            self.c.as_slice().unwrap(),
        ]
    }
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = labels.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (r, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            grad[[r, j]] = ((v - lse).exp() - if j == y { 1.0 } else { 0.0 }) / b;
        }
    }
    (loss / b, grad)
}

fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            // ties resolve to the lowest class index
            let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            best.0 == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn gather(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Z-scores with statistics from the training rows only.
fn standardize(x: &Array2<f64>, train: &[usize]) -> Array2<f64> {
    let t = gather(x, train);
    let mean = t.mean_axis(Axis(0)).expect("non-empty train fold");
    let std = t.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (x - &mean) / &std
}

struct FoldOutcome {
    accuracy: f64,
    epochs: usize,
}

fn run_fold(x: &Array2<f64>, y: &[usize], n_classes: usize, split: [&[usize]; 3], cfg: &ProbeConfig, seed: u64) -> Result<FoldOutcome> {
    let [train, dev, test] = split;
    let xs = standardize(x, train);
    let (xtr, xdev, xte) = (gather(&xs, train), gather(&xs, dev), gather(&xs, test));
    let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
    let ydev: Vec<usize> = dev.iter().map(|&i| y[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| y[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Net::new(cfg.kind, x.ncols(), n_classes, cfg.hidden, &mut rng);
    let sizes: Vec<usize> = net.slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(AdamParams { learning_rate: cfg.learning_rate, ..AdamParams::default() }, &sizes);
    let mut best = (f64::INFINITY, net.clone(), 0);
    let mut bad = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = gather(&xtr, batch);
            let yb: Vec<usize> = batch.iter().map(|&i| ytr[i]).collect();
            let (logits, cache) = net.forward(&xb);
            let (_, dl) = cross_entropy(&logits, &yb);
            let g = net.backward(&xb, &cache, &dl);
            adam.step(net.slices_mut(), &g.slices())?;
        }
        let (dev_loss, _) = cross_entropy(&net.forward(&xdev).0, &ydev);
        if !dev_loss.is_finite() {
            return Err(Error::Contract(format!("probe diverged at epoch {epoch}")));
        }
        if dev_loss < best.0 - 1e-6 {
            best = (dev_loss, net.clone(), epoch);
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience() {
                break;
            }
        }
    }
    Ok(FoldOutcome { accuracy: accuracy(&best.1.forward(&xte).0, &yte), epochs })
}

/// k-fold probe accuracy. Fold `f` is the test fold, `(f + 1) % k` the dev
/// fold for early stopping, and the rest is training data. Returns the mean
/// of the per-fold test accuracies.
pub fn kfold_probe(features: &[Vec<f64>], labels: &[usize], k: usize, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    ensure!(features.len() == labels.len(), "{} features but {} labels", features.len(), labels.len());
    ensure!(!features.is_empty(), "probe needs features");
    let dim = features[0].len();
    ensure!(dim >= 1 && features.iter().all(|f| f.len() == dim), "probe features must share one non-zero dimension");
    ensure!(features.iter().flatten().all(|v| v.is_finite()), "probe features must be finite");
    let folds = assign_folds(labels, k, seed)?;
    // dense class ids keep the output layer minimal
    let classes: BTreeMap<usize, usize> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().enumerate().map(|(i, l)| (l, i)).collect();
    let y: Vec<usize> = labels.iter().map(|l| classes[l]).collect();
    let x = Array2::from_shape_fn((features.len(), dim), |(i, j)| features[i][j]);
    let mut fold_accuracies = Vec::with_capacity(k);
    let mut epochs = Vec::with_capacity(k);
    for f in 0..k {
        let d = (f + 1) % k;
        let pick = |p: &dyn Fn(usize) -> bool| (0..labels.len()).filter(|&i| p(folds[i])).collect::<Vec<_>>();
        let (test, dev, train) = (pick(&|g| g == f), pick(&|g| g == d), pick(&|g| g != f && g != d));
        let out = run_fold(&x, &y, classes.len(), [&train, &dev, &test], cfg, seed.wrapping_add(1 + f as u64))?;
        fold_accuracies.push(out.accuracy);
        epochs.push(out.epochs);
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    Ok(ProbeResult { mean_accuracy, fold_accuracies, folds, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(classes: usize, per: usize, dim: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| sep * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()).collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..classes {
            for _ in 0..per {
                xs.push(centers[c].iter().map(|m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect());
                ys.push(c * 3 + 1);
            }
        }
        (xs, ys)
    }

    #[test]
    fn folds_partition_and_are_deterministic() {
        let labels: Vec<usize> = (0..60).map(|i| i % 5).collect();
        let a = assign_folds(&labels, 4, 9).unwrap();
        assert_eq!(a, assign_folds(&labels, 4, 9).unwrap());
        assert_ne!(a, assign_folds(&labels, 4, 10).unwrap());
        for f in 0..4 {
            for c in 0..5 {
                assert!((0..60).any(|i| a[i] == f && labels[i] == c));
            }
            let d = (f + 1) % 4;
            let test: Vec<usize> = (0..60).filter(|&i| a[i] == f).collect();
            let dev: Vec<usize> = (0..60).filter(|&i| a[i] == d).collect();
            let train: Vec<usize> = (0..60).filter(|&i| a[i] != f && a[i] != d).collect();
            assert_eq!(test.len() + dev.len() + train.len(), 60);
            assert!(test.iter().all(|i| !dev.contains(i) && !train.contains(i)));
            assert!(dev.iter().all(|i| !train.contains(i)));
        }
    }

    #[test]
    fn infeasible_protocol() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1];
        assert!(matches!(assign_folds(&labels, 4, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn separable_features_are_learned() {
        let (x, y) = blobs(4, 16, 6, 6.0, 2);
        for kind in [ProbeKind::Linear, ProbeKind::Gru, ProbeKind::GruFc] {
            let cfg = ProbeConfig { hidden: 32, ..ProbeConfig::with_kind(kind) };
            let r = kfold_probe(&x, &y, 8, &cfg, 1).unwrap();
            assert_eq!(r.mean_accuracy, 1.0, "{kind:?} {:?}", r.fold_accuracies);
        }
    }

    #[test]
    fn constant_features_give_chance() {
        let n_classes = 4;
        let labels: Vec<usize> = (0..400).map(|i| i % n_classes).collect();
        let x = vec![vec![1.0, -2.0]; labels.len()];
        let r = kfold_probe(&x, &labels, 8, &ProbeConfig::with_kind(ProbeKind::Linear), 3).unwrap();
        assert!((r.mean_accuracy - 0.25).abs() < 0.05, "{}", r.mean_accuracy);
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&mut rng, 5, 3, 1.0);
        let y = vec![0, 2, 1, 1, 0];
        for kind in [ProbeKind::Linear, ProbeKind::Gru, ProbeKind::GruFc] {
            let mut net = Net::new(kind, 3, 3, 4, &mut rng);
            let (logits, cache) = net.forward(&x);
            let g = net.backward(&x, &cache, &cross_entropy(&logits, &y).1);
            let analytic: Vec<f64> = g.slices().concat();
            let mut k = 0;
            for s in 0..6 {
                for i in 0..net.slices()[s].len() {
                    let orig = net.slices()[s][i];
                    net.slices_mut()[s][i] = orig + 1e-5;
                    let up = cross_entropy(&net.forward(&x).0, &y).0;
                    net.slices_mut()[s][i] = orig - 1e-5;
                    let down = cross_entropy(&net.forward(&x).0, &y).0;
                    net.slices_mut()[s][i] = orig;
                    let num = (up - down) / 2e-5;
                    assert!((num - analytic[k]).abs() < 1e-7, "{kind:?} slot {s}/{i}: {num} vs {}", analytic[k]);
                    k += 1;
                }
            }
        }
    }
}
