//! Affine and LSTM layers with explicit forward caches and backward passes.
//!
//! Sequences are time-major slices of `B x D` matrices. Gradients accumulate
//! into a second instance of the same layer type.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

fn uniform_init<R: Rng>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

fn uniform_init1<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(n, || rng.random_range(-bound..bound))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = x W^T + b`, with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self { w: uniform_init(rng, (output, input), input), b: uniform_init1(rng, output, input) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &dy.t().dot(x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &[f64], Vec<usize>); 2] {
        [
            ("w", self.w.as_slice().unwrap(), self.w.shape().to_vec()),
            ("b", self.b.as_slice().unwrap(), self.b.shape().to_vec()),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

/// Stacks time-major `B x D` steps into one `(T*B) x D` matrix.
pub(crate) fn stack_steps(steps: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = steps.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("steps share a shape")
}

/// Inverse of [`stack_steps`].
pub(crate) fn unstack_steps(m: &Array2<f64>, batch: usize) -> Vec<Array2<f64>> {
    (0..m.nrows() / batch).map(|t| m.slice(s![t * batch..(t + 1) * batch, ..]).to_owned()).collect()
}

/// Input to a recurrent layer: one matrix per step, or the same matrix
/// repeated (decoders broadcast their latent input to every step).
#[derive(Debug, Clone)]
pub enum LstmInput {
    Steps(Vec<Array2<f64>>),
    Repeat(Array2<f64>, usize),
}

impl LstmInput {
    fn steps(&self) -> usize {
        match self {
            LstmInput::Steps(v) => v.len(),
            LstmInput::Repeat(_, n) => *n,
        }
    }

    fn batch(&self) -> usize {
        match self {
            LstmInput::Steps(v) => v.first().map_or(0, |x| x.nrows()),
            LstmInput::Repeat(x, _) => x.nrows(),
        }
    }
}

/// Single LSTM layer; gate order is input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b: Array1<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    input: LstmInput,
    /// `hs[0]` / `cs[0]` are the zero initial state.
    pub hs: Vec<Array2<f64>>,
    cs: Vec<Array2<f64>>,
    /// Post-activation gates, `B x 4H`.
    gates: Vec<Array2<f64>>,
}

impl LstmCache {
    /// Hidden outputs for steps `1..=T`.
    pub fn outputs(&self) -> &[Array2<f64>] {
        &self.hs[1..]
    }

    pub fn last(&self) -> &Array2<f64> {
        self.hs.last().unwrap()
    }
}

impl Lstm {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: uniform_init(rng, (4 * hidden, input), input),
            w_hh: uniform_init(rng, (4 * hidden, hidden), hidden),
            b: uniform_init1(rng, 4 * hidden, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_ih: Array2::zeros(self.w_ih.raw_dim()),
            w_hh: Array2::zeros(self.w_hh.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.b.len()
    }

    pub fn forward(&self, xs: Vec<Array2<f64>>) -> LstmCache {
        self.forward_input(LstmInput::Steps(xs))
    }

    pub fn forward_input(&self, input: LstmInput) -> LstmCache {
        let h = self.hidden();
        let steps = input.steps();
        let batch = input.batch();
        // input projections for every step at once
        let pre: Vec<Array2<f64>> = match &input {
            LstmInput::Steps(xs) if !xs.is_empty() => unstack_steps(&(stack_steps(xs).dot(&self.w_ih.t()) + &self.b), batch),
            LstmInput::Steps(_) => Vec::new(),
            LstmInput::Repeat(x, _) => vec![x.dot(&self.w_ih.t()) + &self.b],
        };
        let mut hs = Vec::with_capacity(steps + 1);
        let mut cs = Vec::with_capacity(steps + 1);
        let mut gates = Vec::with_capacity(steps);
        hs.push(Array2::zeros((batch, h)));
        cs.push(Array2::zeros((batch, h)));
        for t in 0..steps {
            let p = &pre[if pre.len() == 1 { 0 } else { t }];
            let mut a = hs[t].dot(&self.w_hh.t());
            a += p;
            let mut c = Array2::<f64>::zeros((batch, h));
            let mut hn = Array2::<f64>::zeros((batch, h));
            {
                let av = a.as_slice_mut().unwrap();
                let cp = cs[t].as_slice().unwrap();
                let cv = c.as_slice_mut().unwrap();
                let hv = hn.as_slice_mut().unwrap();
                for r in 0..batch {
                    let row = &mut av[r * 4 * h..(r + 1) * 4 * h];
                    for k in 0..h {
                        let i = sigmoid(row[k]);
                        let f = sigmoid(row[h + k]);
                        let g = row[2 * h + k].tanh();
                        let o = sigmoid(row[3 * h + k]);
                        row[k] = i;
                        row[h + k] = f;
                        row[2 * h + k] = g;
                        row[3 * h + k] = o;
                        let cn = f * cp[r * h + k] + i * g;
                        cv[r * h + k] = cn;
                        hv[r * h + k] = o * cn.tanh();
                    }
                }
            }
            gates.push(a);
            cs.push(c);
            hs.push(hn);
        }
        LstmCache { input, hs, cs, gates }
    }

    /// Backpropagation through time. `dhs[t]` is the loss gradient arriving at
    /// output step `t` from above; `None` means zero. Returns `dL/dx_t` per
    /// step, or a single summed gradient for a repeated input.
    pub fn backward(&self, cache: &LstmCache, dhs: &[Option<Array2<f64>>], grad: &mut Lstm) -> Vec<Array2<f64>> {
        let h = self.hidden();
        let steps = cache.gates.len();
        let batch = cache.hs[0].nrows();
        let mut dh_next = Array2::<f64>::zeros((batch, h));
        let mut dc_next = Array2::<f64>::zeros((batch, h));
        let mut das = vec![Array2::<f64>::zeros((0, 0)); steps];
        for t in (0..steps).rev() {
            let mut dh = dh_next;
            if let Some(d) = &dhs[t] {
                dh += d;
            }
            let mut da = Array2::<f64>::zeros((batch, 4 * h));
            {
                let g = cache.gates[t].as_slice().unwrap();
                let c = cache.cs[t + 1].as_slice().unwrap();
                let cp = cache.cs[t].as_slice().unwrap();
                let dhv = dh.as_slice().unwrap();
                let dcn = dc_next.as_slice_mut().unwrap();
                let dav = da.as_slice_mut().unwrap();
                for r in 0..batch {
                    let gr = &g[r * 4 * h..(r + 1) * 4 * h];
                    let dr = &mut dav[r * 4 * h..(r + 1) * 4 * h];
                    for k in 0..h {
                        let (i, f, gg, o) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
                        let tc = c[r * h + k].tanh();
                        let dhk = dhv[r * h + k];
                        let dc = dcn[r * h + k] + dhk * o * (1.0 - tc * tc);
                        dr[k] = dc * gg * i * (1.0 - i);
                        dr[h + k] = dc * cp[r * h + k] * f * (1.0 - f);
                        dr[2 * h + k] = dc * i * (1.0 - gg * gg);
                        dr[3 * h + k] = dhk * tc * o * (1.0 - o);
                        dcn[r * h + k] = dc * f;
                    }
                }
            }
            dh_next = da.dot(&self.w_hh);
            das[t] = da;
        }
        if steps == 0 {
            return Vec::new();
        }
        let da_all = stack_steps(&das);
        grad.w_hh += &da_all.t().dot(&stack_steps(&cache.hs[..steps]));
        grad.b += &da_all.sum_axis(Axis(0));
        match &cache.input {
            LstmInput::Steps(xs) => {
                grad.w_ih += &da_all.t().dot(&stack_steps(xs));
                unstack_steps(&da_all.dot(&self.w_ih), batch)
            }
            LstmInput::Repeat(x, _) => {
                let mut sum = das[0].clone();
                for d in &das[1..] {
                    sum += d;
                }
                grad.w_ih += &sum.t().dot(x);
                vec![sum.dot(&self.w_ih)]
            }
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &[f64], Vec<usize>); 3] {
        [
            ("w_ih", self.w_ih.as_slice().unwrap(), self.w_ih.shape().to_vec()),
            ("w_hh", self.w_hh.as_slice().unwrap(), self.w_hh.shape().to_vec()),
            ("b", self.b.as_slice().unwrap(), self.b.shape().to_vec()),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [self.w_ih.as_slice_mut().unwrap(), self.w_hh.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

/// Stacked LSTM layers, each feeding its hidden sequence to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<Lstm>,
}

impl LstmStack {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize, depth: usize) -> Self {
        let layers = (0..depth).map(|k| Lstm::new(rng, if k == 0 { input } else { hidden }, hidden)).collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Lstm::zeros_like).collect() }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Lstm::n_params).sum()
    }

    pub fn forward(&self, xs: Vec<Array2<f64>>) -> Vec<LstmCache> {
        self.forward_input(LstmInput::Steps(xs))
    }

    pub fn forward_input(&self, input: LstmInput) -> Vec<LstmCache> {
        let mut caches: Vec<LstmCache> = Vec::with_capacity(self.layers.len());
        let mut input = input;
        for layer in &self.layers {
            let cache = layer.forward_input(input);
            input = LstmInput::Steps(cache.outputs().to_vec());
            caches.push(cache);
        }
        caches
    }

    pub fn backward(&self, caches: &[LstmCache], dhs: Vec<Option<Array2<f64>>>, grad: &mut LstmStack) -> Vec<Array2<f64>> {
        let mut d = dhs;
        let mut dxs = Vec::new();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            dxs = layer.backward(&caches[k], &d, &mut grad.layers[k]);
            d = dxs.iter().cloned().map(Some).collect();
        }
        dxs
    }
}

/// Splits `B x (a + b)` into its first `a` and remaining columns.
pub(crate) fn split_cols(m: &Array2<f64>, a: usize) -> (Array2<f64>, Array2<f64>) {
    (m.slice(s![.., ..a]).to_owned(), m.slice(s![.., a..]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective: sum_t <w_t, h_t> over all steps.
    fn objective(l: &Lstm, xs: &[Array2<f64>], ws: &[Array2<f64>]) -> f64 {
        let cache = l.forward(xs.to_vec());
        cache.outputs().iter().zip(ws).map(|(h, w)| (h * w).sum()).sum()
    }

    #[test]
    fn lstm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = Lstm::new(&mut rng, 3, 4);
        let xs: Vec<_> = (0..5).map(|_| uniform_init(&mut rng, (2, 3), 1)).collect();
        let ws: Vec<_> = (0..5).map(|_| uniform_init(&mut rng, (2, 4), 1)).collect();
        let cache = l.forward(xs.clone());
        let mut g = l.zeros_like();
        let dxs = l.backward(&cache, &ws.iter().cloned().map(Some).collect::<Vec<_>>(), &mut g);
        let h = 1e-6;
        let check = |a: f64, n: f64| assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
        for idx in [0, 7, 20, 35] {
            let mut lp = l.clone();
            lp.w_ih.as_slice_mut().unwrap()[idx] += h;
            let mut lm = l.clone();
            lm.w_ih.as_slice_mut().unwrap()[idx] -= h;
            check(g.w_ih.as_slice().unwrap()[idx], (objective(&lp, &xs, &ws) - objective(&lm, &xs, &ws)) / (2.0 * h));
        }
        for idx in [0, 9, 63] {
            let mut lp = l.clone();
            lp.w_hh.as_slice_mut().unwrap()[idx] += h;
            let mut lm = l.clone();
            lm.w_hh.as_slice_mut().unwrap()[idx] -= h;
            check(g.w_hh.as_slice().unwrap()[idx], (objective(&lp, &xs, &ws) - objective(&lm, &xs, &ws)) / (2.0 * h));
        }
        for (t, r, c) in [(0, 0, 0), (2, 1, 2), (4, 0, 1)] {
            let mut xp = xs.clone();
            xp[t][[r, c]] += h;
            let mut xm = xs.clone();
            xm[t][[r, c]] -= h;
            check(dxs[t][[r, c]], (objective(&l, &xp, &ws) - objective(&l, &xm, &ws)) / (2.0 * h));
        }
    }

    #[test]
    fn repeated_input_matches_explicit_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = Lstm::new(&mut rng, 3, 4);
        let x = uniform_init(&mut rng, (2, 3), 1);
        let ws: Vec<_> = (0..6).map(|_| Some(uniform_init(&mut rng, (2, 4), 1))).collect();
        let a = l.forward(vec![x.clone(); 6]);
        let b = l.forward_input(LstmInput::Repeat(x, 6));
        for (p, q) in a.outputs().iter().zip(b.outputs()) {
            assert!((p - q).iter().all(|v| v.abs() < 1e-14));
        }
        let (mut ga, mut gb) = (l.zeros_like(), l.zeros_like());
        let da = l.backward(&a, &ws, &mut ga);
        let db = l.backward(&b, &ws, &mut gb);
        let sum = da.iter().fold(Array2::<f64>::zeros((2, 3)), |acc, d| acc + d);
        assert!((&sum - &db[0]).iter().all(|v| v.abs() < 1e-12));
        assert!((&ga.w_ih - &gb.w_ih).iter().all(|v| v.abs() < 1e-12));
        assert!((&ga.w_hh - &gb.w_hh).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut rng, 3, 2);
        let x = uniform_init(&mut rng, (4, 3), 1);
        let dy = uniform_init(&mut rng, (4, 2), 1);
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &dy, &mut g);
        // linear map: exact identities
        assert_eq!(dx, dy.dot(&lin.w));
        assert_eq!(g.b, dy.sum_axis(Axis(0)));
        assert_eq!(lin.forward(&x).dim(), (4, 2));
    }
}
