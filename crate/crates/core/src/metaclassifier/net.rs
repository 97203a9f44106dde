use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureModel;
use crate::numkit::rng::rng_for;
use crate::numkit::{dot, gemm, Checkpoint, Matrix, ParamId, ParamStore};

/// Sizes of the three feature segments `[context prefix, candidate, suffix]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub prefix: usize,
    pub candidate: usize,
    pub suffix: usize,
}

impl FeatureLayout {
    pub fn of<M: FeatureModel>(model: &M) -> Self {
        FeatureLayout {
            prefix: model.prefix_dim(),
            candidate: model.candidate_dim(),
            suffix: model.suffix_dim(),
        }
    }

    /// A layout treating the whole feature as the candidate segment.
    pub fn flat(dim: usize) -> Self {
        FeatureLayout {
            prefix: 0,
            candidate: dim,
            suffix: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.prefix + self.candidate + self.suffix
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

/// Three affine layers with ReLUs between them and a two-way softmax
/// (`[unsafe, safe]`) on top.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    layout: FeatureLayout,
    hidden: usize,
    store: ParamStore,
    ids: Ids,
}

/// Candidates sharing one decoding context. Features are
/// `[prefix, segments[i], suffix]`.
#[derive(Debug, Clone, Copy)]
pub struct GroupView<'a> {
    pub prefix: &'a [f64],
    pub segments: &'a [&'a [f64]],
    pub suffix: &'a [f64],
}

struct GroupCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
    /// Rows of `[p_unsafe, p_safe]`.
    probs: Vec<[f64; 2]>,
}

impl MetaParams {
    pub fn new(layout: FeatureLayout, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || layout.dim() == 0 {
            return Err(Error::Config("meta-classifier needs a non-empty feature and hidden layer".into()));
        }
        let mut rng = rng_for(seed, &[0x6d65_7461]);
        let f = layout.dim();
        let mut store = ParamStore::new();
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let w1 = store.add("m.w1", Matrix::uniform(hidden, f, he(f), &mut rng))?;
        let b1 = store.add("m.b1", Matrix::zeros(hidden, 1))?;
        let w2 = store.add("m.w2", Matrix::uniform(hidden, hidden, he(hidden), &mut rng))?;
        let b2 = store.add("m.b2", Matrix::zeros(hidden, 1))?;
        let w3 = store.add("m.w3", Matrix::uniform(2, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng))?;
        let b3 = store.add("m.b3", Matrix::zeros(2, 1))?;
        Ok(MetaParams {
            layout,
            hidden,
            store,
            ids: Ids { w1, b1, w2, b2, w3, b3 },
        })
    }

    pub fn from_parts(layout: FeatureLayout, hidden: usize, store: ParamStore) -> Result<Self> {
        let get = |name: &str, rows: usize, cols: usize| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != (rows, cols) {
                return Err(Error::Shape(format!(
                    "`{name}` is {:?}, expected ({rows}, {cols})",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let ids = Ids {
            w1: get("m.w1", hidden, layout.dim())?,
            b1: get("m.b1", hidden, 1)?,
            w2: get("m.w2", hidden, hidden)?,
            b2: get("m.b2", hidden, 1)?,
            w3: get("m.w3", 2, hidden)?,
            b3: get("m.b3", 2, 1)?,
        };
        Ok(MetaParams { layout, hidden, store, ids })
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroes the output layer, making every prediction exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        self.store.value_mut(self.ids.w3).fill(0.0);
        self.store.value_mut(self.ids.b3).fill(0.0);
    }

    /// Sets the output bias so that every prediction is `p_safe`, with the
    /// output weights zeroed.
    pub fn constant(mut self, p_safe: f64) -> Self {
        self.zero_output_layer();
        let b3 = self.store.value_mut(self.ids.b3);
        b3.set(1, 0, (p_safe / (1.0 - p_safe)).ln());
        self
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.store.clone())
            .with_meta("kind", "meta")
            .with_meta("prefix", self.layout.prefix)
            .with_meta("candidate", self.layout.candidate)
            .with_meta("suffix", self.layout.suffix)
            .with_meta("hidden", self.hidden)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta_str("kind")? != "meta" {
            return Err(Error::Config("checkpoint is not a meta-classifier".into()));
        }
        let layout = FeatureLayout {
            prefix: ckpt.meta_usize("prefix")?,
            candidate: ckpt.meta_usize("candidate")?,
            suffix: ckpt.meta_usize("suffix")?,
        };
        let mut store = ckpt.store.clone();
        store.reset_optimizer();
        Self::from_parts(layout, ckpt.meta_usize("hidden")?, store)
    }

    /// `[P(unsafe), P(safe)]` for one full feature vector.
    pub fn probabilities(&self, feature: &[f64]) -> Result<[f64; 2]> {
        if feature.len() != self.layout.dim() {
            return Err(Error::Shape(format!(
                "feature has {} entries, meta-classifier expects {}",
                feature.len(),
                self.layout.dim()
            )));
        }
        let s = &self.store;
        let mut a1 = s.value(self.ids.b1).data().to_vec();
        s.value(self.ids.w1).matvec_acc(feature, &mut a1);
        relu(&mut a1);
        let mut a2 = s.value(self.ids.b2).data().to_vec();
        s.value(self.ids.w2).matvec_acc(&a1, &mut a2);
        relu(&mut a2);
        let mut z = s.value(self.ids.b3).data().to_vec();
        s.value(self.ids.w3).matvec_acc(&a2, &mut z);
        Ok(two_way_softmax(z[0], z[1]))
    }

    pub fn predict_safe(&self, feature: &[f64]) -> Result<f64> {
        Ok(self.probabilities(feature)?[1])
    }

    /// `P(safe)` for every candidate of a group, sharing the context part of
    /// the first layer.
    pub fn predict_group(&self, group: GroupView<'_>) -> Result<Vec<f64>> {
        self.check_group(&group)?;
        Ok(forward_group(&self.store, &self.ids, self.layout, self.hidden, &group)
            .probs
            .iter()
            .map(|p| p[1])
            .collect())
    }

    /// Summed cross-entropy of a labelled group under the parameters in
    /// `store` (which must share this network's layout).
    pub fn group_loss_with(&self, store: &ParamStore, group: GroupView<'_>, labels: &[bool]) -> f64 {
        let cache = forward_group(store, &self.ids, self.layout, self.hidden, &group);
        cross_entropy(&cache.probs, labels)
    }

    pub fn group_loss(&self, group: GroupView<'_>, labels: &[bool]) -> f64 {
        self.group_loss_with(&self.store, group, labels)
    }

    /// Adds the gradient of the summed cross-entropy of `group` to the store's
    /// gradient buffers and returns the loss.
    pub fn accumulate_group_gradient(&mut self, group: GroupView<'_>, labels: &[bool]) -> Result<f64> {
        self.check_group(&group)?;
        if labels.len() != group.segments.len() {
            return Err(Error::Shape("one label per candidate required".into()));
        }
        let (h, n) = (self.hidden, group.segments.len());
        let ids = self.ids;
        let FeatureLayout { prefix: pd, candidate: cd, .. } = self.layout;
        let cache = forward_group(&self.store, &ids, self.layout, h, &group);
        let loss = cross_entropy(&cache.probs, labels);

        // output layer
        let mut dz = vec![0.0; 2 * n];
        for (i, (p, &y)) in cache.probs.iter().zip(labels).enumerate() {
            dz[2 * i] = p[0] - if y { 0.0 } else { 1.0 };
            dz[2 * i + 1] = p[1] - if y { 1.0 } else { 0.0 };
        }
        let w3 = self.store.value(ids.w3).data().to_vec();
        {
            let gw3 = self.store.grad_mut(ids.w3).data_mut();
            gemm(2, n, h, &dz, true, &cache.a2, false, 1.0, gw3);
        }
        {
            let gb3 = self.store.grad_mut(ids.b3).data_mut();
            for i in 0..n {
                gb3[0] += dz[2 * i];
                gb3[1] += dz[2 * i + 1];
            }
        }
        let mut da2 = vec![0.0; n * h];
        gemm(n, 2, h, &dz, false, &w3, false, 0.0, &mut da2);
        relu_backward(&mut da2, &cache.a2);

        // hidden layer
        {
            let gw2 = self.store.grad_mut(ids.w2).data_mut();
            gemm(h, n, h, &da2, true, &cache.a1, false, 1.0, gw2);
        }
        {
            let gb2 = self.store.grad_mut(ids.b2).data_mut();
            for row in da2.chunks_exact(h) {
                gb2.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
        let mut da1 = vec![0.0; n * h];
        gemm(n, h, h, &da2, false, self.store.value(ids.w2).data(), false, 0.0, &mut da1);
        relu_backward(&mut da1, &cache.a1);

        // first layer: candidate columns per row, shared columns once
        let mut shared = vec![0.0; h];
        {
            let gw1 = self.store.grad_mut(ids.w1);
            for (row, seg) in da1.chunks_exact(h).zip(group.segments) {
                for (r, &d) in row.iter().enumerate() {
                    shared[r] += d;
                    if d != 0.0 {
                        let g = &mut gw1.row_mut(r)[pd..pd + cd];
                        g.iter_mut().zip(seg.iter()).for_each(|(gi, x)| *gi += d * x);
                    }
                }
            }
            for (r, &d) in shared.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let g = gw1.row_mut(r);
                g[..pd].iter_mut().zip(group.prefix).for_each(|(gi, x)| *gi += d * x);
                g[pd + cd..].iter_mut().zip(group.suffix).for_each(|(gi, x)| *gi += d * x);
            }
        }
        let gb1 = self.store.grad_mut(ids.b1).data_mut();
        gb1.iter_mut().zip(&shared).for_each(|(g, d)| *g += d);
        Ok(loss)
    }

    fn check_group(&self, g: &GroupView<'_>) -> Result<()> {
        let l = self.layout;
        if g.prefix.len() != l.prefix || g.suffix.len() != l.suffix || g.segments.iter().any(|s| s.len() != l.candidate) {
            return Err(Error::Shape(format!(
                "group segments do not match layout {}+{}+{}",
                l.prefix, l.candidate, l.suffix
            )));
        }
        Ok(())
    }
}

fn forward_group(store: &ParamStore, ids: &Ids, layout: FeatureLayout, h: usize, g: &GroupView<'_>) -> GroupCache {
    let n = g.segments.len();
    let (pd, cd) = (layout.prefix, layout.candidate);
    let w1 = store.value(ids.w1);
    let mut shared = store.value(ids.b1).data().to_vec();
    for (r, s) in shared.iter_mut().enumerate() {
        let row = w1.row(r);
        *s += dot(&row[..pd], g.prefix) + dot(&row[pd + cd..], g.suffix);
    }
    let mut a1 = Vec::with_capacity(n * h);
    for seg in g.segments {
        for (r, &s) in shared.iter().enumerate() {
            a1.push(s + dot(&w1.row(r)[pd..pd + cd], seg));
        }
    }
    relu(&mut a1);
    let b2 = store.value(ids.b2).data();
    let mut a2: Vec<f64> = (0..n).flat_map(|_| b2.iter().copied()).collect();
    gemm(n, h, h, &a1, false, store.value(ids.w2).data(), true, 1.0, &mut a2);
    relu(&mut a2);
    let (w3, b3) = (store.value(ids.w3), store.value(ids.b3).data());
    let probs = a2
        .chunks_exact(h)
        .map(|row| two_way_softmax(b3[0] + dot(w3.row(0), row), b3[1] + dot(w3.row(1), row)))
        .collect();
    GroupCache { a1, a2, probs }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn relu_backward(grad: &mut [f64], act: &[f64]) {
    grad.iter_mut().zip(act).for_each(|(g, &a)| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

fn two_way_softmax(z0: f64, z1: f64) -> [f64; 2] {
    let m = z0.max(z1);
    let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn cross_entropy(probs: &[[f64; 2]], labels: &[bool]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -(p[y as usize].max(f64::MIN_POSITIVE)).ln())
        .sum()
}
