//! Network construction from the entity–matrix graph, the two-phase
//! training loop and extraction of the learned factors.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiway::{self, ClusterAssignment};
use crate::ndiff::{Adam, Archive, Mat, ParameterStore, Tape, Var};
use crate::networks::{
    self, layer_plan, FusionNet, OutputHead, PlanMode, SpectralNet, VaeNet,
};
use crate::schema::{self, sample_batch, Batch, DType, EntityId, MatrixId, RelationalCollection};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Width of every entity representation.
    pub l: usize,
    /// Number of clusters per entity, indexed by entity id.
    pub k: Vec<usize>,
    pub lr: f64,
    /// Step size of the reconstruction step; `lr` when unset.
    #[serde(default)]
    pub lr_relational: Option<f64>,
    /// Step size of the trace-loss step; `lr` when unset.
    #[serde(default)]
    pub lr_clustering: Option<f64>,
    /// Step size of the encoder weights within the trace-loss step;
    /// the trace-loss step size when unset.
    #[serde(default)]
    pub lr_clustering_encoder: Option<f64>,
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Number of batches; each iteration samples `d/y` instances per entity.
    pub y: usize,
    /// Training iterations.
    pub t: usize,
    /// Gaussian kernel scale. `None` picks the median pairwise distance on
    /// the first clustering batch, per entity.
    pub sigma: Option<f64>,
    /// Multiplier applied to the median distance when `sigma` is unset.
    #[serde(default = "unit")]
    pub sigma_scale: f64,
    /// Re-estimate the median distance whenever the indicators are
    /// refreshed instead of keeping the first estimate.
    #[serde(default)]
    pub sigma_refresh: bool,
    pub plan: PlanMode,
    pub seed: u64,
    /// Recompute cluster indicators from the spectral embedding every this
    /// many iterations; 0 keeps the initial ones.
    pub j_refresh: usize,
}

impl Hyperparams {
    pub fn new(k: Vec<usize>) -> Self {
        Hyperparams {
            l: 16,
            k,
            lr: 1e-3,
            lr_relational: None,
            lr_clustering: None,
            lr_clustering_encoder: None,
            weight_decay: 1e-4,
            optimizer: Optimizer::Sgd,
            y: 1,
            t: 500,
            sigma: None,
            sigma_scale: 1.0,
            sigma_refresh: false,
            plan: PlanMode::Layers(3),
            seed: 0,
            j_refresh: 10,
        }
    }

    pub fn validate(&self, c: &RelationalCollection) -> Result<()> {
        let bad = |s: String| Err(Error::Config(s));
        if self.k.len() != c.num_entities() {
            return bad(format!(
                "k: expected {} values (one per entity), got {}",
                c.num_entities(),
                self.k.len()
            ));
        }
        for (e, &k) in self.k.iter().enumerate() {
            let ent = c.entity(e);
            if k == 0 || k > ent.count {
                return bad(format!(
                    "k[{}]: {} clusters for '{}' with {} instances",
                    e, k, ent.name, ent.count
                ));
            }
        }
        if self.l == 0 {
            return bad("l: must be positive".into());
        }
        for (name, v) in [
            ("lr", Some(self.lr)),
            ("lr_relational", self.lr_relational),
            ("lr_clustering", self.lr_clustering),
            ("lr_clustering_encoder", self.lr_clustering_encoder),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{}: {} must be positive", name, v));
                }
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay: {} must be non-negative", self.weight_decay));
        }
        if self.y == 0 {
            return bad("y: must be at least 1".into());
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma: {} must be positive", s));
            }
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return bad(format!("sigma_scale: {} must be positive", self.sigma_scale));
        }
        Ok(())
    }
}

fn unit() -> f64 {
    1.0
}

/// Every subnetwork and the store holding their weights.
#[derive(Clone, Debug)]
pub struct NetworkBundle {
    pub vaes: BTreeMap<(EntityId, MatrixId), VaeNet>,
    pub fusions: BTreeMap<EntityId, FusionNet>,
    pub spectrals: BTreeMap<EntityId, SpectralNet>,
    pub store: ParameterStore,
    pub hyper: Hyperparams,
}

pub fn enc_group(e: EntityId, m: MatrixId) -> String {
    format!("enc/{}/{}", e, m)
}

pub fn dec_group(e: EntityId, m: MatrixId) -> String {
    format!("dec/{}/{}", e, m)
}

fn is_group(g: &str, kinds: &[&str]) -> bool {
    kinds.iter().any(|k| g.split('/').next() == Some(k))
}

/// One autoencoder per entity–matrix edge, a fusion net per entity with
/// two or more incident matrices and a spectral net per entity.
pub fn construct_network(c: &RelationalCollection, h: &Hyperparams) -> Result<NetworkBundle> {
    h.validate(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let mut store = ParameterStore::new();
    let mut vaes = BTreeMap::new();
    for &(e, m) in c.edges() {
        let md = c.matrix(m);
        let other = md.other(e).expect("edge endpoint");
        let width = c.entity(other).count;
        let plan = layer_plan(width, h.l, h.plan).map_err(|err| {
            Error::Plan(format!("autoencoder for entity {} in matrix {}: {}", e, m, err))
        })?;
        let vae = VaeNet::build(
            &mut store,
            &format!("vae.{}.{}", e, m),
            &enc_group(e, m),
            &dec_group(e, m),
            plan,
            OutputHead::from(md.dtype),
            &mut rng,
        )?;
        vaes.insert((e, m), vae);
    }
    let mut fusions = BTreeMap::new();
    let mut spectrals = BTreeMap::new();
    for e in 0..c.num_entities() {
        let incident = c.matrices_of(e).len();
        if incident >= 2 {
            let f = FusionNet::build(
                &mut store,
                &format!("fusion.{}", e),
                &format!("fus/{}", e),
                incident,
                h.l,
                h.plan,
                &mut rng,
            )?;
            fusions.insert(e, f);
        }
        let s = SpectralNet::build(
            &mut store,
            &format!("spectral.{}", e),
            &format!("spec/{}", e),
            h.l,
            h.k[e],
            h.plan,
            &mut rng,
        )
        .map_err(|err| Error::Config(format!("k[{}]: {}", e, err)))?;
        spectrals.insert(e, s);
    }
    Ok(NetworkBundle {
        vaes,
        fusions,
        spectrals,
        store,
        hyper: h.clone(),
    })
}

impl NetworkBundle {
    /// Fused representation of every entity, from autoencoder inputs
    /// supplied by `input(e, m)`.
    pub fn encode_entities(
        &self,
        tape: &mut Tape,
        c: &RelationalCollection,
        mut input: impl FnMut(EntityId, MatrixId) -> Result<Mat>,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(c.num_entities());
        for e in 0..c.num_entities() {
            let mut mus = Vec::new();
            for m in c.matrices_of(e) {
                let y = tape.constant(input(e, m)?);
                let (mu, _) = self.vaes[&(e, m)].encode(tape, &self.store, y)?;
                mus.push(mu);
            }
            out.push(networks::fuse(tape, &self.store, self.fusions.get(&e), &mus)?);
        }
        Ok(out)
    }

    /// Representations and spectral embeddings on the full collection.
    pub fn full_embeddings(&self, c: &RelationalCollection) -> Result<(Vec<Mat>, Vec<Mat>)> {
        let mut tape = Tape::new();
        let us = self.encode_entities(&mut tape, c, |e, m| c.entity_view(e, m))?;
        let mut cs = Vec::with_capacity(us.len());
        for (e, &u) in us.iter().enumerate() {
            let (cv, _) = self.spectrals[&e].forward(&mut tape, &self.store, u)?;
            cs.push(tape.value(cv).clone());
        }
        Ok((us.iter().map(|&u| tape.value(u).clone()).collect(), cs))
    }
}

/// Reconstruction loss of one matrix from its two entity representations:
/// summed binary cross-entropy on the logits `U_row·U_colᵀ`, or squared
/// Frobenius error for real data.
pub fn relational_loss(
    tape: &mut Tape,
    u_row: Var,
    u_col: Var,
    x: &Mat,
    dtype: DType,
) -> Result<Var> {
    let ut = tape.transpose(u_col);
    let logits = tape.matmul(u_row, ut)?;
    let xv = tape.constant(x.clone());
    networks::reconstruction_loss(tape, logits, xv, OutputHead::from(dtype), false)
}

/// `Tr(CᵀLC)` with `L` held constant.
pub fn trace_loss(tape: &mut Tape, c: Var, laplacian: &Mat) -> Result<Var> {
    let lv = tape.constant(laplacian.clone());
    let lc = tape.matmul(lv, c)?;
    let prod = tape.mul(c, lc)?;
    Ok(tape.sum(prod))
}

/// `P = X'·J_col` when `e` indexes the rows of `x_rec`, `X'ᵀ·J_row`
/// otherwise.
pub fn projection(
    c: &RelationalCollection,
    e: EntityId,
    m: MatrixId,
    x_rec: &Mat,
    j_other: &Mat,
) -> Result<Mat> {
    let md = c.matrix(m);
    let p = if md.row_entity == e {
        if x_rec.ncols() != j_other.nrows() {
            return Err(Error::Shape("projection: indicator rows".into()));
        }
        x_rec * j_other
    } else {
        if x_rec.nrows() != j_other.nrows() {
            return Err(Error::Shape("projection: indicator rows".into()));
        }
        x_rec.tr_mul(j_other)
    };
    Ok(p)
}

fn sq_row_dist(p: &Mat, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..p.ncols() {
        let diff = p[(i, d)] - p[(j, d)];
        s += diff * diff;
    }
    s
}

/// `S(i,j) = Σ_m exp(−‖P_i − P_j‖² / (2σ²))` over the given projections.
pub fn gaussian_similarity(projections: &[Mat], sigma: f64) -> Result<Mat> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma: {} must be positive", sigma)));
    }
    let n = projections
        .first()
        .ok_or_else(|| Error::Shape("no projections".into()))?
        .nrows();
    let mut s = Mat::zeros(n, n);
    let scale = 1.0 / (2.0 * sigma * sigma);
    for p in projections {
        if p.nrows() != n {
            return Err(Error::Shape("projections differ in row count".into()));
        }
        for i in 0..n {
            s[(i, i)] += 1.0;
            for j in 0..i {
                let v = (-sq_row_dist(p, i, j) * scale).exp();
                s[(i, j)] += v;
                s[(j, i)] += v;
            }
        }
    }
    Ok(s)
}

/// Similarity of the instances of `e` from per-matrix reconstructions and
/// the cluster indicators of the opposite entities.
pub fn compute_similarity(
    c: &RelationalCollection,
    x_rec: &[Mat],
    j: &[Mat],
    e: EntityId,
    sigma: f64,
) -> Result<Mat> {
    let ps = c
        .matrices_of(e)
        .into_iter()
        .map(|m| {
            let other = c.matrix(m).other(e).expect("edge endpoint");
            projection(c, e, m, &x_rec[m], &j[other])
        })
        .collect::<Result<Vec<_>>>()?;
    gaussian_similarity(&ps, sigma)
}

/// `L = D − S` with `D` the diagonal of row sums.
pub fn compute_laplacian(s: &Mat) -> Result<Mat> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape(format!("similarity is {:?}", s.shape())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite similarity".into()));
    }
    if (s - s.transpose()).amax() > 1e-10 {
        return Err(Error::Numerics("similarity is not symmetric".into()));
    }
    let mut l = -s;
    for i in 0..s.nrows() {
        l[(i, i)] += s.row(i).sum();
    }
    Ok(l)
}

/// Median of the pairwise distances between rows, pooled over all
/// projections; 1 when every distance is zero.
pub fn median_distance(projections: &[Mat]) -> f64 {
    let mut d = Vec::new();
    for p in projections {
        for i in 0..p.nrows() {
            for j in 0..i {
                d.push(sq_row_dist(p, i, j).sqrt());
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub loss_a: f64,
    pub loss_r: f64,
    pub loss_c: f64,
}

/// Learned factors on the full collection.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    pub u: Vec<Mat>,
    pub c: Vec<Mat>,
    pub clusters: Vec<ClusterAssignment>,
    pub i: Vec<Mat>,
    pub j: Vec<Mat>,
    pub a: Vec<Mat>,
    pub x_rec: Vec<Mat>,
}

const TAG_BATCH: u64 = 1;
const TAG_NOISE_1: u64 = 2;
const TAG_NOISE_2: u64 = 3;
const TAG_BOOTSTRAP: u64 = 4;
const TAG_REFRESH: u64 = 5;
const TAG_OUTPUT: u64 = 6;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic seed for one random draw of the run.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Training loop state. Every random draw is keyed on the seed and the
/// iteration, so a run restored from a checkpoint continues exactly as
/// the uninterrupted run would.
pub struct Trainer<'a> {
    c: &'a RelationalCollection,
    pub bundle: NetworkBundle,
    iteration: usize,
    j: Option<Vec<Mat>>,
    sigma: Option<Vec<f64>>,
    history: Vec<LossRecord>,
    /// Adam state of the autoencoder, reconstruction and clustering steps.
    optim: [Adam; 3],
    /// Largest `‖(1/n)CᵀC − I‖_F` seen in a clustering step.
    pub max_ortho_error: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    sigma: Option<Vec<f64>>,
    history: Vec<LossRecord>,
    hyper: Hyperparams,
    #[serde(default)]
    adam_steps: Vec<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(c: &'a RelationalCollection, h: &Hyperparams) -> Result<Self> {
        Ok(Trainer {
            c,
            bundle: construct_network(c, h)?,
            iteration: 0,
            j: None,
            sigma: h.sigma.map(|s| vec![s; c.num_entities()]),
            history: Vec::new(),
            optim: Default::default(),
            max_ortho_error: 0.0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.bundle.hyper
    }

    /// Current cluster indicators used by the similarity, if bootstrapped.
    pub fn indicators(&self) -> Option<&[Mat]> {
        self.j.as_deref()
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    /// Runs until `t` iterations have completed.
    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    /// Like [`run`](Self::run), calling `after` once each iteration ends.
    pub fn run_with(&mut self, mut after: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while self.iteration < self.bundle.hyper.t {
            self.step()?;
            after(self)?;
        }
        Ok(())
    }

    /// One iteration: the representation phase followed by the clustering
    /// phase on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let iter = self.iteration;
        let wrap = |source: Error| Error::Training {
            iteration: iter,
            source: Box::new(source),
        };
        let h = &self.bundle.hyper;
        let batch = sample_batch(self.c, h.y, derive_seed(h.seed, &[TAG_BATCH, iter as u64]))
            .map_err(wrap)?;
        let (loss_a, loss_r) = self.phase1_step(&batch).map_err(wrap)?;
        self.update_indicators().map_err(wrap)?;
        let loss_c = self.phase2_step(&batch).map_err(wrap)?;
        let rec = LossRecord {
            iter,
            loss_a,
            loss_r,
            loss_c,
        };
        self.history.push(rec);
        self.iteration += 1;
        Ok(rec)
    }

    fn update(&mut self, slot: usize, lr: f64, kinds: &[&str]) -> Result<()> {
        self.update_with(slot, |g| is_group(g, kinds).then_some(lr))
    }

    fn update_with(&mut self, slot: usize, rate: impl Fn(&str) -> Option<f64>) -> Result<()> {
        let wd = self.bundle.hyper.weight_decay;
        let store = &mut self.bundle.store;
        match self.bundle.hyper.optimizer {
            Optimizer::Sgd => store.sgd_step_with(wd, rate),
            Optimizer::Adam => self.optim[slot].step_with(store, wd, rate),
        }
    }

    fn autoencoder_step(&mut self, batch: &Batch, tag: u64) -> Result<f64> {
        let h = &self.bundle.hyper;
        let mut tape = Tape::new();
        let mut total: Option<Var> = None;
        for (idx, (&(e, m), vae)) in self.bundle.vaes.iter().enumerate() {
            let y = tape.constant(batch.entity_rows(self.c, e, m)?);
            let seed = derive_seed(h.seed, &[tag, self.iteration as u64, idx as u64]);
            let out = vae.forward(&mut tape, &self.bundle.store, y, seed)?;
            total = Some(match total {
                Some(t) => tape.add(t, out.loss)?,
                None => out.loss,
            });
        }
        let total = total.expect("collections have at least one edge");
        tape.backward(total)?;
        self.bundle.store.accumulate(&tape)?;
        self.update(0, self.bundle.hyper.lr, &["enc", "dec"])?;
        Ok(tape.scalar(total))
    }

    /// Autoencoder step, then a reconstruction step through the fused
    /// representations. Returns both losses before the updates.
    pub fn phase1_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let loss_a = self.autoencoder_step(batch, TAG_NOISE_1)?;
        let c = self.c;
        let mut tape = Tape::new();
        let us = self
            .bundle
            .encode_entities(&mut tape, c, |e, m| batch.entity_rows(c, e, m))?;
        let mut total: Option<Var> = None;
        for md in c.matrices() {
            let l = relational_loss(
                &mut tape,
                us[md.row_entity],
                us[md.col_entity],
                &batch.blocks[md.id],
                md.dtype,
            )?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.expect("collections have at least one matrix");
        tape.check_finite(total, "reconstruction loss")?;
        tape.backward(total)?;
        self.bundle.store.accumulate(&tape)?;
        let h = &self.bundle.hyper;
        self.update(1, h.lr_relational.unwrap_or(h.lr), &["enc", "fus"])?;
        Ok((loss_a, tape.scalar(total)))
    }

    /// Bootstraps indicators by k-means on the fused representations, then
    /// refreshes them from the spectral embedding on schedule.
    fn update_indicators(&mut self) -> Result<()> {
        let h = &self.bundle.hyper;
        let iter = self.iteration as u64;
        let refresh = h.j_refresh > 0 && self.iteration > 0 && self.iteration % h.j_refresh == 0;
        if self.j.is_some() && !refresh {
            return Ok(());
        }
        let (us, cs) = self.bundle.full_embeddings(self.c)?;
        let (points, tag) = if self.j.is_none() {
            (us, TAG_BOOTSTRAP)
        } else {
            (cs, TAG_REFRESH)
        };
        let mut js = Vec::with_capacity(points.len());
        for (e, p) in points.iter().enumerate() {
            let a = multiway::kmeans(p, h.k[e], derive_seed(h.seed, &[tag, iter, e as u64]))?;
            js.push(multiway::vigorous(&a));
        }
        if refresh && h.sigma_refresh && h.sigma.is_none() {
            self.sigma = None;
        }
        self.j = Some(js);
        Ok(())
    }

    /// Autoencoder step, then a trace-loss step through the spectral nets
    /// with Laplacians built from the current batch reconstructions.
    pub fn phase2_step(&mut self, batch: &Batch) -> Result<f64> {
        self.autoencoder_step(batch, TAG_NOISE_2)?;
        let c = self.c;
        let j_full = self
            .j
            .as_ref()
            .ok_or_else(|| Error::Config("cluster indicators not initialized".into()))?;
        let j_batch: Vec<Mat> = j_full
            .iter()
            .enumerate()
            .map(|(e, j)| schema::select_rows(j, &batch.indices[e]))
            .collect();

        let mut tape = Tape::new();
        let us = self
            .bundle
            .encode_entities(&mut tape, c, |e, m| batch.entity_rows(c, e, m))?;
        let x_rec = c
            .matrices()
            .iter()
            .map(|md| {
                multiway::reconstruct(
                    tape.value(us[md.row_entity]),
                    tape.value(us[md.col_entity]),
                    md.dtype,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        if self.sigma.is_none() {
            let mut sig = Vec::with_capacity(c.num_entities());
            for e in 0..c.num_entities() {
                let ps = c
                    .matrices_of(e)
                    .into_iter()
                    .map(|m| {
                        let other = c.matrix(m).other(e).expect("edge endpoint");
                        projection(c, e, m, &x_rec[m], &j_batch[other])
                    })
                    .collect::<Result<Vec<_>>>()?;
                sig.push(self.bundle.hyper.sigma_scale * median_distance(&ps));
            }
            self.sigma = Some(sig);
        }
        let sigma = self.sigma.as_ref().expect("set above");

        let mut total: Option<Var> = None;
        for e in 0..c.num_entities() {
            let s = compute_similarity(c, &x_rec, &j_batch, e, sigma[e])?;
            let lap = compute_laplacian(&s)?;
            let (cv, _) = self.bundle.spectrals[&e].forward(&mut tape, &self.bundle.store, us[e])?;
            self.max_ortho_error = self
                .max_ortho_error
                .max(networks::orthogonality_error(tape.value(cv)));
            let l = trace_loss(&mut tape, cv, &lap)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.expect("at least one entity");
        tape.check_finite(total, "clustering loss")?;
        tape.backward(total)?;
        self.bundle.store.accumulate(&tape)?;
        let h = &self.bundle.hyper;
        let spec = h.lr_clustering.unwrap_or(h.lr);
        let enc = h.lr_clustering_encoder.unwrap_or(spec);
        self.update_with(2, |g| {
            if is_group(g, &["spec"]) {
                Some(spec)
            } else if is_group(g, &["enc"]) {
                Some(enc)
            } else {
                None
            }
        })?;
        Ok(tape.scalar(total))
    }

    /// Factors on the full collection from the current weights.
    pub fn outputs(&self) -> Result<FactorSet> {
        let h = &self.bundle.hyper;
        let c = self.c;
        let (u, cs) = self.bundle.full_embeddings(c)?;
        let mut clusters = Vec::with_capacity(u.len());
        for (e, ce) in cs.iter().enumerate() {
            clusters.push(multiway::kmeans(
                ce,
                h.k[e],
                derive_seed(h.seed, &[TAG_OUTPUT, e as u64]),
            )?);
        }
        let i: Vec<Mat> = clusters.iter().map(|a| a.indicator()).collect();
        let j: Vec<Mat> = clusters.iter().map(multiway::vigorous).collect();
        let mut a = Vec::with_capacity(c.num_matrices());
        let mut x_rec = Vec::with_capacity(c.num_matrices());
        for md in c.matrices() {
            a.push(multiway::association(
                &md.values,
                &j[md.row_entity],
                &j[md.col_entity],
            )?);
            x_rec.push(multiway::reconstruct(
                &u[md.row_entity],
                &u[md.col_entity],
                md.dtype,
            )?);
        }
        Ok(FactorSet {
            u,
            c: cs,
            clusters,
            i,
            j,
            a,
            x_rec,
        })
    }

    /// Weights plus the loop state needed to resume.
    pub fn checkpoint(&self) -> Result<Archive> {
        let mut archive = Archive::from_store(&self.bundle.store);
        if let Some(js) = &self.j {
            for (e, j) in js.iter().enumerate() {
                archive.push(format!("state.j.{}", e), "state", j.clone());
            }
        }
        for (slot, adam) in self.optim.iter().enumerate() {
            for (name, (m, v)) in &adam.moments {
                archive.push(format!("optim.{}.{}.m", slot, name), "optim", m.clone());
                archive.push(format!("optim.{}.{}.v", slot, name), "optim", v.clone());
            }
        }
        let meta = CheckpointMeta {
            iteration: self.iteration,
            sigma: self.sigma.clone(),
            history: self.history.clone(),
            hyper: self.bundle.hyper.clone(),
            adam_steps: self.optim.iter().map(|a| a.t).collect(),
        };
        archive.meta = serde_json::to_value(meta)
            .map_err(|e| Error::Checkpoint(format!("meta: {}", e)))?;
        Ok(archive)
    }

    /// Restores a run. `t` may differ from the checkpointed value; every
    /// other hyperparameter must match the archive.
    pub fn resume(c: &'a RelationalCollection, archive: &Archive, t: usize) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("meta: {}", e)))?;
        let mut hyper = meta.hyper;
        hyper.t = t;
        let mut bundle = construct_network(c, &hyper)?;
        let store = archive.to_store(|g| g != "state" && g != "optim")?;
        for (name, p) in bundle.store.iter() {
            let saved = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{}'", name)))?;
            if saved.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for '{}'", name)));
            }
        }
        if store.len() != bundle.store.len() {
            return Err(Error::Checkpoint("checkpoint has extra parameters".into()));
        }
        bundle.store = store;
        let j = (0..c.num_entities())
            .map(|e| archive.get(&format!("state.j.{}", e)).cloned())
            .collect::<Option<Vec<_>>>();
        let mut optim: [Adam; 3] = Default::default();
        for (slot, adam) in optim.iter_mut().enumerate() {
            adam.t = meta.adam_steps.get(slot).copied().unwrap_or(0);
            for name in bundle.store.names() {
                let m = archive.get(&format!("optim.{}.{}.m", slot, name));
                let v = archive.get(&format!("optim.{}.{}.v", slot, name));
                if let (Some(m), Some(v)) = (m, v) {
                    adam.moments.insert(name.clone(), (m.clone(), v.clone()));
                }
            }
        }
        Ok(Trainer {
            c,
            bundle,
            iteration: meta.iteration,
            j,
            sigma: meta.sigma,
            history: meta.history,
            optim,
            max_ortho_error: 0.0,
        })
    }
}

/// Builds the networks, trains for `h.t` iterations and extracts the
/// factors.
pub fn train(
    c: &RelationalCollection,
    h: &Hyperparams,
) -> Result<(NetworkBundle, FactorSet, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(c, h)?;
    trainer.run()?;
    let factors = trainer.outputs()?;
    let history = trainer.history.clone();
    Ok((trainer.bundle, factors, history))
}
