//! Subnetworks: per-edge variational autoencoders, per-entity fusion nets
//! and per-entity spectral nets with a Cholesky orthogonalization layer.
//!
//! Networks only describe structure. Their weights live in a shared
//! [`ParameterStore`] under a name prefix, and every forward pass records
//! onto a caller-provided [`Tape`].

use nalgebra::linalg::Cholesky;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Mat, ParameterStore, Tape, Var};
use crate::schema::DType;

/// How hidden widths shrink from the input dimension to the bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Multiply the previous width by this fraction, rounding up.
    Fraction(f64),
    /// A fixed number of layers, halving each time.
    Layers(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub sizes: Vec<usize>,
}

impl LayerPlan {
    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("plan has at least two sizes")
    }
}

/// Widths from `input_dim` down to `l`.
///
/// With `Fraction(θ)` the widths are `input, ⌈θ·input⌉, ⌈θ²·input⌉, …`
/// until the first value `≤ l`, which becomes `l`. With `Layers(n)` the
/// list has at most `n` entries, each half the previous (rounded up), and
/// the last is replaced by `l`; it ends early if halving reaches `l`.
pub fn layer_plan(input_dim: usize, l: usize, mode: PlanMode) -> Result<LayerPlan> {
    if l == 0 {
        return Err(Error::Plan("bottleneck width must be positive".into()));
    }
    if l >= input_dim {
        return Err(Error::Plan(format!(
            "bottleneck {} must be smaller than input dimension {}",
            l, input_dim
        )));
    }
    let mut sizes = vec![input_dim];
    match mode {
        PlanMode::Fraction(theta) => {
            if !(theta > 0.0 && theta < 1.0) {
                return Err(Error::Plan(format!("fraction {} not in (0, 1)", theta)));
            }
            loop {
                let prev = *sizes.last().unwrap();
                // ceil can stall at small widths; force progress
                let next = ((theta * prev as f64).ceil() as usize).min(prev - 1);
                if next <= l {
                    sizes.push(l);
                    break;
                }
                sizes.push(next);
            }
        }
        PlanMode::Layers(n) => {
            if n < 2 {
                return Err(Error::Plan(format!("need at least 2 layers, got {}", n)));
            }
            while sizes.len() < n - 1 {
                let next = sizes.last().unwrap().div_ceil(2);
                if next <= l {
                    break;
                }
                sizes.push(next);
            }
            sizes.push(l);
        }
    }
    Ok(LayerPlan { sizes })
}

/// A stack of dense layers with tanh between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    /// Apply tanh after the last layer too.
    pub activate_last: bool,
}

impl Mlp {
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        group: &str,
        sizes: &[usize],
        activate_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        for (i, w) in sizes.windows(2).enumerate() {
            store.insert_dense(&format!("{}.{}", prefix, i), group, w[0], w[1], rng)?;
        }
        Ok(Mlp {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
            activate_last,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len().saturating_sub(1)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.num_layers();
        for i in 0..n {
            h = dense(tape, store, &format!("{}.{}", self.prefix, i), h)?;
            if i + 1 < n || self.activate_last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// `x·W + 1·b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn dense(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{}.w", prefix))?;
    let b = tape.param(store, &format!("{}.b", prefix))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Gaussian,
    Bernoulli,
}

impl From<DType> for OutputHead {
    fn from(d: DType) -> Self {
        match d {
            DType::Binary => OutputHead::Bernoulli,
            DType::Real => OutputHead::Gaussian,
        }
    }
}

/// Encoder trunk, μ and log-variance heads, and a mirrored decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeNet {
    pub plan: LayerPlan,
    pub trunk: Mlp,
    pub mu_head: String,
    pub logvar_head: String,
    pub decoder: Mlp,
    pub head: OutputHead,
}

pub struct VaeOutput {
    pub mu: Var,
    pub logvar: Var,
    /// Decoder output before the link: logits for Bernoulli, means for
    /// Gaussian.
    pub out: Var,
    pub loss: Var,
}

impl VaeNet {
    /// Encoder parameters go to `enc_group`, decoder parameters to
    /// `dec_group`.
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        enc_group: &str,
        dec_group: &str,
        plan: LayerPlan,
        head: OutputHead,
        rng: &mut R,
    ) -> Result<Self> {
        let s = &plan.sizes;
        let penultimate = s[s.len() - 2];
        let l = plan.output();
        let trunk = Mlp::build(
            store,
            &format!("{}.enc", prefix),
            enc_group,
            &s[..s.len() - 1],
            true,
            rng,
        )?;
        let mu_head = format!("{}.mu", prefix);
        let logvar_head = format!("{}.logvar", prefix);
        store.insert_dense(&mu_head, enc_group, penultimate, l, rng)?;
        store.insert_dense(&logvar_head, enc_group, penultimate, l, rng)?;
        let rev: Vec<usize> = s.iter().rev().copied().collect();
        let decoder = Mlp::build(store, &format!("{}.dec", prefix), dec_group, &rev, false, rng)?;
        Ok(VaeNet {
            plan,
            trunk,
            mu_head,
            logvar_head,
            decoder,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.plan.input()
    }

    pub fn latent_dim(&self) -> usize {
        self.plan.output()
    }

    fn check_input(&self, tape: &Tape, y: Var) -> Result<()> {
        if tape.value(y).ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "autoencoder expects {} columns, got {}",
                self.input_dim(),
                tape.value(y).ncols()
            )));
        }
        Ok(())
    }

    /// Mean and log-variance of the approximate posterior.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, y: Var) -> Result<(Var, Var)> {
        self.check_input(tape, y)?;
        let h = self.trunk.forward(tape, store, y)?;
        let mu = dense(tape, store, &self.mu_head, h)?;
        let logvar = dense(tape, store, &self.logvar_head, h)?;
        tape.check_finite(mu, "encoder mean")?;
        tape.check_finite(logvar, "encoder log-variance")?;
        Ok((mu, logvar))
    }

    /// Full pass with a reparameterized sample `z = μ + exp(logvar/2)·ξ`,
    /// `ξ` standard normal drawn from `noise_seed`.
    ///
    /// The loss is the mean reconstruction error over elements (binary
    /// cross-entropy on logits, or squared error) plus the KL divergence to
    /// `N(0, I)` averaged over rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        y: Var,
        noise_seed: u64,
    ) -> Result<VaeOutput> {
        let (mu, logvar) = self.encode(tape, store, y)?;
        let (n, l) = tape.value(mu).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let xi = Mat::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = tape.constant(xi);
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, xi)?;
        let z = tape.add(mu, noise)?;
        let out = self.decoder.forward(tape, store, z)?;
        tape.check_finite(out, "decoder output")?;
        let recon = reconstruction_loss(tape, out, y, self.head, true)?;
        let kl = kl_to_standard_normal(tape, mu, logvar)?;
        let loss = tape.add(recon, kl)?;
        Ok(VaeOutput {
            mu,
            logvar,
            out,
            loss,
        })
    }
}

/// Reconstruction error between decoder output `out` and target `y`:
/// binary cross-entropy on logits for Bernoulli, squared error for
/// Gaussian. `mean` averages over elements, otherwise sums.
pub fn reconstruction_loss(
    tape: &mut Tape,
    out: Var,
    y: Var,
    head: OutputHead,
    mean: bool,
) -> Result<Var> {
    let per_cell = match head {
        OutputHead::Bernoulli => {
            // -y·log σ(s) − (1−y)·log(1−σ(s)) = softplus(s) − y·s
            let sp = tape.softplus(out);
            let ys = tape.mul(y, out)?;
            tape.sub(sp, ys)?
        }
        OutputHead::Gaussian => {
            let d = tape.sub(out, y)?;
            tape.square(d)
        }
    };
    Ok(if mean {
        tape.mean(per_cell)
    } else {
        tape.sum(per_cell)
    })
}

/// `½ Σ (μ² + e^logvar − 1 − logvar)`, averaged over rows.
pub fn kl_to_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.value(mu).nrows().max(1) as f64;
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5 / n))
}

/// Convenience wrapper returning plain values: `(μ, reconstruction,
/// loss)`. The reconstruction is passed through the logistic link for a
/// Bernoulli head.
pub fn vae_forward(
    net: &VaeNet,
    store: &ParameterStore,
    y: &Mat,
    noise_seed: u64,
) -> Result<(Mat, Mat, f64)> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let o = net.forward(&mut tape, store, yv, noise_seed)?;
    let recon = match net.head {
        OutputHead::Bernoulli => {
            let s = tape.sigmoid(o.out);
            tape.value(s).clone()
        }
        OutputHead::Gaussian => tape.value(o.out).clone(),
    };
    Ok((tape.value(o.mu).clone(), recon, tape.scalar(o.loss)))
}

/// Maps the concatenated μ blocks of an entity's incident matrices to one
/// `l`-wide representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNet {
    pub mlp: Mlp,
    pub blocks: usize,
}

impl FusionNet {
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        group: &str,
        blocks: usize,
        l: usize,
        mode: PlanMode,
        rng: &mut R,
    ) -> Result<Self> {
        if blocks < 2 {
            return Err(Error::Config(
                "fusion needs at least two incident matrices".into(),
            ));
        }
        let plan = layer_plan(blocks * l, l, mode)?;
        let mlp = Mlp::build(store, prefix, group, &plan.sizes, false, rng)?;
        Ok(FusionNet { mlp, blocks })
    }

    pub fn input_width(&self) -> usize {
        self.mlp.sizes[0]
    }
}

/// One μ block passes through unchanged; several are concatenated in the
/// given order and fed to `net`.
pub fn fuse(
    tape: &mut Tape,
    store: &ParameterStore,
    net: Option<&FusionNet>,
    blocks: &[Var],
) -> Result<Var> {
    let rows = tape.value(blocks[0]).nrows();
    if let Some(bad) = blocks.iter().find(|b| tape.value(**b).nrows() != rows) {
        return Err(Error::Shape(format!(
            "fusion blocks have {} and {} rows",
            rows,
            tape.value(*bad).nrows()
        )));
    }
    match (blocks.len(), net) {
        (0, _) => Err(Error::Shape("no blocks to fuse".into())),
        (1, _) => Ok(blocks[0]),
        (n, Some(net)) if n == net.blocks => {
            let cat = tape.concat_cols(blocks)?;
            let u = net.mlp.forward(tape, store, cat)?;
            tape.check_finite(u, "fusion output")?;
            Ok(u)
        }
        (n, _) => Err(Error::Shape(format!(
            "{} blocks need a fusion net of matching width",
            n
        ))),
    }
}

/// Dense tanh stack producing a `k`-wide pre-output, followed by a linear
/// layer whose weight is recomputed from the batch so the output columns
/// are orthonormal under `(1/n)·CᵀC`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralNet {
    pub mlp: Mlp,
    pub k: usize,
}

impl SpectralNet {
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        group: &str,
        l: usize,
        k: usize,
        mode: PlanMode,
        rng: &mut R,
    ) -> Result<Self> {
        let plan = layer_plan(l, k, mode)?;
        let mlp = Mlp::build(store, prefix, group, &plan.sizes, false, rng)?;
        Ok(SpectralNet { mlp, k })
    }

    /// Returns the orthonormal output `C` and the fixed final weight. The
    /// weight enters the tape as a constant.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, u: Var) -> Result<(Var, Mat)> {
        let pre = self.mlp.forward(tape, store, u)?;
        tape.check_finite(pre, "spectral pre-output")?;
        let w = orthonormalizer(tape.value(pre))?;
        let wv = tape.constant(w.clone());
        let c = tape.matmul(pre, wv)?;
        Ok((c, w))
    }
}

const JITTER_DOUBLINGS: usize = 8;

/// Deviation `‖(1/n)·CᵀC − I‖_F`.
pub fn orthogonality_error(c: &Mat) -> f64 {
    let n = c.nrows().max(1) as f64;
    let g = c.tr_mul(c) / n;
    (g - Mat::identity(c.ncols(), c.ncols())).norm()
}

fn cholesky_with_jitter(g: &Mat) -> Result<(Mat, f64)> {
    let k = g.nrows();
    let base = 1e-9 * g.trace().max(0.0) / k as f64;
    let base = if base > 0.0 { base } else { 1e-300 };
    let mut jitter = base;
    for _ in 0..=JITTER_DOUBLINGS {
        let shifted = g + Mat::identity(k, k) * jitter;
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok((ch.l(), jitter));
        }
        jitter *= 2.0;
    }
    Err(Error::Ortho(format!(
        "Cholesky failed after {} jitter doublings",
        JITTER_DOUBLINGS
    )))
}

/// The `k × k` weight `W` with `(1/n)·(C̃W)ᵀ(C̃W) = I`.
///
/// `W = L⁻ᵀ` for the Cholesky factor `L` of the jittered Gram
/// `(1/n)·C̃ᵀC̃`. A second factorization of the resulting Gram removes the
/// jitter bias and rounding error. A pivot that only the jitter supports
/// means `C̃` is rank deficient and raises an error.
pub fn orthonormalizer(pre: &Mat) -> Result<Mat> {
    let (n, k) = pre.shape();
    if n < k || k == 0 {
        return Err(Error::Ortho(format!(
            "need at least k={} rows, got {}",
            k, n
        )));
    }
    let gram = pre.tr_mul(pre) / n as f64;
    let (l1, jitter) = cholesky_with_jitter(&gram)?;
    for i in 0..k {
        let pivot = l1[(i, i)] * l1[(i, i)];
        if pivot <= 2.0 * jitter {
            return Err(Error::Ortho(format!(
                "column {} of the spectral pre-output is linearly dependent",
                i
            )));
        }
    }
    let w1 = inverse_transpose_lower(&l1)?;
    let c1 = pre * &w1;
    let gram2 = c1.tr_mul(&c1) / n as f64;
    let l2 = Cholesky::new(gram2)
        .ok_or_else(|| Error::Ortho("refinement Cholesky failed".into()))?
        .l();
    let w = w1 * inverse_transpose_lower(&l2)?;
    let c = pre * &w;
    let err = orthogonality_error(&c);
    if !(err < 1e-8) {
        return Err(Error::Ortho(format!(
            "orthogonality error {:.3e} after refinement",
            err
        )));
    }
    Ok(w)
}

fn inverse_transpose_lower(l: &Mat) -> Result<Mat> {
    let k = l.nrows();
    let inv = l
        .solve_lower_triangular(&Mat::identity(k, k))
        .ok_or_else(|| Error::Ortho("singular Cholesky factor".into()))?;
    Ok(inv.transpose())
}
